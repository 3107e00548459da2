//! Synthetic dialogue scenes with analytic radiance fields.
//!
//! Heads and torsos are soft spheres. The head carries a mouth patch whose
//! color shift follows a scalar decoded from the frame's condition feature;
//! the torso center follows the head pose through a linear coupling and is
//! textured with stripes that move with it. Ground-truth frames come from a
//! 16384-step RK4 integration of the transmittance ODE over the union of the
//! parts' support intervals, which shares no code with [`composite`].
//!
//! [`composite`]: crate::render::composite

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{
    features_per_frame, AudioTrack, ConditionFeature, FeatureRole, FrameWindowing, EXPRESSION_FEATURE_DIM,
    SPEAKER_FEATURE_DIM,
};
use crate::data::blob::Archive;
use crate::data::manifest::{
    condition_schedule, save_pose_blob, AudioRef, ClipManifest, FeatureBlobs, HeadCamera, Individual, PartCameras,
    RoleSegment, TorsoCamera,
};
use crate::encoding::{euler_to_rotation, generate_ray, HeadPose, Ray};
use crate::error::{Error, Result};
use crate::field::{Condition, RadianceSample};
use crate::image::Image;
use crate::posegen::PoseSequenceSample;
use crate::render::{FrameView, RadianceField, RayQuery};

/// Quadrature steps used for ground-truth pixels.
pub const ORACLE_STEPS: usize = 16384;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftSphere {
    pub center: [f64; 3],
    pub radius: f64,
    /// Half-width of the smooth density edge.
    pub softness: f64,
    pub density: f64,
}

impl SoftSphere {
    fn outer(&self) -> f64 {
        self.radius + self.softness
    }

    fn density_at(&self, d: f64) -> f64 {
        self.density * bump(d, self.radius, self.softness)
    }
}

/// 1 inside `r - w`, 0 outside `r + w`, smootherstep between.
fn bump(d: f64, r: f64, w: f64) -> f64 {
    let x = ((r + w - d) / (2.0 * w)).clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: String,
    pub head_radius: f64,
    pub head_color: [f64; 3],
    /// Color change per unit of head-space position.
    pub head_gradient: [[f64; 3]; 3],
    pub torso_color: [f64; 3],
    pub voice_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MouthSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub softness: f64,
    /// Color added at full condition strength.
    pub shift: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorsoSpec {
    pub sphere: SoftSphere,
    /// Center offset per unit of `et - et_rest`, rows x, y, z.
    pub coupling: [[f64; 6]; 3],
    /// Stripe frequency along x in cycles per unit; 0 disables.
    pub stripe_frequency: f64,
    pub stripe_depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlabSpec {
    pub sigma: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
    pub focal: f64,
    pub camera_distance: f64,
    pub t_near: f64,
    pub t_far: f64,
    pub sample_rate: u32,
    /// Role segment length in seconds; speakers rotate through identities.
    pub segment_s: f64,
    /// Pitch and yaw amplitude of generated head motion, radians.
    pub pose_amplitude: [f64; 2],
    pub background_top: [f64; 3],
    pub background_bottom: [f64; 3],
    pub identities: Vec<IdentitySpec>,
    pub head_softness: f64,
    pub head_density: f64,
    pub mouth: Option<MouthSpec>,
    pub torso: Option<TorsoSpec>,
    /// Replaces every part with a homogeneous medium filling the ray bounds.
    pub slab: Option<SlabSpec>,
}

fn identity(id: &str, radius: f64, color: [f64; 3], torso: [f64; 3], hz: f64, tilt: f64) -> IdentitySpec {
    IdentitySpec {
        id: id.into(),
        head_radius: radius,
        head_color: color,
        head_gradient: [[tilt, 0.0, -tilt], [0.0, -0.3, 0.1], [0.1, 0.1, 0.2]],
        torso_color: torso,
        voice_hz: hz,
    }
}

impl SceneSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let base = SceneSpec {
            name: name.into(),
            width: 16,
            height: 16,
            frames: 50,
            fps: 25.0,
            focal: 16.0,
            camera_distance: 2.5,
            t_near: 1.0,
            t_far: 4.0,
            sample_rate: 8000,
            segment_s: 0.4,
            pose_amplitude: [0.12, 0.15],
            background_top: [0.85, 0.88, 0.92],
            background_bottom: [0.55, 0.6, 0.7],
            identities: vec![
                identity("a", 0.55, [0.85, 0.6, 0.45], [0.2, 0.3, 0.65], 150.0, 0.25),
                identity("b", 0.45, [0.45, 0.7, 0.4], [0.7, 0.25, 0.2], 230.0, -0.25),
            ],
            head_softness: 0.05,
            head_density: 25.0,
            mouth: Some(MouthSpec {
                center: [0.0, 0.22, -0.45],
                radius: 0.2,
                softness: 0.08,
                shift: [0.0, -0.35, 0.3],
            }),
            torso: Some(TorsoSpec {
                sphere: SoftSphere {
                    center: [0.0, 1.0, 0.35],
                    radius: 0.6,
                    softness: 0.05,
                    density: 25.0,
                },
                coupling: [[0.0, 1.2, 0.0, 0.0, 0.0, 0.0], [0.8, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0; 6]],
                stripe_frequency: 0.0,
                stripe_depth: 0.0,
            }),
            slab: None,
        };
        match name {
            "two_identity" => Ok(base),
            "torso_motion" => Ok(SceneSpec {
                identities: vec![base.identities[0].clone()],
                pose_amplitude: [0.25, 0.3],
                mouth: None,
                torso: Some(TorsoSpec {
                    sphere: SoftSphere {
                        center: [0.0, 0.85, 0.35],
                        radius: 0.6,
                        softness: 0.05,
                        density: 25.0,
                    },
                    coupling: [[0.0, 1.6, 0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0; 6]],
                    stripe_frequency: 1.5,
                    stripe_depth: 0.35,
                }),
                ..base
            }),
            "slab" => Ok(SceneSpec {
                frames: 4,
                identities: vec![base.identities[0].clone()],
                mouth: None,
                torso: None,
                slab: Some(SlabSpec {
                    sigma: 1.0,
                    color: [0.8, 0.5, 0.3],
                }),
                ..base
            }),
            other => Err(Error::invalid(
                "spec",
                format!("unknown preset `{other}` (slab, two_identity, torso_motion)"),
            )),
        }
    }

    /// A preset name or a path to a JSON spec.
    pub fn resolve(arg: &str) -> Result<Self> {
        let p = Path::new(arg);
        if arg.ends_with(".json") || p.is_file() {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let spec: SceneSpec = serde_json::from_str(&text).map_err(|e| Error::Json {
                field: "spec".into(),
                source: e,
            })?;
            spec.validate()?;
            Ok(spec)
        } else {
            Self::preset(arg)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::invalid("spec.resolution", "width, height and frames must be >= 1"));
        }
        if !(self.fps > 0.0 && self.focal > 0.0 && self.segment_s > 0.0) {
            return Err(Error::invalid("spec.fps", "fps, focal and segment_s must be positive"));
        }
        if !(self.t_near >= 0.0 && self.t_near < self.t_far) {
            return Err(Error::invalid("spec.t_near", "need 0 <= t_near < t_far"));
        }
        if self.identities.is_empty() {
            return Err(Error::invalid("spec.identities", "need at least one identity"));
        }
        if self.sample_rate < 100 {
            return Err(Error::invalid("spec.sample_rate", "must be >= 100"));
        }
        Ok(())
    }

    /// Head pose at rest: camera on the -z axis looking at the origin.
    pub fn rest_et(&self) -> [f64; 6] {
        [0.0, 0.0, 0.0, 0.0, 0.0, -self.camera_distance]
    }

    /// Camera pose orbiting the head at `camera_distance`.
    pub fn head_camera(&self, euler: [f64; 3]) -> HeadPose {
        let r = euler_to_rotation(euler).expect("finite angles");
        let t = r * Vector3::new(0.0, 0.0, -self.camera_distance);
        HeadPose {
            euler,
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn torso_camera(&self) -> HeadPose {
        HeadPose {
            euler: [0.0; 3],
            translation: [0.0, 0.0, -self.camera_distance],
        }
    }

    pub fn background(&self) -> Image {
        let mut img = Image::new(self.width, self.height);
        for y in 0..self.height {
            let a = (y as f64 + 0.5) / self.height as f64;
            let c: [f64; 3] = std::array::from_fn(|k| (1.0 - a) * self.background_top[k] + a * self.background_bottom[k]);
            for x in 0..self.width {
                img.set_pixel(x, y, c);
            }
        }
        img.quantized()
    }
}

/// Condition vectors `s * a + b`; the analytic scene decodes `s` back.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBasis {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl FeatureBasis {
    fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let mut g = || (0..dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        Self { a: g(), b: g() }
    }

    pub fn encode(&self, s: f64) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| s * a + b).collect()
    }

    pub fn decode(&self, f: &[f64]) -> f64 {
        let num: f64 = f.iter().zip(&self.a).zip(&self.b).map(|((f, a), b)| (f - b) * a).sum();
        num / self.a.iter().map(|a| a * a).sum::<f64>()
    }
}

/// Ground-truth field of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub speaker_basis: FeatureBasis,
    pub expression_basis: FeatureBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OracleHeader {
    kind: String,
    spec: SceneSpec,
    seed: u64,
}

pub const ORACLE_KIND: &str = "oracle";

impl AnalyticScene {
    pub fn new(spec: SceneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_BA5E);
        Ok(Self {
            speaker_basis: FeatureBasis::new(SPEAKER_FEATURE_DIM, &mut rng),
            expression_basis: FeatureBasis::new(EXPRESSION_FEATURE_DIM, &mut rng),
            spec,
            seed,
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        Archive::new(&OracleHeader {
            kind: ORACLE_KIND.into(),
            spec: self.spec.clone(),
            seed: self.seed,
        })
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.header_kind() != Some(ORACLE_KIND) {
            return Err(Error::format("checkpoint.kind", format!("expected `{ORACLE_KIND}`")));
        }
        let h: OracleHeader = a.header_as()?;
        Self::new(h.spec, h.seed)
    }

    fn condition_strength(&self, cond: &Condition) -> f64 {
        match cond.role {
            FeatureRole::SpeakerAudio => self.speaker_basis.decode(cond.features),
            FeatureRole::ListenerExpression => self.expression_basis.decode(cond.features),
        }
    }

    /// Density and color of the head of `identity` at head-space `p`.
    pub fn head_at(&self, identity: usize, p: [f64; 3], strength: f64) -> RadianceSample {
        let spec = &self.spec;
        if let Some(slab) = &spec.slab {
            return RadianceSample {
                color: slab.color,
                sigma: slab.sigma,
            };
        }
        let ind = &spec.identities[identity];
        let d = norm(p);
        let sigma = spec.head_density * bump(d, ind.head_radius, spec.head_softness);
        let mut color = ind.head_color;
        for (k, c) in color.iter_mut().enumerate() {
            *c += (0..3).map(|j| ind.head_gradient[k][j] * p[j]).sum::<f64>();
        }
        if let Some(m) = &spec.mouth {
            let w = bump(norm(sub(p, m.center)), m.radius, m.softness) * strength;
            for (c, s) in color.iter_mut().zip(m.shift) {
                *c += w * s;
            }
        }
        RadianceSample {
            color: color.map(|c| c.clamp(0.0, 1.0)),
            sigma,
        }
    }

    pub fn torso_center(&self, et: &[f64; 6]) -> Option<[f64; 3]> {
        let t = self.spec.torso.as_ref()?;
        let rest = self.spec.rest_et();
        let mut c = t.sphere.center;
        for (k, ck) in c.iter_mut().enumerate() {
            *ck += (0..6).map(|j| t.coupling[k][j] * (et[j] - rest[j])).sum::<f64>();
        }
        Some(c)
    }

    pub fn torso_at(&self, identity: usize, q: [f64; 3], et: &[f64; 6]) -> RadianceSample {
        let (Some(t), Some(center)) = (self.spec.torso.as_ref(), self.torso_center(et)) else {
            return RadianceSample {
                color: [0.0; 3],
                sigma: 0.0,
            };
        };
        let local = sub(q, center);
        let sigma = t.sphere.density_at(norm(local));
        let stripe = 1.0 - t.stripe_depth * 0.5 * (1.0 + (2.0 * PI * t.stripe_frequency * local[0]).cos());
        let base = self.spec.identities[identity].torso_color;
        RadianceSample {
            color: base.map(|c| (c * stripe).clamp(0.0, 1.0)),
            sigma,
        }
    }

    fn support(&self, head: &Ray, torso: &Ray, identity: usize, et: &[f64; 6]) -> Vec<(f64, f64)> {
        let (t0, t1) = (head.t_near, head.t_far);
        if self.spec.slab.is_some() {
            return vec![(t0, t1)];
        }
        let mut iv = Vec::new();
        let r = self.spec.identities[identity].head_radius + self.spec.head_softness;
        iv.extend(sphere_interval(head, [0.0; 3], r));
        if let (Some(t), Some(c)) = (&self.spec.torso, self.torso_center(et)) {
            iv.extend(sphere_interval(torso, c, t.sphere.outer()));
        }
        let mut iv: Vec<(f64, f64)> = iv
            .into_iter()
            .map(|(a, b)| (a.max(t0), b.min(t1)))
            .filter(|(a, b)| b > a)
            .collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (a, b) in iv {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        merged
    }

    /// Expected color of one pixel by RK4 on `tau' = sigma`,
    /// `C' = exp(-tau) (sigma_h c_h + sigma_t c_t)` with `steps` total steps.
    pub fn oracle_pixel(&self, view: &FrameView, x: usize, y: usize, steps: usize) -> Result<[f64; 3]> {
        let px = (x as f64 + 0.5, y as f64 + 0.5);
        let head = generate_ray(px, &view.head_pose, &view.head_intr, view.bounds)?;
        let torso = generate_ray(px, &view.torso_pose, &view.torso_intr, view.bounds)?;
        let et = view.head_pose.et();
        let strength = self.condition_strength(&view.cond);
        let id = view.identity;
        let source = |t: f64| -> (f64, [f64; 3]) {
            let h = self.head_at(id, to_arr(head.at(t)), strength);
            let s = self.torso_at(id, to_arr(torso.at(t)), &et);
            let m = std::array::from_fn(|k| h.sigma * h.color[k] + s.sigma * s.color[k]);
            (h.sigma + s.sigma, m)
        };
        let intervals = self.support(&head, &torso, id, &et);
        let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
        let mut tau = 0.0f64;
        let mut color = [0.0; 3];
        for (a, b) in intervals {
            let n = (((b - a) / total) * steps as f64).round().max(1.0) as usize;
            let h = (b - a) / n as f64;
            let mut prev = source(a);
            for i in 0..n {
                let t = a + i as f64 * h;
                let mid = source(t + 0.5 * h);
                let end = source(t + h);
                let k1 = (-tau).exp();
                let k2 = (-(tau + 0.5 * h * prev.0)).exp();
                let k3 = (-(tau + 0.5 * h * mid.0)).exp();
                let k4 = (-(tau + h * mid.0)).exp();
                for c in 0..3 {
                    color[c] += h / 6.0 * (k1 * prev.1[c] + 2.0 * (k2 + k3) * mid.1[c] + k4 * end.1[c]);
                }
                tau += h / 6.0 * (prev.0 + 4.0 * mid.0 + end.0);
                prev = end;
            }
        }
        let bg = view.background.pixel(x, y);
        let t_end = (-tau).exp();
        Ok(std::array::from_fn(|c| color[c] + t_end * bg[c]))
    }

    /// Whether the pixel's head and torso rays cross each part's support.
    pub fn coverage(&self, view: &FrameView, x: usize, y: usize) -> Result<[bool; 2]> {
        let px = (x as f64 + 0.5, y as f64 + 0.5);
        let head = generate_ray(px, &view.head_pose, &view.head_intr, view.bounds)?;
        let torso = generate_ray(px, &view.torso_pose, &view.torso_intr, view.bounds)?;
        let r = self.spec.identities[view.identity].head_radius + self.spec.head_softness;
        let h = sphere_interval(&head, [0.0; 3], r).is_some();
        let t = match (&self.spec.torso, self.torso_center(&view.head_pose.et())) {
            (Some(t), Some(c)) => sphere_interval(&torso, c, t.sphere.outer()).is_some(),
            _ => false,
        };
        Ok([h, t])
    }

    pub fn render_oracle(&self, view: &FrameView, steps: usize) -> Result<Image> {
        let (w, h) = (view.head_intr.width, view.head_intr.height);
        let px: Result<Vec<[f64; 3]>> = (0..w * h)
            .into_par_iter()
            .map(|p| self.oracle_pixel(view, p % w, p / w, steps))
            .collect();
        Image::from_data(w, h, px?.into_iter().flatten().collect())
    }
}

impl RadianceField for AnalyticScene {
    fn head(&self, rays: &[RayQuery], points: &[[f64; 3]], per_ray: usize) -> Result<Vec<RadianceSample>> {
        Ok(points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let r = &rays[i / per_ray];
                self.head_at(r.identity, *p, self.condition_strength(&r.cond))
            })
            .collect())
    }

    fn torso(&self, rays: &[RayQuery], points: &[[f64; 3]], per_ray: usize) -> Result<Vec<RadianceSample>> {
        Ok(points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let r = &rays[i / per_ray];
                self.torso_at(r.identity, *p, &r.et)
            })
            .collect())
    }
}

/// Expected color through a homogeneous slab of thickness `dt`.
pub fn slab_closed_form(sigma: f64, color: [f64; 3], background: [f64; 3], dt: f64) -> [f64; 3] {
    let tr = (-sigma * dt).exp();
    std::array::from_fn(|k| color[k] * (1.0 - tr) + background[k] * tr)
}

fn sphere_interval(ray: &Ray, center: [f64; 3], radius: f64) -> Option<(f64, f64)> {
    let oc = ray.origin - Vector3::from(center);
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((-b - s, -b + s))
}

fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn to_arr(v: Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// AR(1) process starting at zero with unit stationary variance.
fn ar1(n: usize, rho: f64, rng: &mut impl Rng) -> Vec<f64> {
    let k = (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut v = 0.0;
    for i in 0..n {
        if i > 0 {
            let e: f64 = StandardNormal.sample(rng);
            v = rho * v + k * e;
        }
        out.push(v);
    }
    out
}

/// Loudness scale mapping frame RMS to roughly [0, 1].
const RMS_REF: f64 = 0.5;

/// First-order low-pass of normalized RMS, starting from silence.
pub fn lowpass_rms(rms: &[f64]) -> Vec<f64> {
    let mut lp = 0.0;
    rms.iter()
        .map(|r| {
            lp += 0.3 * (r / RMS_REF - lp);
            lp
        })
        .collect()
}

/// Speaker and listener head motion for one stretch of dialogue.
///
/// The speaker nods with loudness and turns randomly; the listener's pitch
/// follows low-passed loudness plus the speaker's previous yaw, and its yaw
/// echoes the speaker's yaw two frames later.
pub fn dialogue_motion(rms: &[f64], amplitude: [f64; 2], rng: &mut impl Rng) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let n = rms.len();
    let yaw = ar1(n, 0.7, rng);
    let ns = ar1(n, 0.5, rng);
    let nl = ar1(n, 0.5, rng);
    let lp = lowpass_rms(rms);
    let [ap, ay] = amplitude;
    let lag = |v: &[f64], t: usize, k: usize| if t >= k { v[t - k] } else { 0.0 };
    let speaker = (0..n)
        .map(|t| {
            let loud = rms[t] / RMS_REF;
            [ap * (0.8 * loud - 0.4 + 0.3 * ns[t]), ay * yaw[t], 0.2 * ay * ns[t]]
        })
        .collect();
    let listener = (0..n)
        .map(|t| {
            [
                ap * (1.2 * lp[t] - 0.4 + 0.6 * lag(&yaw, t, 1) + 0.1 * nl[t]),
                0.5 * ay * lag(&yaw, t, 2),
                0.0,
            ]
        })
        .collect();
    (speaker, listener)
}

/// Bursty voiced signal: a sinusoid under a smoothed random envelope that
/// starts from silence.
pub fn synth_voice(n_frames: usize, fps: f64, sample_rate: u32, hz: f64, rng: &mut impl Rng) -> Vec<f32> {
    let mut env = Vec::with_capacity(n_frames + 1);
    let mut e = 0.0;
    env.push(0.0);
    for _ in 0..n_frames {
        let target: f64 = if rng.random::<f64>() < 0.25 { 0.05 } else { rng.random_range(0.2..1.0) };
        e = 0.5 * e + 0.5 * target;
        env.push(e);
    }
    let n = (n_frames as f64 / fps * sample_rate as f64).round() as usize;
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let f = (t * fps).min(n_frames as f64);
            let k = (f.floor() as usize).min(n_frames - 1);
            let a = env[k] + (env[k + 1] - env[k]) * (f - k as f64);
            (0.8 * a * (2.0 * PI * hz * t + phase).sin()) as f32
        })
        .collect()
}

/// Round trip through 16-bit PCM so features match what is on disk.
fn pcm16(track: AudioTrack) -> Result<AudioTrack> {
    AudioTrack::decode_wav(&track.encode_wav())
}

/// Aligned forecaster sequences from the dialogue motion model.
pub fn pose_dataset(seed: u64, count: usize, frames: usize, fps: f64) -> Result<Vec<PoseSequenceSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SceneSpec::preset("two_identity")?;
    (0..count)
        .map(|k| {
            let hz = rng.random_range(120.0..260.0);
            let samples = synth_voice(frames, fps, 8000, hz, &mut rng);
            let track = pcm16(AudioTrack::new(samples, 8000)?)?;
            let features = features_per_frame(&track, &FrameWindowing::new(fps), frames)?;
            let rms: Vec<f64> = features.iter().map(|f| f[1]).collect();
            let (sp, li) = dialogue_motion(&rms, spec.pose_amplitude, &mut rng);
            Ok(PoseSequenceSample {
                id: format!("seq{k:03}"),
                features,
                speaker: sp.into_iter().map(|e| spec.head_camera(e)).collect(),
                listener: li.into_iter().map(|e| spec.head_camera(e)).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub manifest: ClipManifest,
    pub manifest_path: PathBuf,
    pub oracle: AnalyticScene,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ORACLE_FILE: &str = "oracle.ckpt";

/// Writes a complete clip (frames, poses, audio, features, manifest and
/// the oracle checkpoint) into `out`, which must exist.
pub fn make_synthetic_scene(spec: &SceneSpec, seed: u64, out: &Path) -> Result<SyntheticScene> {
    spec.validate()?;
    let oracle = AnalyticScene::new(spec.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ids = spec.identities.len();
    let frames = spec.frames;
    let duration = frames as f64 / spec.fps;

    let mut segments = Vec::new();
    let mut start = 0.0;
    let mut k = 0;
    while start < duration - 1e-9 {
        let end = (start + spec.segment_s).min(duration);
        segments.push(RoleSegment {
            start_s: start,
            end_s: end,
            speaker_id: spec.identities[k % n_ids].id.clone(),
        });
        start = end;
        k += 1;
    }
    let frame_segment: Vec<usize> = (0..frames)
        .map(|f| {
            let t = f as f64 / spec.fps;
            segments.iter().position(|s| s.start_s <= t && t < s.end_s).unwrap_or(segments.len() - 1)
        })
        .collect();

    // Each segment gets its own voice burst from the active speaker.
    let spf = spec.sample_rate as f64 / spec.fps;
    let total_samples = (duration * spec.sample_rate as f64).round() as usize;
    let mut samples = vec![0f32; total_samples];
    for (si, seg) in segments.iter().enumerate() {
        let f0 = frame_segment.iter().position(|&s| s == si).unwrap_or(0);
        let nf = frame_segment.iter().filter(|&&s| s == si).count().max(1);
        let hz = spec.identities[si % n_ids].voice_hz;
        let voice = synth_voice(nf, spec.fps, spec.sample_rate, hz, &mut rng);
        let off = (f0 as f64 * spf).round() as usize;
        for (i, v) in voice.into_iter().enumerate() {
            if let Some(s) = samples.get_mut(off + i) {
                *s = v;
            }
        }
        debug_assert!(seg.end_s > seg.start_s);
    }
    let track = pcm16(AudioTrack::new(samples, spec.sample_rate)?)?;
    let feats = features_per_frame(&track, &FrameWindowing::new(spec.fps), frames)?;
    let rms: Vec<f64> = feats.iter().map(|f| f[1]).collect();
    let lp = lowpass_rms(&rms);

    let mut eulers = vec![vec![[0.0; 3]; frames]; n_ids];
    for si in 0..segments.len() {
        let idx: Vec<usize> = (0..frames).filter(|&f| frame_segment[f] == si).collect();
        if idx.is_empty() {
            continue;
        }
        let seg_rms: Vec<f64> = idx.iter().map(|&f| rms[f]).collect();
        let (sp, li) = dialogue_motion(&seg_rms, spec.pose_amplitude, &mut rng);
        let speaker = si % n_ids;
        for (j, &f) in idx.iter().enumerate() {
            for (i, e) in eulers.iter_mut().enumerate() {
                e[f] = if i == speaker { sp[j] } else { li[j] };
            }
        }
    }
    let poses: Vec<Vec<HeadPose>> = eulers
        .iter()
        .map(|es| es.iter().map(|e| spec.head_camera(*e)).collect())
        .collect();

    let speaker_feats = ConditionFeature::new(
        FeatureRole::SpeakerAudio,
        SPEAKER_FEATURE_DIM,
        rms.iter().flat_map(|r| oracle.speaker_basis.encode(r / RMS_REF)).collect(),
    )?;
    let expr_feats = ConditionFeature::new(
        FeatureRole::ListenerExpression,
        EXPRESSION_FEATURE_DIM,
        lp.iter().flat_map(|s| oracle.expression_basis.encode(*s)).collect(),
    )?;

    let ids: Vec<String> = spec.identities.iter().map(|i| i.id.clone()).collect();
    let manifest = ClipManifest {
        fps: spec.fps,
        resolution: [spec.width, spec.height],
        num_frames: frames,
        frames_dir: "frames".into(),
        background_image: "background.png".into(),
        audio: AudioRef {
            path: "audio.wav".into(),
            sample_rate: spec.sample_rate,
        },
        individuals: ids
            .iter()
            .map(|id| Individual {
                id: id.clone(),
                part_cameras: PartCameras {
                    head: HeadCamera {
                        focal: spec.focal,
                        principal_point: None,
                    },
                    torso: TorsoCamera {
                        focal: spec.focal,
                        principal_point: None,
                        origin: spec.torso_camera().translation,
                        euler: [0.0; 3],
                    },
                },
                t_near: spec.t_near,
                t_far: spec.t_far,
                pose_blob: format!("poses/{id}.blob"),
            })
            .collect(),
        role_segments: segments,
        feature_blobs: FeatureBlobs {
            speaker_audio: "features/speaker_audio.blob".into(),
            listener_expression: ids
                .iter()
                .map(|id| (id.clone(), format!("features/expression_{id}.blob")))
                .collect(),
        },
        root: out.to_path_buf(),
    };

    for sub in ["frames", "poses", "features"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let background = spec.background();
    background.save_png(&manifest.resolve(&manifest.background_image))?;
    track.write_wav(&manifest.resolve(&manifest.audio.path))?;
    speaker_feats.save(&manifest.resolve(&manifest.feature_blobs.speaker_audio))?;
    // Feature files hold f32; the oracle decodes exactly what the field sees.
    let speaker_feats = reload(&speaker_feats)?;
    let expr_stored = reload(&expr_feats)?;
    for (i, id) in ids.iter().enumerate() {
        save_pose_blob(&manifest.resolve(&manifest.individuals[i].pose_blob), &poses[i])?;
        expr_feats.save(&manifest.resolve(&manifest.feature_blobs.listener_expression[id]))?;
    }
    let stored_poses: Vec<Vec<HeadPose>> = ids.iter().map(|id| manifest.load_poses(id)).collect::<Result<_>>()?;

    for (i, id) in ids.iter().enumerate() {
        let dir = manifest.resolve(&manifest.frames_dir).join(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let schedule = condition_schedule(&manifest, id)?;
        let ind = &manifest.individuals[i];
        for (f, (role, src)) in schedule.into_iter().enumerate() {
            let features = match role {
                FeatureRole::SpeakerAudio => speaker_feats.frame(src),
                FeatureRole::ListenerExpression => expr_stored.frame(src),
            };
            let view = FrameView {
                identity: i,
                head_pose: stored_poses[i][f],
                head_intr: manifest.head_intrinsics(ind),
                torso_pose: manifest.torso_pose(ind),
                torso_intr: manifest.torso_intrinsics(ind),
                bounds: (ind.t_near, ind.t_far),
                cond: Condition { role, features },
                background: &background,
            };
            oracle.render_oracle(&view, ORACLE_STEPS)?.save_png(&manifest.frame_path(id, f))?;
        }
    }
    oracle.to_archive()?.save(&out.join(ORACLE_FILE))?;
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    fs::write(
        out.join("scene.json"),
        serde_json::to_string_pretty(spec).map_err(|e| Error::Json {
            field: "spec".into(),
            source: e,
        })?,
    )
    .map_err(|e| Error::io(out.join("scene.json"), e))?;
    Ok(SyntheticScene {
        manifest,
        manifest_path,
        oracle,
    })
}

fn reload(f: &ConditionFeature) -> Result<ConditionFeature> {
    crate::audio::condition_from_blob(&f.to_blob()?, f.role, Some(f.dim))
}
