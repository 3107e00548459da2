//! Volume rendering: stratified depths, head/torso merging and
//! alpha compositing with an opaque background sample at the end of each ray.
//!
//! Each sample stores its own interval length `delta`. Merging head and torso
//! samples keeps every sample's `delta` from its source ray, so a transparent
//! part leaves the other part's composite untouched.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{generate_ray, CameraIntrinsics, HeadPose, Ray};
use crate::error::{Error, Result};
use crate::field::{Condition, RadianceSample};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub jitter: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            jitter: false,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples", "must be >= 1"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_stratified(ray: &Ray, cfg: &RenderConfig, rng: &mut impl Rng) -> Vec<f64> {
    let n = cfg.n_samples;
    let span = ray.t_far - ray.t_near;
    (0..n)
        .map(|i| {
            let u = if cfg.jitter { rng.random::<f64>() } else { 0.5 };
            ray.t_near + span * (i as f64 + u) / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    pub samples: Vec<RadianceSample>,
    pub background: [f64; 3],
}

impl RaySamples {
    /// Interval lengths follow the depths; the last one runs to `t_far`.
    pub fn new(depths: Vec<f64>, samples: Vec<RadianceSample>, background: [f64; 3], t_far: f64) -> Result<Self> {
        if depths.is_empty() {
            return Err(Error::invalid("samples.depths", "need at least one sample"));
        }
        if depths.len() != samples.len() {
            return Err(Error::dim("samples.values", depths.len(), samples.len()));
        }
        for (i, w) in depths.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::invalid(
                    "samples.depths",
                    format!("depth {} ({}) does not exceed depth {} ({})", i + 1, w[1], i, w[0]),
                ));
            }
        }
        let last = *depths.last().unwrap();
        if !(t_far >= last) {
            return Err(Error::invalid("samples.t_far", format!("{t_far} lies before last depth {last}")));
        }
        let mut deltas: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
        deltas.push(t_far - last);
        Ok(Self {
            depths,
            deltas,
            samples,
            background,
        })
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    /// `T_0 .. T_N`; the last entry is the background weight.
    pub transmittance: Vec<f64>,
}

impl Composite {
    pub fn alpha(&self) -> f64 {
        1.0 - self.transmittance.last().unwrap()
    }
}

pub fn composite(rs: &RaySamples) -> Result<Composite> {
    for (i, w) in rs.depths.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(Error::invalid("samples.depths", format!("decreasing at index {}", i + 1)));
        }
    }
    let n = rs.len();
    let mut weights = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n + 1);
    let mut t = 1.0;
    let mut color = [0.0; 3];
    for (s, &delta) in rs.samples.iter().zip(&rs.deltas) {
        trans.push(t);
        let decay = (-s.sigma * delta).exp();
        let w = t * (1.0 - decay);
        for (c, sc) in color.iter_mut().zip(s.color) {
            *c += w * sc;
        }
        weights.push(w);
        t *= decay;
    }
    trans.push(t);
    for (c, b) in color.iter_mut().zip(rs.background) {
        *c += t * b;
    }
    Ok(Composite {
        color,
        weights,
        transmittance: trans,
    })
}

/// Gradients of `<dcolor, C>` with respect to every sample's density and color.
pub fn composite_backward(rs: &RaySamples, out: &Composite, dcolor: [f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = rs.len();
    let mut dsigma = vec![0.0; n];
    let mut dc = vec![[0.0; 3]; n];
    let t_end = out.transmittance[n];
    // Color contributed behind sample i, projected on dcolor.
    let mut behind: f64 = t_end * dot(rs.background, dcolor);
    for i in (0..n).rev() {
        let ci = dot(rs.samples[i].color, dcolor);
        let w = out.weights[i];
        dc[i] = dcolor.map(|g| g * w);
        dsigma[i] = rs.deltas[i] * (out.transmittance[i + 1] * ci - behind);
        behind += w * ci;
    }
    (dsigma, dc)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Head(usize),
    Torso(usize),
}

/// Stable merge order of two sorted depth lists; ties keep the head first.
pub fn merge_order(head: &[f64], torso: &[f64]) -> Vec<Source> {
    let mut out = Vec::with_capacity(head.len() + torso.len());
    let (mut i, mut j) = (0, 0);
    while i < head.len() || j < torso.len() {
        if j == torso.len() || (i < head.len() && head[i] <= torso[j]) {
            out.push(Source::Head(i));
            i += 1;
        } else {
            out.push(Source::Torso(j));
            j += 1;
        }
    }
    out
}

pub fn merge_head_torso(head: &RaySamples, torso: &RaySamples) -> Result<RaySamples> {
    if head.background != torso.background {
        return Err(Error::invalid(
            "merge.background",
            format!("head {:?} differs from torso {:?}", head.background, torso.background),
        ));
    }
    Ok(merge_with_order(head, torso, &merge_order(&head.depths, &torso.depths)))
}

pub(crate) fn merge_with_order(head: &RaySamples, torso: &RaySamples, order: &[Source]) -> RaySamples {
    let n = order.len();
    let mut out = RaySamples {
        depths: Vec::with_capacity(n),
        deltas: Vec::with_capacity(n),
        samples: Vec::with_capacity(n),
        background: head.background,
    };
    for src in order {
        let (rs, i) = match *src {
            Source::Head(i) => (head, i),
            Source::Torso(i) => (torso, i),
        };
        out.depths.push(rs.depths[i]);
        out.deltas.push(rs.deltas[i]);
        out.samples.push(rs.samples[i]);
    }
    out
}

/// Per-ray inputs shared by all of that ray's samples.
#[derive(Debug, Clone, Copy)]
pub struct RayQuery<'a> {
    pub identity: usize,
    pub direction: [f64; 3],
    pub et: [f64; 6],
    pub cond: Condition<'a>,
}

/// A field that can be queried in batches of rays with `per_ray` points each.
pub trait RadianceField: Sync {
    fn head(&self, rays: &[RayQuery], points: &[[f64; 3]], per_ray: usize) -> Result<Vec<RadianceSample>>;
    fn torso(&self, rays: &[RayQuery], points: &[[f64; 3]], per_ray: usize) -> Result<Vec<RadianceSample>>;
}

/// Everything needed to render one identity's frame.
#[derive(Debug, Clone)]
pub struct FrameView<'a> {
    pub identity: usize,
    pub head_pose: HeadPose,
    pub head_intr: CameraIntrinsics,
    pub torso_pose: HeadPose,
    pub torso_intr: CameraIntrinsics,
    pub bounds: (f64, f64),
    pub cond: Condition<'a>,
    pub background: &'a Image,
}

/// Rays and depths for one pixel.
#[derive(Debug, Clone)]
pub struct PixelRays {
    pub head: Ray,
    pub torso: Ray,
    pub head_depths: Vec<f64>,
    pub torso_depths: Vec<f64>,
}

pub fn pixel_rays(view: &FrameView, x: usize, y: usize, cfg: &RenderConfig, rng: &mut impl Rng) -> Result<PixelRays> {
    let px = (x as f64 + 0.5, y as f64 + 0.5);
    let annotate = |e: Error| e.context(format!("pixel({x},{y})"));
    let head = generate_ray(px, &view.head_pose, &view.head_intr, view.bounds).map_err(annotate)?;
    let torso = generate_ray(px, &view.torso_pose, &view.torso_intr, view.bounds).map_err(annotate)?;
    let head_depths = sample_stratified(&head, cfg, rng);
    let torso_depths = sample_stratified(&torso, cfg, rng);
    Ok(PixelRays {
        head,
        torso,
        head_depths,
        torso_depths,
    })
}

pub fn ray_points(ray: &Ray, depths: &[f64], out: &mut Vec<[f64; 3]>) {
    for &t in depths {
        let p: Vector3<f64> = ray.at(t);
        out.push([p.x, p.y, p.z]);
    }
}

pub struct RenderOutput {
    pub image: Image,
    pub alpha: Vec<f64>,
}

/// Pixels per field batch. Fixed so results do not depend on thread count.
const PIXEL_CHUNK: usize = 64;

/// Renders one frame. Each pixel's jitter stream is seeded from
/// `(cfg.seed, pixel index)`, so parallel and serial runs agree bit for bit.
pub fn render_image(field: &dyn RadianceField, view: &FrameView, cfg: &RenderConfig) -> Result<RenderOutput> {
    cfg.validate()?;
    let (w, h) = (view.head_intr.width, view.head_intr.height);
    if view.torso_intr.width != w || view.torso_intr.height != h {
        return Err(Error::invalid("torso_camera", "resolution differs from head camera"));
    }
    if view.background.width != w || view.background.height != h {
        return Err(Error::invalid(
            "background",
            format!("{}x{} does not match {w}x{h}", view.background.width, view.background.height),
        ));
    }
    let total = w * h;
    let chunks: Vec<(usize, usize)> = (0..total)
        .step_by(PIXEL_CHUNK)
        .map(|s| (s, (s + PIXEL_CHUNK).min(total)))
        .collect();
    let results: Vec<Result<Vec<([f64; 3], f64)>>> = chunks
        .par_iter()
        .map(|&(start, end)| render_chunk(field, view, cfg, start, end))
        .collect();
    let mut image = Image::new(w, h);
    let mut alpha = vec![0.0; total];
    for (&(start, _), res) in chunks.iter().zip(results) {
        for (k, (c, a)) in res?.into_iter().enumerate() {
            let p = start + k;
            image.set_pixel(p % w, p / w, c);
            alpha[p] = a;
        }
    }
    Ok(RenderOutput { image, alpha })
}

fn render_chunk(
    field: &dyn RadianceField,
    view: &FrameView,
    cfg: &RenderConfig,
    start: usize,
    end: usize,
) -> Result<Vec<([f64; 3], f64)>> {
    let w = view.head_intr.width;
    let n = cfg.n_samples;
    let et = view.head_pose.et();
    let mut rays = Vec::with_capacity(end - start);
    let mut head_q = Vec::with_capacity(end - start);
    let mut torso_q = Vec::with_capacity(end - start);
    let mut head_pts = Vec::with_capacity((end - start) * n);
    let mut torso_pts = Vec::with_capacity((end - start) * n);
    for p in start..end {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, p as u64));
        let pr = pixel_rays(view, p % w, p / w, cfg, &mut rng)?;
        ray_points(&pr.head, &pr.head_depths, &mut head_pts);
        ray_points(&pr.torso, &pr.torso_depths, &mut torso_pts);
        let query = |ray: &Ray| RayQuery {
            identity: view.identity,
            direction: [ray.direction.x, ray.direction.y, ray.direction.z],
            et,
            cond: view.cond,
        };
        head_q.push(query(&pr.head));
        torso_q.push(query(&pr.torso));
        rays.push(pr);
    }
    let head_s = field.head(&head_q, &head_pts, n)?;
    let torso_s = field.torso(&torso_q, &torso_pts, n)?;
    let mut out = Vec::with_capacity(end - start);
    for (k, pr) in rays.into_iter().enumerate() {
        let p = start + k;
        let bg = view.background.pixel(p % w, p / w);
        let hs = RaySamples::new(pr.head_depths, head_s[k * n..(k + 1) * n].to_vec(), bg, pr.head.t_far)?;
        let ts = RaySamples::new(pr.torso_depths, torso_s[k * n..(k + 1) * n].to_vec(), bg, pr.torso.t_far)?;
        let comp = composite(&merge_head_torso(&hs, &ts)?)?;
        out.push((comp.color, comp.alpha()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rs(depths: &[f64], sig: &[f64], col: &[[f64; 3]], bg: [f64; 3], t_far: f64) -> RaySamples {
        let samples = sig
            .iter()
            .zip(col)
            .map(|(&sigma, &color)| RadianceSample { color, sigma })
            .collect();
        RaySamples::new(depths.to_vec(), samples, bg, t_far).unwrap()
    }

    #[test]
    fn midpoints_without_jitter() {
        let ray = Ray::new(Vector3::zeros(), Vector3::z(), 0.0, 1.0).unwrap();
        let cfg = RenderConfig {
            n_samples: 4,
            jitter: false,
            seed: 0,
        };
        let d = sample_stratified(&ray, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(d, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn jitter_stays_in_strata() {
        let ray = Ray::new(Vector3::zeros(), Vector3::z(), 2.0, 5.0).unwrap();
        let cfg = RenderConfig {
            n_samples: 16,
            jitter: true,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let d = sample_stratified(&ray, &cfg, &mut rng);
            for (i, t) in d.iter().enumerate() {
                let lo = 2.0 + 3.0 * i as f64 / 16.0;
                let hi = 2.0 + 3.0 * (i + 1) as f64 / 16.0;
                assert!(*t >= lo && *t < hi);
            }
            assert!(d.windows(2).all(|w| w[1] > w[0]));
        }
        let a = sample_stratified(&ray, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_stratified(&ray, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_density_gives_background() {
        let r = rs(&[0.1, 0.5], &[0.0, 0.0], &[[1.0; 3], [0.3; 3]], [0.2, 0.4, 0.6], 1.0);
        let c = composite(&r).unwrap();
        assert_eq!(c.color, [0.2, 0.4, 0.6]);
        assert_eq!(c.weights, vec![0.0, 0.0]);
    }

    #[test]
    fn opaque_front_sample() {
        let r = rs(&[0.1, 0.5], &[1e9, 1.0], &[[0.9, 0.1, 0.2], [0.0; 3]], [1.0; 3], 1.0);
        let c = composite(&r).unwrap();
        for (a, b) in c.color.iter().zip([0.9, 0.1, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_decreasing_depths_and_background_mismatch() {
        let s = RadianceSample {
            color: [0.0; 3],
            sigma: 1.0,
        };
        assert!(RaySamples::new(vec![0.5, 0.2], vec![s, s], [0.0; 3], 1.0).is_err());
        let a = rs(&[0.1], &[1.0], &[[0.0; 3]], [0.0; 3], 1.0);
        let b = rs(&[0.1], &[1.0], &[[0.0; 3]], [1.0; 3], 1.0);
        assert_eq!(merge_head_torso(&a, &b).unwrap_err().field(), "merge.background");
    }

    #[test]
    fn disjoint_merge_by_hand() {
        // Head occupies [0, 1], torso [2, 3]; dense head in front.
        let bg = [0.0, 0.0, 1.0];
        let head = rs(&[0.0, 0.5], &[40.0, 40.0], &[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], bg, 1.0);
        let torso = rs(&[2.0, 2.5], &[2.0, 2.0], &[[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]], bg, 3.0);
        let c = composite(&merge_head_torso(&head, &torso).unwrap()).unwrap();
        let a = 1.0 - (-20.0f64).exp();
        let a_t = 1.0 - (-1.0f64).exp();
        let t_head = (1.0 - a) * (1.0 - a);
        let red = a + (1.0 - a) * a;
        let green = t_head * (a_t + (1.0 - a_t) * a_t);
        let blue = t_head * (1.0 - a_t) * (1.0 - a_t);
        let want = [red, green, blue];
        for (x, y) in c.color.iter().zip(want) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!((c.color[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn transparent_part_leaves_other_unchanged() {
        let bg = [0.3, 0.2, 0.1];
        let head = rs(&[0.2, 0.6, 0.9], &[1.0, 3.0, 0.5], &[[0.1, 0.2, 0.3], [0.9, 0.1, 0.4], [0.5; 3]], bg, 1.2);
        let torso = rs(&[0.1, 0.7], &[0.0, 0.0], &[[1.0; 3], [0.0; 3]], bg, 2.0);
        let alone = composite(&head).unwrap();
        let merged = composite(&merge_head_torso(&head, &torso).unwrap()).unwrap();
        for (a, b) in alone.color.iter().zip(merged.color) {
            assert!((a - b).abs() < 1e-15);
        }
        let merged = composite(&merge_head_torso(&torso, &head).unwrap()).unwrap();
        for (a, b) in alone.color.iter().zip(merged.color) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let bg = [0.3, 0.5, 0.1];
        let base = rs(
            &[0.1, 0.3, 0.8],
            &[0.7, 2.0, 1.3],
            &[[0.2, 0.4, 0.6], [0.9, 0.1, 0.3], [0.5, 0.5, 0.8]],
            bg,
            1.0,
        );
        let g = [0.7, -1.1, 0.4];
        let f = |r: &RaySamples| dot(composite(r).unwrap().color, g);
        let out = composite(&base).unwrap();
        let (ds, dc) = composite_backward(&base, &out, g);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = base.clone();
            let mut m = base.clone();
            p.samples[i].sigma += h;
            m.samples[i].sigma -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - ds[i]).abs() < 1e-8, "sigma {i}: {fd} vs {}", ds[i]);
            for ch in 0..3 {
                let mut p = base.clone();
                let mut m = base.clone();
                p.samples[i].color[ch] += h;
                m.samples[i].color[ch] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - dc[i][ch]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn seeds_are_distinct() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| mix_seed(42, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
