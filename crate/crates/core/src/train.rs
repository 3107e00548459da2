//! Optimization: ray batches, L2 loss, Adam, the field trainer and the
//! finite-difference gradient checker.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureRole;
use crate::data::blob::{write_atomic, Archive};
use crate::data::manifest::{condition_schedule, ClipManifest};
use crate::encoding::{CameraIntrinsics, HeadPose};
use crate::error::{Error, Result};
use crate::field::{Condition, FieldHeader, FieldParams, Part, Segment};
use crate::image::Image;
use crate::nn::{Grads, ParamStore};
use crate::render::{
    composite, composite_backward, merge_order, merge_with_order, mix_seed, pixel_rays, ray_points, FrameView,
    RaySamples, RenderConfig, Source,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = store.zero_grads().0;
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn write_into(&self, store: &ParamStore, archive: &mut Archive) -> Result<()> {
        for (k, name) in store.names().iter().enumerate() {
            let shape = store.get(k).shape.clone();
            archive.push(
                format!("adam.m.{name}"),
                crate::data::blob::TensorBlob::f64(shape.clone(), self.m[k].clone())?,
            );
            archive.push(format!("adam.v.{name}"), crate::data::blob::TensorBlob::f64(shape, self.v[k].clone())?);
        }
        Ok(())
    }

    pub fn read_from(store: &ParamStore, archive: &Archive, step: u64) -> Result<Self> {
        let mut s = Self::new(store);
        s.step = step;
        for (k, name) in store.names().iter().enumerate() {
            for (prefix, dst) in [("adam.m.", &mut s.m[k]), ("adam.v.", &mut s.v[k])] {
                let key = format!("{prefix}{name}");
                let blob = archive.get(&key)?;
                if blob.dims != store.get(k).shape {
                    return Err(Error::format(key, "moment shape does not match parameter"));
                }
                *dst = blob.to_f64();
            }
        }
        Ok(s)
    }
}

/// Bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter changes.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    for (k, g) in grads.0.iter().enumerate() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                field: format!("grad.{}", store.name(k)),
                index: i,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, g) in grads.0.iter().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let p = store.data_mut(k);
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Mean squared error over the batch and the three channels.
pub fn l2_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("target", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::invalid("pred", "empty batch"));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| (0..3).map(move |c| (p[c] - t[c]).powi(2)))
        .sum();
    Ok(sum / (3 * pred.len()) as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Every coordinate.
    Coordinates,
    /// `count` random unit directions, compared as directional derivatives.
    RandomDirections { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_probe: usize,
    pub probes: usize,
    pub passed: bool,
}

/// Denominator floor so coordinates with vanishing gradient do not blow up
/// the relative error through roundoff alone.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Central differences of `f` around `theta` against the analytic gradient.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
    probe: Probe,
) -> GradCheckReport {
    assert_eq!(theta.len(), analytic.len());
    let mut worst = (0.0f64, 0usize);
    let mut x = theta.to_vec();
    let mut record = |k: usize, numeric: f64, exact: f64| {
        let e = rel_error(numeric, exact);
        if e > worst.0 || e.is_nan() {
            worst = (if e.is_nan() { f64::INFINITY } else { e }, k);
        }
    };
    let probes = match probe {
        Probe::Coordinates => {
            for i in 0..theta.len() {
                x[i] = theta[i] + h;
                let fp = f(&x);
                x[i] = theta[i] - h;
                let fm = f(&x);
                x[i] = theta[i];
                record(i, (fp - fm) / (2.0 * h), analytic[i]);
            }
            theta.len()
        }
        Probe::RandomDirections { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in 0..count {
                let mut dir: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|v| *v /= norm);
                let shifted = |s: f64| theta.iter().zip(&dir).map(|(t, d)| t + s * d).collect::<Vec<_>>();
                let fp = f(&shifted(h));
                let fm = f(&shifted(-h));
                let exact: f64 = analytic.iter().zip(&dir).map(|(a, d)| a * d).sum();
                record(k, (fp - fm) / (2.0 * h), exact);
            }
            count
        }
    };
    GradCheckReport {
        max_rel_error: worst.0,
        worst_probe: worst.1,
        probes,
        passed: worst.0 <= tolerance,
    }
}

/// One training image with everything needed to cast its rays.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub identity: usize,
    pub frame: usize,
    pub head_pose: HeadPose,
    pub head_intr: CameraIntrinsics,
    pub torso_pose: HeadPose,
    pub torso_intr: CameraIntrinsics,
    pub bounds: (f64, f64),
    pub role: FeatureRole,
    pub features: Vec<f64>,
    pub image: Image,
}

impl FrameRecord {
    pub fn view<'a>(&'a self, background: &'a Image) -> FrameView<'a> {
        FrameView {
            identity: self.identity,
            head_pose: self.head_pose,
            head_intr: self.head_intr,
            torso_pose: self.torso_pose,
            torso_intr: self.torso_intr,
            bounds: self.bounds,
            cond: Condition {
                role: self.role,
                features: &self.features,
            },
            background,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FieldDataset {
    pub frames: Vec<FrameRecord>,
    pub background: Image,
}

impl FieldDataset {
    pub fn width(&self) -> usize {
        self.background.width
    }

    pub fn height(&self) -> usize {
        self.background.height
    }

    /// Loads every individual's frames; identity indices follow the
    /// manifest's individual order.
    pub fn from_manifest(m: &ClipManifest) -> Result<Self> {
        let background = Image::load_png(&m.resolve(&m.background_image))?;
        if background.width != m.resolution[0] || background.height != m.resolution[1] {
            return Err(Error::invalid("background_image", "size differs from resolution"));
        }
        let speaker = m.load_speaker_features()?;
        let mut frames = Vec::new();
        for (identity, ind) in m.individuals.iter().enumerate() {
            let poses = m.load_poses(&ind.id)?;
            let expr = m.load_expression_features(&ind.id)?;
            let schedule = condition_schedule(m, &ind.id)?;
            for (f, (role, src)) in schedule.into_iter().enumerate() {
                let image = Image::load_png(&m.frame_path(&ind.id, f))?;
                if !image.same_shape(&background) {
                    return Err(Error::invalid(format!("frames_dir.{}.{f:05}", ind.id), "size differs from resolution"));
                }
                let features = match role {
                    FeatureRole::SpeakerAudio => speaker.frame(src).to_vec(),
                    FeatureRole::ListenerExpression => expr.frame(src).to_vec(),
                };
                frames.push(FrameRecord {
                    identity,
                    frame: f,
                    head_pose: poses[f],
                    head_intr: m.head_intrinsics(ind),
                    torso_pose: m.torso_pose(ind),
                    torso_intr: m.torso_intrinsics(ind),
                    bounds: (ind.t_near, ind.t_far),
                    role,
                    features,
                    image,
                });
            }
        }
        Ok(Self { frames, background })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
    pub target: [f64; 3],
}

/// Uniform draws over all (frame, pixel) pairs.
pub fn sample_ray_batch(data: &FieldDataset, batch: usize, rng: &mut impl Rng) -> Result<Vec<RaySample>> {
    if data.frames.is_empty() {
        return Err(Error::invalid("dataset", "no frames"));
    }
    if batch == 0 {
        return Err(Error::invalid("ray_batch", "must be >= 1"));
    }
    let (w, h) = (data.width(), data.height());
    let per_frame = w * h;
    let total = data.frames.len() * per_frame;
    Ok((0..batch)
        .map(|_| {
            let k = rng.random_range(0..total);
            let (frame, p) = (k / per_frame, k % per_frame);
            let (x, y) = (p % w, p / w);
            RaySample {
                frame,
                x,
                y,
                target: data.frames[frame].image.pixel(x, y),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub ray_batch: usize,
    pub iterations: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Samples per ray for each part.
    pub n_samples: usize,
    pub jitter: bool,
    pub deformation_penalty: f64,
    pub checkpoint_every: usize,
    pub divergence_factor: f64,
    pub divergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ray_batch: 2048,
            iterations: 1000,
            seed: 0,
            adam: AdamConfig::default(),
            n_samples: 64,
            jitter: true,
            deformation_penalty: 1e-4,
            checkpoint_every: 0,
            divergence_factor: 10.0,
            divergence_window: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ray_batch == 0 {
            return Err(Error::invalid("ray_batch", "must be >= 1"));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples", "must be >= 1"));
        }
        if !(self.deformation_penalty >= 0.0) {
            return Err(Error::invalid("deformation_penalty", "must be >= 0"));
        }
        Ok(())
    }
}

/// Rays per work unit. Fixed so the gradient sum order never depends on
/// the thread count.
pub const RAY_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    /// Reconstruction MSE over the batch.
    pub loss: f64,
    /// Deformation penalty term already weighted.
    pub penalty: f64,
    pub grads: Grads,
}

/// Loss and gradients of one ray batch. Per-ray jitter streams come from
/// `(batch_seed, ray index)`.
pub fn batch_loss_and_grads(
    field: &FieldParams,
    data: &FieldDataset,
    batch: &[RaySample],
    cfg: &TrainConfig,
    batch_seed: u64,
) -> Result<BatchResult> {
    let b = batch.len();
    let scale = 1.0 / (3 * b) as f64;
    let pen_scale = cfg.deformation_penalty / (b * cfg.n_samples) as f64;
    let parts: Vec<Result<(f64, f64, Grads)>> = batch
        .par_chunks(RAY_CHUNK)
        .enumerate()
        .map(|(c, rays)| chunk_grads(field, data, rays, c * RAY_CHUNK, cfg, batch_seed, scale, pen_scale))
        .collect();
    let mut grads = field.store.zero_grads();
    let (mut sq, mut pen) = (0.0, 0.0);
    for part in parts {
        let (s, p, g) = part?;
        sq += s;
        pen += p;
        grads.add_assign(&g);
    }
    Ok(BatchResult {
        loss: sq * scale,
        penalty: pen,
        grads,
    })
}

#[allow(clippy::too_many_arguments)]
fn chunk_grads(
    field: &FieldParams,
    data: &FieldDataset,
    rays: &[RaySample],
    base: usize,
    cfg: &TrainConfig,
    batch_seed: u64,
    scale: f64,
    pen_scale: f64,
) -> Result<(f64, f64, Grads)> {
    let n = cfg.n_samples;
    let rcfg = RenderConfig {
        n_samples: n,
        jitter: cfg.jitter,
        seed: batch_seed,
    };
    let mut pixel = Vec::with_capacity(rays.len());
    let mut head_pts = Vec::with_capacity(rays.len() * n);
    let mut torso_pts = Vec::with_capacity(rays.len() * n);
    let mut dir_enc = Vec::with_capacity(rays.len());
    let mut et_enc = Vec::with_capacity(rays.len());
    for (k, r) in rays.iter().enumerate() {
        let rec = &data.frames[r.frame];
        let view = rec.view(&data.background);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(batch_seed, (base + k) as u64));
        let pr = pixel_rays(&view, r.x, r.y, &rcfg, &mut rng)?;
        ray_points(&pr.head, &pr.head_depths, &mut head_pts);
        ray_points(&pr.torso, &pr.torso_depths, &mut torso_pts);
        let d = pr.head.direction;
        dir_enc.push(field.encode_direction(&[d.x, d.y, d.z]));
        et_enc.push(field.encode_pose(&rec.head_pose.et()));
        pixel.push(pr);
    }
    let head_segs: Vec<Segment> = rays
        .iter()
        .zip(&dir_enc)
        .map(|(r, d)| {
            let rec = &data.frames[r.frame];
            Segment {
                len: n,
                codes: field.registry.pair(rec.identity, Part::Head),
                cond: Some(Condition {
                    role: rec.role,
                    features: &rec.features,
                }),
                aux: d,
            }
        })
        .collect();
    let torso_segs: Vec<Segment> = rays
        .iter()
        .zip(&et_enc)
        .map(|(r, e)| Segment {
            len: n,
            codes: field.registry.pair(data.frames[r.frame].identity, Part::Torso),
            cond: None,
            aux: e,
        })
        .collect();
    let (head_out, head_cache) = field.head_forward(field.encode_positions(&head_pts).view(), &head_segs)?;
    let (torso_out, torso_cache) = field.torso_forward(field.encode_positions(&torso_pts).view(), &torso_segs)?;
    let head_s = head_out.samples();
    let torso_s = torso_out.samples();

    let mut dsig_h = vec![0.0; rays.len() * n];
    let mut dsig_t = vec![0.0; rays.len() * n];
    let mut drgb_h = vec![[0.0; 3]; rays.len() * n];
    let mut drgb_t = vec![[0.0; 3]; rays.len() * n];
    let mut sq = 0.0;
    for (k, (r, pr)) in rays.iter().zip(pixel).enumerate() {
        let bg = data.background.pixel(r.x, r.y);
        let span = k * n..(k + 1) * n;
        let hs = RaySamples::new(pr.head_depths, head_s[span.clone()].to_vec(), bg, pr.head.t_far)?;
        let ts = RaySamples::new(pr.torso_depths, torso_s[span].to_vec(), bg, pr.torso.t_far)?;
        let order = merge_order(&hs.depths, &ts.depths);
        let merged = merge_with_order(&hs, &ts, &order);
        let out = composite(&merged)?;
        let mut dc = [0.0; 3];
        for c in 0..3 {
            let e = out.color[c] - r.target[c];
            sq += e * e;
            dc[c] = 2.0 * e * scale;
        }
        let (ds, dcol) = composite_backward(&merged, &out, dc);
        for (m, src) in order.iter().enumerate() {
            match *src {
                Source::Head(i) => {
                    dsig_h[k * n + i] = ds[m];
                    drgb_h[k * n + i] = dcol[m];
                }
                Source::Torso(i) => {
                    dsig_t[k * n + i] = ds[m];
                    drgb_t[k * n + i] = dcol[m];
                }
            }
        }
    }
    let mut grads = field.store.zero_grads();
    field.head_backward(&head_cache, &dsig_h, &drgb_h, &mut grads);
    let mut pen = 0.0;
    let ddelta = if field.deformation_enabled() && cfg.deformation_penalty > 0.0 {
        pen = pen_scale * torso_cache.delta.iter().map(|v| v * v).sum::<f64>();
        Some(torso_cache.delta.mapv(|v| 2.0 * pen_scale * v))
    } else {
        None
    };
    field.torso_backward(&torso_cache, &dsig_t, &drgb_t, ddelta.as_ref(), &mut grads);
    Ok((sq, pen, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("iteration,loss,psnr\n");
    for r in rows {
        s.push_str(&format!("{},{:.17e},{:.17e}\n", r.iteration, r.loss, r.psnr));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    field: FieldHeader,
    train: TrainConfig,
    iteration: usize,
    adam_step: u64,
    initial_loss: Option<f64>,
    over_count: usize,
    curve: Vec<LossRow>,
}

pub const FIELD_CHECKPOINT_KIND: &str = "field_checkpoint";

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTrainer {
    pub field: FieldParams,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub iteration: usize,
    pub initial_loss: Option<f64>,
    /// Consecutive iterations above the divergence threshold.
    pub over_count: usize,
    pub curve: Vec<LossRow>,
}

impl FieldTrainer {
    pub fn new(field: FieldParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt: OptimizerState::new(&field.store),
            field,
            cfg,
            iteration: 0,
            initial_loss: None,
            over_count: 0,
            curve: Vec::new(),
        })
    }

    pub fn step(&mut self, data: &FieldDataset) -> Result<LossRow> {
        let it = self.iteration;
        let iter_seed = mix_seed(self.cfg.seed, it as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(iter_seed);
        let batch = sample_ray_batch(data, self.cfg.ray_batch, &mut rng)?;
        let res = batch_loss_and_grads(&self.field, data, &batch, &self.cfg, rng.random())?;
        if !res.loss.is_finite() {
            return Err(Error::Diverged {
                field: "loss".into(),
                message: format!("non-finite loss {} at iteration {it}", res.loss),
            });
        }
        let initial = *self.initial_loss.get_or_insert(res.loss);
        if res.loss > self.cfg.divergence_factor * initial {
            self.over_count += 1;
            if self.over_count >= self.cfg.divergence_window {
                return Err(Error::Diverged {
                    field: "loss".into(),
                    message: format!(
                        "loss {:.6e} above {}x initial {:.6e} for {} iterations (iteration {it})",
                        res.loss, self.cfg.divergence_factor, initial, self.over_count
                    ),
                });
            }
        } else {
            self.over_count = 0;
        }
        adam_step(&mut self.field.store, &res.grads, &mut self.opt, &self.cfg.adam)?;
        let row = LossRow {
            iteration: it,
            loss: res.loss,
            psnr: psnr_from_mse(res.loss),
        };
        self.curve.push(row);
        self.iteration += 1;
        Ok(row)
    }

    /// Trains until `cfg.iterations`, writing a checkpoint every
    /// `checkpoint_every` iterations (if a path is given) and at the end.
    pub fn run(&mut self, data: &FieldDataset, checkpoint: Option<&Path>) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let row = self.step(data)?;
            if row.iteration % 100 == 0 {
                log::info!("iteration {} loss {:.6e} psnr {:.2}", row.iteration, row.loss, row.psnr);
            }
            if let Some(path) = checkpoint {
                if self.cfg.checkpoint_every > 0 && self.iteration.is_multiple_of(self.cfg.checkpoint_every) {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let header = CheckpointHeader {
            kind: FIELD_CHECKPOINT_KIND.into(),
            field: self.field.header(),
            train: self.cfg.clone(),
            iteration: self.iteration,
            adam_step: self.opt.step,
            initial_loss: self.initial_loss,
            over_count: self.over_count,
            curve: self.curve.clone(),
        };
        let mut a = Archive::new(&header)?;
        self.field.write_params(&mut a)?;
        self.opt.write_into(&self.field.store, &mut a)?;
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.header_kind() != Some(FIELD_CHECKPOINT_KIND) {
            return Err(Error::format("checkpoint.kind", format!("expected `{FIELD_CHECKPOINT_KIND}`")));
        }
        let h: CheckpointHeader = a.header_as()?;
        let field = FieldParams::from_archive(&h.field, a)?;
        let opt = OptimizerState::read_from(&field.store, a, h.adam_step)?;
        Ok(Self {
            field,
            opt,
            cfg: h.train,
            iteration: h.iteration,
            initial_loss: h.initial_loss,
            over_count: h.over_count,
            curve: h.curve,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn write_curve(&self, path: &Path) -> Result<()> {
        write_atomic(path, loss_csv(&self.curve).as_bytes())
    }
}

pub fn train_field(data: &FieldDataset, field: FieldParams, cfg: TrainConfig) -> Result<FieldTrainer> {
    let mut t = FieldTrainer::new(field, cfg)?;
    t.run(data, None)?;
    Ok(t)
}

/// Names of parameter tensors whose gradient is exactly zero on `batch`.
pub fn dead_parameters(field: &FieldParams, data: &FieldDataset, batch: &[RaySample], cfg: &TrainConfig) -> Result<Vec<String>> {
    let res = batch_loss_and_grads(field, data, batch, cfg, 0)?;
    Ok(res
        .grads
        .0
        .iter()
        .enumerate()
        .filter(|(_, g)| g.iter().all(|v| *v == 0.0))
        .map(|(k, _)| field.store.name(k).to_string())
        .collect())
}

/// Appends a line to a log file, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let a = vec![[0.2, 0.4, 0.6]; 5];
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<[f64; 3]> = a.iter().map(|p| p.map(|v| v + 0.1)).collect();
        assert!((l2_loss(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!(l2_loss(&a, &b[..3]).is_err());
    }

    #[test]
    fn loss_matches_two_pass_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<[f64; 3]> = (0..1000).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let t: Vec<[f64; 3]> = (0..1000).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mut per_ch = [0.0; 3];
        for (a, b) in p.iter().zip(&t) {
            for c in 0..3 {
                per_ch[c] += (a[c] - b[c]) * (a[c] - b[c]);
            }
        }
        let want = (per_ch[0] + per_ch[1] + per_ch[2]) / 3000.0;
        assert!((l2_loss(&p, &t).unwrap() - want).abs() < 1e-10);
    }

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", vec![vals.len()], vals.to_vec());
        s
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = OptimizerState::new(&s);
        adam_step(&mut s, &Grads(vec![vec![0.0, 0.0]]), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.data(0), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut s = store(&[1.0, 1.0, 1.0]);
        let mut st = OptimizerState::new(&s);
        adam_step(&mut s, &Grads(vec![vec![3.0, -0.5, 1e-3]]), &mut st, &cfg).unwrap();
        let moved: Vec<f64> = s.data(0).iter().map(|v| v - 1.0).collect();
        assert!((moved[0] + 0.01).abs() < 1e-8);
        assert!((moved[1] - 0.01).abs() < 1e-8);
        assert!((moved[2] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_nan_names_parameter() {
        let mut s = store(&[1.0]);
        let mut st = OptimizerState::new(&s);
        let err = adam_step(&mut s, &Grads(vec![vec![f64::NAN]]), &mut st, &AdamConfig::default()).unwrap_err();
        assert_eq!(err.field(), "grad.w");
        assert_eq!(s.data(0), &[1.0]);
    }

    #[test]
    fn quadratic_grad_check() {
        let theta = [0.3, -1.2, 2.5, 0.0, 4.0];
        let r = grad_check(
            |t| t.iter().map(|v| v * v).sum::<f64>() / 2.0,
            &theta,
            &theta,
            1e-5,
            1e-9,
            Probe::Coordinates,
        );
        assert!(r.passed, "{r:?}");
        let r = grad_check(
            |t| t.iter().map(|v| v * v).sum::<f64>() / 2.0,
            &theta,
            &theta,
            1e-5,
            1e-9,
            Probe::RandomDirections { count: 10, seed: 1 },
        );
        assert!(r.passed, "{r:?}");
        let wrong: Vec<f64> = theta.iter().map(|v| v * 1.1).collect();
        assert!(!grad_check(|t| t.iter().map(|v| v * v).sum::<f64>() / 2.0, &theta, &wrong, 1e-5, 1e-3, Probe::Coordinates).passed);
    }
}
