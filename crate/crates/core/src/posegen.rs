//! Head-pose forecasting with temporal convolutional networks.
//!
//! The speaker head maps per-frame `(zcr, rms)` to a pose trajectory. The
//! listener head additionally reads the speaker's trajectory. Both heads are
//! causal dilated-convolution stacks with residual blocks.
//!
//! Poses are regressed as deltas from the first frame of each sequence,
//! divided by per-dimension training-set scales. A zero model therefore
//! predicts a constant sequence at the anchor pose.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{features_per_frame, AudioTrack, FrameWindowing};
use crate::data::blob::Archive;
use crate::data::manifest::ClipManifest;
use crate::encoding::{wrap_angle, HeadPose};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{Activation, Grads, ParamId, ParamStore};
use crate::render::mix_seed;
use crate::train::{adam_step, AdamConfig, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub kernel_size: usize,
    pub levels: usize,
    pub channels: usize,
    pub dilation_base: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl TcnConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            kernel_size: 3,
            levels: 4,
            channels: 32,
            dilation_base: 2,
            input_dim,
            output_dim,
            activation: Activation::Relu,
        }
    }

    /// `1 + (k - 1) * sum_i 2 * base^i`: two dilated convolutions per level.
    pub fn receptive_field(&self) -> usize {
        let sum: usize = (0..self.levels).map(|i| 2 * self.dilation_base.pow(i as u32)).sum();
        1 + (self.kernel_size - 1) * sum
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 2 {
            return Err(Error::invalid("kernel_size", "must be >= 2"));
        }
        if self.levels == 0 {
            return Err(Error::invalid("levels", "must be >= 1"));
        }
        if self.channels == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("channels", "channel counts must be positive"));
        }
        if self.dilation_base == 0 {
            return Err(Error::invalid("dilation_base", "must be >= 1"));
        }
        Ok(())
    }
}

/// Causal dilated 1-D convolution; weight layout `[k, out, in]`, tap `j`
/// reads `x[t - (k - 1 - j) * dilation]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    k: usize,
    dilation: usize,
    cin: usize,
    cout: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, k: usize, dilation: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((k * cin) as f64).sqrt();
        let w = (0..k * cout * cin).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..cout).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: store.add(format!("{name}.weight"), vec![k, cout, cin], w),
            bias: store.add(format!("{name}.bias"), vec![cout], b),
            k,
            dilation,
            cin,
            cout,
        }
    }

    fn forward(&self, store: &ParamStore, x: &[f64], t_len: usize) -> Vec<f64> {
        let w = store.data(self.weight);
        let b = store.data(self.bias);
        let mut y = Vec::with_capacity(t_len * self.cout);
        for _ in 0..t_len {
            y.extend_from_slice(b);
        }
        for t in 0..t_len {
            let yt = &mut y[t * self.cout..(t + 1) * self.cout];
            for j in 0..self.k {
                let shift = (self.k - 1 - j) * self.dilation;
                if shift > t {
                    continue;
                }
                let xs = &x[(t - shift) * self.cin..(t - shift + 1) * self.cin];
                let wj = &w[j * self.cout * self.cin..(j + 1) * self.cout * self.cin];
                for (o, yo) in yt.iter_mut().enumerate() {
                    let row = &wj[o * self.cin..(o + 1) * self.cin];
                    *yo += row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        y
    }

    fn backward(&self, store: &ParamStore, grads: &mut Grads, x: &[f64], dy: &[f64], t_len: usize) -> Vec<f64> {
        let w = store.data(self.weight);
        let mut dx = vec![0.0; t_len * self.cin];
        {
            let db = grads.get_mut(self.bias);
            for t in 0..t_len {
                for o in 0..self.cout {
                    db[o] += dy[t * self.cout + o];
                }
            }
        }
        let dw = grads.get_mut(self.weight);
        for t in 0..t_len {
            let dyt = &dy[t * self.cout..(t + 1) * self.cout];
            for j in 0..self.k {
                let shift = (self.k - 1 - j) * self.dilation;
                if shift > t {
                    continue;
                }
                let s = t - shift;
                let base = j * self.cout * self.cin;
                for (o, &g) in dyt.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let off = base + o * self.cin;
                    for i in 0..self.cin {
                        dw[off + i] += g * x[s * self.cin + i];
                        dx[s * self.cin + i] += g * w[off + i];
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    down: Option<Conv>,
}

struct BlockCache {
    x: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    h2_pre: Vec<f64>,
    h2: Vec<f64>,
    out_pre: Vec<f64>,
    out: Vec<f64>,
}

/// Causal temporal convolutional network over `T x input_dim` sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Tcn {
    pub config: TcnConfig,
    blocks: Vec<Block>,
    head: Conv,
}

pub struct TcnCache {
    blocks: Vec<BlockCache>,
    t_len: usize,
}

fn act_vec(act: Activation, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| act.apply(v)).collect()
}

fn act_back(act: Activation, pre: &[f64], post: &[f64], d: &mut [f64]) {
    for ((g, &x), &y) in d.iter_mut().zip(pre).zip(post) {
        *g *= act.derivative(x, y);
    }
}

impl Tcn {
    pub fn new(store: &mut ParamStore, name: &str, config: TcnConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.levels);
        let mut cin = config.input_dim;
        for i in 0..config.levels {
            let d = config.dilation_base.pow(i as u32);
            let c = config.channels;
            let conv1 = Conv::new(store, &format!("{name}.block{i}.conv1"), config.kernel_size, d, cin, c, rng);
            let conv2 = Conv::new(store, &format!("{name}.block{i}.conv2"), config.kernel_size, d, c, c, rng);
            let down = (cin != c).then(|| Conv::new(store, &format!("{name}.block{i}.down"), 1, 1, cin, c, rng));
            blocks.push(Block { conv1, conv2, down });
            cin = c;
        }
        let head = Conv::new(store, &format!("{name}.head"), 1, 1, cin, config.output_dim, rng);
        Ok(Self { config, blocks, head })
    }

    fn check_input(&self, x: &[f64]) -> Result<usize> {
        let d = self.config.input_dim;
        if x.is_empty() {
            return Err(Error::invalid("sequence", "length must be >= 1"));
        }
        if !x.len().is_multiple_of(d) {
            return Err(Error::dim("sequence.input_dim", d, x.len()));
        }
        ensure_finite("sequence", x)?;
        Ok(x.len() / d)
    }

    /// Output has exactly as many frames as the input.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(store, x)?.0)
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, TcnCache)> {
        let t_len = self.check_input(x)?;
        let act = self.config.activation;
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h1_pre = b.conv1.forward(store, &h, t_len);
            let h1 = act_vec(act, &h1_pre);
            let h2_pre = b.conv2.forward(store, &h1, t_len);
            let h2 = act_vec(act, &h2_pre);
            let res = match &b.down {
                Some(d) => d.forward(store, &h, t_len),
                None => h.clone(),
            };
            let out_pre: Vec<f64> = h2.iter().zip(&res).map(|(a, r)| a + r).collect();
            let out = act_vec(act, &out_pre);
            caches.push(BlockCache {
                x: h,
                h1_pre,
                h1,
                h2_pre,
                h2,
                out_pre,
                out: out.clone(),
            });
            h = out;
        }
        let y = self.head.forward(store, &h, t_len);
        Ok((y, TcnCache { blocks: caches, t_len }))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &TcnCache, dy: &[f64]) -> Vec<f64> {
        let t_len = cache.t_len;
        let act = self.config.activation;
        let last = &cache.blocks.last().unwrap().out;
        let mut d = self.head.backward(store, grads, last, dy, t_len);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            act_back(act, &c.out_pre, &c.out, &mut d);
            let d_res = d.clone();
            act_back(act, &c.h2_pre, &c.h2, &mut d);
            let mut d_h1 = b.conv2.backward(store, grads, &c.h1, &d, t_len);
            act_back(act, &c.h1_pre, &c.h1, &mut d_h1);
            let mut dx = b.conv1.backward(store, grads, &c.x, &d_h1, t_len);
            match &b.down {
                Some(dn) => {
                    let r = dn.backward(store, grads, &c.x, &d_res, t_len);
                    dx.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                None => dx.iter_mut().zip(d_res).for_each(|(a, b)| *a += b),
            }
            d = dx;
        }
        d
    }

    /// Mean squared error against `target` and its parameter gradient.
    pub fn mse_and_grads(&self, store: &ParamStore, grads: &mut Grads, x: &[f64], target: &[f64], weight: f64) -> Result<f64> {
        let (y, cache) = self.forward_cached(store, x)?;
        if y.len() != target.len() {
            return Err(Error::dim("target", y.len(), target.len()));
        }
        let n = y.len() as f64;
        let mut loss = 0.0;
        let dy: Vec<f64> = y
            .iter()
            .zip(target)
            .map(|(a, b)| {
                let e = a - b;
                loss += e * e;
                2.0 * weight * e / n
            })
            .collect();
        self.backward(store, grads, &cache, &dy);
        Ok(loss / n)
    }
}

/// Which signals reach the listener head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ListenerInputs {
    pub audio: bool,
    pub speaker_pose: bool,
}

impl Default for ListenerInputs {
    fn default() -> Self {
        Self {
            audio: true,
            speaker_pose: true,
        }
    }
}

impl ListenerInputs {
    pub fn dim(&self) -> usize {
        2 * self.audio as usize + 6 * self.speaker_pose as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosegenConfig {
    pub kernel_size: usize,
    pub levels: usize,
    pub channels: usize,
    pub dilation_base: usize,
    pub activation: Activation,
    pub listener_inputs: ListenerInputs,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PosegenConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            levels: 4,
            channels: 32,
            dilation_base: 2,
            activation: Activation::Relu,
            listener_inputs: ListenerInputs::default(),
            epochs: 200,
            lr: 5e-5,
            seed: 0,
        }
    }
}

impl PosegenConfig {
    fn tcn(&self, input_dim: usize) -> TcnConfig {
        TcnConfig {
            kernel_size: self.kernel_size,
            levels: self.levels,
            channels: self.channels,
            dilation_base: self.dilation_base,
            input_dim,
            output_dim: 6,
            activation: self.activation,
        }
    }

    pub fn speaker_tcn(&self) -> TcnConfig {
        self.tcn(2)
    }

    pub fn listener_tcn(&self) -> TcnConfig {
        self.tcn(self.listener_inputs.dim())
    }

    /// Architecture fields only; training schedule may differ between runs.
    pub fn same_architecture(&self, other: &PosegenConfig) -> bool {
        self.speaker_tcn() == other.speaker_tcn() && self.listener_tcn() == other.listener_tcn()
    }

    pub fn validate(&self) -> Result<()> {
        if self.listener_inputs.dim() == 0 {
            return Err(Error::invalid("listener_inputs", "listener head needs at least one input"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        self.speaker_tcn().validate()
    }
}

/// Normalization statistics gathered from the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseStats {
    pub feature_mean: [f64; 2],
    pub feature_scale: [f64; 2],
    pub speaker_scale: [f64; 6],
    pub listener_scale: [f64; 6],
    pub speaker_anchor: [f64; 6],
    pub listener_anchor: [f64; 6],
}

impl Default for PoseStats {
    fn default() -> Self {
        Self {
            feature_mean: [0.0; 2],
            feature_scale: [1.0; 2],
            speaker_scale: [1.0; 6],
            listener_scale: [1.0; 6],
            speaker_anchor: [0.0; 6],
            listener_anchor: [0.0; 6],
        }
    }
}

/// One aligned training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequenceSample {
    pub id: String,
    pub features: Vec<[f64; 2]>,
    pub speaker: Vec<HeadPose>,
    pub listener: Vec<HeadPose>,
}

impl PoseSequenceSample {
    pub fn validate(&self) -> Result<()> {
        let t = self.features.len();
        if t == 0 {
            return Err(Error::invalid(format!("sequence.{}", self.id), "empty sequence"));
        }
        if self.speaker.len() != t || self.listener.len() != t {
            return Err(Error::dim(format!("sequence.{}.poses", self.id), t, self.speaker.len().min(self.listener.len())));
        }
        Ok(())
    }
}

/// Delta of `et` from the first pose, angles wrapped.
pub fn pose_deltas(poses: &[HeadPose]) -> Vec<[f64; 6]> {
    let base = poses[0].et();
    poses.iter().map(|p| delta_et(&p.et(), &base)).collect()
}

fn delta_et(et: &[f64; 6], base: &[f64; 6]) -> [f64; 6] {
    let mut d = [0.0; 6];
    for k in 0..6 {
        d[k] = et[k] - base[k];
        if k < 3 {
            d[k] = wrap_angle(d[k]);
        }
    }
    d
}

fn rms_scale(rows: impl Iterator<Item = [f64; 6]>) -> [f64; 6] {
    let mut acc = [0.0; 6];
    let mut n = 0usize;
    for r in rows {
        for k in 0..6 {
            acc[k] += r[k] * r[k];
        }
        n += 1;
    }
    acc.map(|s| {
        let v = (s / n.max(1) as f64).sqrt();
        if v > 1e-8 {
            v
        } else {
            1.0
        }
    })
}

impl PoseStats {
    pub fn from_dataset(data: &[PoseSequenceSample]) -> Self {
        let feats: Vec<[f64; 2]> = data.iter().flat_map(|s| s.features.iter().copied()).collect();
        let n = feats.len() as f64;
        let mut mean = [0.0; 2];
        let mut scale = [0.0; 2];
        for c in 0..2 {
            mean[c] = feats.iter().map(|f| f[c]).sum::<f64>() / n;
            let var = feats.iter().map(|f| (f[c] - mean[c]).powi(2)).sum::<f64>() / n;
            scale[c] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
        let anchor = |f: &dyn Fn(&PoseSequenceSample) -> [f64; 6]| {
            let mut a = [0.0; 6];
            for s in data {
                let e = f(s);
                for k in 0..6 {
                    a[k] += e[k] / data.len() as f64;
                }
            }
            a
        };
        Self {
            feature_mean: mean,
            feature_scale: scale,
            speaker_scale: rms_scale(data.iter().flat_map(|s| pose_deltas(&s.speaker))),
            listener_scale: rms_scale(data.iter().flat_map(|s| pose_deltas(&s.listener))),
            speaker_anchor: anchor(&|s| s.speaker[0].et()),
            listener_anchor: anchor(&|s| s.listener[0].et()),
        }
    }

    fn features(&self, f: &[[f64; 2]]) -> Vec<f64> {
        f.iter()
            .flat_map(|r| [(r[0] - self.feature_mean[0]) / self.feature_scale[0], (r[1] - self.feature_mean[1]) / self.feature_scale[1]])
            .collect()
    }

    fn scaled(deltas: &[[f64; 6]], scale: &[f64; 6]) -> Vec<f64> {
        deltas.iter().flat_map(|d| (0..6).map(move |k| d[k] / scale[k])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosegenModel {
    pub config: PosegenConfig,
    pub stats: PoseStats,
    pub store: ParamStore,
    pub speaker_head: Tcn,
    pub listener_head: Tcn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PosegenHeader {
    kind: String,
    config: PosegenConfig,
    stats: PoseStats,
}

pub const POSEGEN_KIND: &str = "posegen";

impl PosegenModel {
    pub fn new(config: PosegenConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let speaker_head = Tcn::new(&mut store, "speaker", config.speaker_tcn(), &mut rng)?;
        let listener_head = Tcn::new(&mut store, "listener", config.listener_tcn(), &mut rng)?;
        Ok(Self {
            config,
            stats: PoseStats::default(),
            store,
            speaker_head,
            listener_head,
        })
    }

    fn listener_input(&self, feats: &[f64], speaker_scaled: &[f64]) -> Vec<f64> {
        let li = self.config.listener_inputs;
        let t_len = feats.len() / 2;
        let mut x = Vec::with_capacity(t_len * li.dim());
        for t in 0..t_len {
            if li.audio {
                x.extend_from_slice(&feats[2 * t..2 * t + 2]);
            }
            if li.speaker_pose {
                x.extend_from_slice(&speaker_scaled[6 * t..6 * t + 6]);
            }
        }
        x
    }

    /// Teacher-forced loss of one sequence (speaker + listener, equal
    /// weights), accumulating gradients.
    pub fn sequence_loss(&self, s: &PoseSequenceSample, grads: &mut Grads) -> Result<f64> {
        s.validate()?;
        let feats = self.stats.features(&s.features);
        let sp = PoseStats::scaled(&pose_deltas(&s.speaker), &self.stats.speaker_scale);
        let li = PoseStats::scaled(&pose_deltas(&s.listener), &self.stats.listener_scale);
        let ls = self.speaker_head.mse_and_grads(&self.store, grads, &feats, &sp, 1.0)?;
        let xl = self.listener_input(&feats, &sp);
        let ll = self.listener_head.mse_and_grads(&self.store, grads, &xl, &li, 1.0)?;
        Ok(ls + ll)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(&PosegenHeader {
            kind: POSEGEN_KIND.into(),
            config: self.config,
            stats: self.stats,
        })?;
        self.store.write_into(&mut a, "param.")?;
        a.save(path)
    }

    /// Rejects files whose architecture differs from `expected` when given.
    pub fn load(path: &Path, expected: Option<&PosegenConfig>) -> Result<Self> {
        let a = Archive::load(path)?;
        if a.header_kind() != Some(POSEGEN_KIND) {
            return Err(Error::format("checkpoint.kind", format!("expected `{POSEGEN_KIND}`")));
        }
        let h: PosegenHeader = a.header_as()?;
        if let Some(exp) = expected {
            if !exp.same_architecture(&h.config) {
                return Err(Error::invalid(
                    "checkpoint.config",
                    format!("architecture {:?} does not match expected {:?}", h.config, exp),
                ));
            }
        }
        let mut m = Self::new(h.config)?;
        m.stats = h.stats;
        m.store.read_from(&a, "param.")?;
        for (name, t) in m.store.tensors_mut() {
            ensure_finite(name, &t.data)?;
        }
        Ok(m)
    }
}

fn to_poses(scaled: &[f64], scale: &[f64; 6], anchor: &[f64; 6]) -> Vec<HeadPose> {
    scaled
        .chunks_exact(6)
        .map(|d| {
            let et: Vec<f64> = (0..6).map(|k| anchor[k] + d[k] * scale[k]).collect();
            HeadPose::from_et(&et)
        })
        .collect()
}

/// Predicts speaker and listener trajectories.
///
/// Without `speaker_poses` the speaker head's own output feeds the listener
/// head; with them the listener head is teacher-forced. Trajectories start
/// at `anchors` (speaker, listener) or the training-set mean first poses.
pub fn predict_poses(
    model: &PosegenModel,
    zcr_rms: &[[f64; 2]],
    speaker_poses: Option<&[HeadPose]>,
    anchors: Option<(HeadPose, HeadPose)>,
) -> Result<(Vec<HeadPose>, Vec<HeadPose>)> {
    if zcr_rms.is_empty() {
        return Err(Error::invalid("features", "need at least one frame"));
    }
    let st = &model.stats;
    let feats = st.features(zcr_rms);
    let (mut sp_anchor, li_anchor) = match anchors {
        Some((s, l)) => (s.et(), l.et()),
        None => (st.speaker_anchor, st.listener_anchor),
    };
    let sp_scaled = match speaker_poses {
        Some(p) => {
            if p.len() != zcr_rms.len() {
                return Err(Error::dim("speaker_poses", zcr_rms.len(), p.len()));
            }
            sp_anchor = p[0].et();
            PoseStats::scaled(&pose_deltas(p), &st.speaker_scale)
        }
        None => model.speaker_head.forward(&model.store, &feats)?,
    };
    let speaker = match speaker_poses {
        Some(p) => p.to_vec(),
        None => to_poses(&sp_scaled, &st.speaker_scale, &sp_anchor),
    };
    let xl = model.listener_input(&feats, &sp_scaled);
    let li = model.listener_head.forward(&model.store, &xl)?;
    Ok((speaker, to_poses(&li, &st.listener_scale, &li_anchor)))
}

/// Per-epoch mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PosegenTraining {
    pub model: PosegenModel,
    pub epoch_loss: Vec<f64>,
}

/// Trains both heads with Adam, one sequence per step, visiting sequences
/// in a seeded shuffled order each epoch.
pub fn train_posegen(config: PosegenConfig, data: &[PoseSequenceSample]) -> Result<PosegenTraining> {
    if data.is_empty() {
        return Err(Error::invalid("dataset", "no sequences"));
    }
    for s in data {
        s.validate()?;
        for (t, f) in s.features.iter().enumerate() {
            ensure_finite(&format!("sequence.{}.features[{t}]", s.id), f)?;
        }
    }
    let mut model = PosegenModel::new(config)?;
    let rf = config.speaker_tcn().receptive_field();
    if data.iter().any(|s| s.features.len() < rf) {
        log::warn!("some sequences are shorter than the receptive field ({rf} frames)");
    }
    model.stats = PoseStats::from_dataset(data);
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(&model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let mut grads = model.store.zero_grads();
            let loss = model.sequence_loss(&data[i], &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    field: format!("sequence.{}", data[i].id),
                    message: format!("non-finite loss at step {step} (epoch {epoch})"),
                });
            }
            adam_step(&mut model.store, &grads, &mut opt, &adam)?;
            total += loss;
            step += 1;
        }
        epoch_loss.push(total / data.len() as f64);
    }
    Ok(PosegenTraining { model, epoch_loss })
}

/// Mean squared error in raw pose units over all frames and components.
pub fn pose_mse(a: &[HeadPose], b: &[HeadPose]) -> f64 {
    let mut s = 0.0;
    for (p, q) in a.iter().zip(b) {
        let d = delta_et(&p.et(), &q.et());
        s += d.iter().map(|v| v * v).sum::<f64>();
    }
    s / (6 * a.len()) as f64
}

/// One sequence per role segment of a clip: the segment's speaker and the
/// first other individual as listener, with (zcr, rms) from the clip audio.
pub fn manifest_sequences(m: &ClipManifest) -> Result<Vec<PoseSequenceSample>> {
    if m.individuals.len() < 2 {
        return Err(Error::invalid("individuals", "need a speaker and a listener"));
    }
    let track = AudioTrack::read_wav(&m.resolve(&m.audio.path))?;
    let feats = features_per_frame(&track, &FrameWindowing::new(m.fps), m.num_frames)?;
    let mut out = Vec::new();
    for (k, seg) in m.role_segments.iter().enumerate() {
        let listener = m
            .individuals
            .iter()
            .find(|i| i.id != seg.speaker_id)
            .map(|i| i.id.clone())
            .ok_or_else(|| Error::invalid("role_segments", "no listener"))?;
        let frames: Vec<usize> = (0..m.num_frames)
            .filter(|&f| {
                let t = m.frame_time(f);
                seg.start_s <= t && t < seg.end_s
            })
            .collect();
        if frames.is_empty() {
            continue;
        }
        let sp = m.load_poses(&seg.speaker_id)?;
        let li = m.load_poses(&listener)?;
        out.push(PoseSequenceSample {
            id: format!("segment{k:03}"),
            features: frames.iter().map(|&f| feats[f]).collect(),
            speaker: frames.iter().map(|&f| sp[f]).collect(),
            listener: frames.iter().map(|&f| li[f]).collect(),
        });
    }
    if out.is_empty() {
        return Err(Error::invalid("role_segments", "no segment covers a frame"));
    }
    Ok(out)
}
