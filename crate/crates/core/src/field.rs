//! Conditional dynamic radiance field.
//!
//! One shared set of network weights hosts every avatar. Each identity owns a
//! shape code `z_s` and an appearance code `z_a` per part (head, torso):
//!
//! * head: density branch sees `gamma(x) ++ z_s ++ P_role(f)`, color branch
//!   sees the trunk features `++ gamma(d) ++ z_a`. `P_role` is a learned linear
//!   map from the speaker audio feature (or the listener expression feature) to
//!   a shared condition width.
//! * torso: a residual deformation MLP warps the encoded position,
//!   `x' = gamma(x) + delta(gamma(x) ++ gamma(et))`, then density sees
//!   `x' ++ gamma(et) ++ z_s` and color sees trunk features `++ z_a`.
//!
//! Density uses softplus, color uses sigmoid. `z_a` never reaches the density
//! branch, which the tests check bit-for-bit.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureRole, EXPRESSION_FEATURE_DIM, SPEAKER_FEATURE_DIM};
use crate::data::blob::Archive;
use crate::encoding::{encode_into, EncodingConfig};
use crate::error::{ensure_finite, Error, Result};
use crate::render::{RadianceField, RayQuery};
use crate::nn::{
    activation_backward, apply_activation, gaussian_vec, sigmoid, softplus, Activation, Grads, Linear, Mlp, MlpCache,
    ParamId, ParamStore,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationConfig {
    pub enabled: bool,
    pub depth: usize,
    pub width: usize,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            depth: 4,
            width: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub position_encoding: EncodingConfig,
    pub direction_encoding: EncodingConfig,
    pub pose_encoding: EncodingConfig,
    pub depth: usize,
    pub width: usize,
    /// Trunk layer that re-receives the trunk input.
    pub skip_layer: Option<usize>,
    pub color_width: usize,
    pub latent_dim: usize,
    pub condition_width: usize,
    pub speaker_feature_dim: usize,
    pub expression_feature_dim: usize,
    pub deformation: DeformationConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            position_encoding: EncodingConfig::positions(),
            direction_encoding: EncodingConfig::directions(),
            pose_encoding: EncodingConfig::new(4),
            depth: 8,
            width: 256,
            skip_layer: Some(4),
            color_width: 128,
            latent_dim: 64,
            condition_width: 64,
            speaker_feature_dim: SPEAKER_FEATURE_DIM,
            expression_feature_dim: EXPRESSION_FEATURE_DIM,
            deformation: DeformationConfig::default(),
        }
    }
}

impl FieldConfig {
    pub fn pos_dim(&self) -> usize {
        self.position_encoding.output_dim(3)
    }

    pub fn dir_dim(&self) -> usize {
        self.direction_encoding.output_dim(3)
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_encoding.output_dim(6)
    }

    pub fn feature_dim(&self, role: FeatureRole) -> usize {
        match role {
            FeatureRole::SpeakerAudio => self.speaker_feature_dim,
            FeatureRole::ListenerExpression => self.expression_feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.position_encoding.validate()?;
        self.direction_encoding.validate()?;
        self.pose_encoding.validate()?;
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("color_width", self.color_width),
            ("latent_dim", self.latent_dim),
            ("condition_width", self.condition_width),
            ("speaker_feature_dim", self.speaker_feature_dim),
            ("expression_feature_dim", self.expression_feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if let Some(k) = self.skip_layer {
            if k == 0 || k >= self.depth {
                return Err(Error::invalid("skip_layer", format!("must lie in 1..{}", self.depth)));
            }
        }
        if self.deformation.enabled && (self.deformation.depth == 0 || self.deformation.width == 0) {
            return Err(Error::invalid("deformation", "depth and width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Head,
    Torso,
}

/// Handles to one identity's trainable codes for one part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentPair {
    pub z_s: ParamId,
    pub z_a: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEntry {
    pub id: String,
    pub head: LatentPair,
    pub torso: LatentPair,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdentityRegistry {
    pub entries: Vec<IdentityEntry>,
}

impl IdentityRegistry {
    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::UnknownIdentity {
                field: "identity".into(),
                id: id.to_string(),
            })
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn pair(&self, index: usize, part: Part) -> LatentPair {
        let e = &self.entries[index];
        match part {
            Part::Head => e.head,
            Part::Torso => e.torso,
        }
    }
}

pub fn lookup_identity(registry: &IdentityRegistry, identity_id: &str, part: Part) -> Result<LatentPair> {
    let i = registry.index_of(identity_id)?;
    Ok(registry.pair(i, part))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub sigma: f64,
}

/// One frame's condition vector tagged with its role.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition<'a> {
    pub role: FeatureRole,
    pub features: &'a [f64],
}

/// A run of consecutive rows sharing codes, condition and the per-ray
/// auxiliary encoding (`gamma(d)` for heads, `gamma(et)` for torsos).
#[derive(Debug, Clone)]
pub struct Segment<'a> {
    pub len: usize,
    pub codes: LatentPair,
    pub cond: Option<Condition<'a>>,
    pub aux: &'a [f64],
}

/// Trunk + density branch + color branch.
#[derive(Debug, Clone, PartialEq)]
struct ConditionalMlp {
    trunk: Vec<Linear>,
    skip: Option<usize>,
    density: Linear,
    color_hidden: Linear,
    color_out: Linear,
}

struct CondMlpCache {
    trunk_in: Array2<f64>,
    layer_in: Vec<Array2<f64>>,
    layer_out: Vec<Array2<f64>>,
    density_pre: Array2<f64>,
    color_in: Array2<f64>,
    color_pre: Array2<f64>,
    color_post: Array2<f64>,
    rgb: Array2<f64>,
}

impl ConditionalMlp {
    fn new(store: &mut ParamStore, name: &str, cfg: &FieldConfig, in_dim: usize, extra_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        let trunk = (0..cfg.depth)
            .map(|i| {
                let fan_in = match i {
                    0 => in_dim,
                    _ if Some(i) == cfg.skip_layer => w + in_dim,
                    _ => w,
                };
                Linear::new(store, &format!("{name}.trunk.{i}"), fan_in, w, rng)
            })
            .collect();
        Self {
            trunk,
            skip: cfg.skip_layer,
            density: Linear::new(store, &format!("{name}.density"), w, 1, rng),
            color_hidden: Linear::new(store, &format!("{name}.color.0"), w + extra_dim, cfg.color_width, rng),
            color_out: Linear::new(store, &format!("{name}.color.1"), cfg.color_width, 3, rng),
        }
    }

    fn width(&self) -> usize {
        self.density.fan_in
    }

    fn forward(&self, store: &ParamStore, trunk_in: Array2<f64>, extra: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, CondMlpCache) {
        let mut layer_in = Vec::with_capacity(self.trunk.len());
        let mut layer_out = Vec::with_capacity(self.trunk.len());
        let mut h = trunk_in.clone();
        for (i, layer) in self.trunk.iter().enumerate() {
            let input = if Some(i) == self.skip {
                ndarray::concatenate(Axis(1), &[h.view(), trunk_in.view()]).unwrap()
            } else {
                h
            };
            let mut out = layer.forward(store, input.view());
            out.mapv_inplace(|v| v.max(0.0));
            layer_in.push(input);
            h = out.clone();
            layer_out.push(out);
        }
        let density_pre = self.density.forward(store, h.view());
        let sigma = density_pre.mapv(softplus);
        let color_in = ndarray::concatenate(Axis(1), &[h.view(), extra]).unwrap();
        let color_pre = self.color_hidden.forward(store, color_in.view());
        let color_post = apply_activation(Activation::Relu, &color_pre);
        let rgb = self.color_out.forward(store, color_post.view()).mapv(sigmoid);
        let cache = CondMlpCache {
            trunk_in,
            layer_in,
            layer_out,
            density_pre,
            color_in,
            color_pre,
            color_post,
            rgb: rgb.clone(),
        };
        (sigma, rgb, cache)
    }

    /// Returns `(dL/d trunk_in, dL/d extra)`.
    fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &CondMlpCache,
        dsigma: ArrayView2<f64>,
        drgb: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let w = self.width();
        let mut drgb_pre = drgb.to_owned();
        ndarray::Zip::from(&mut drgb_pre)
            .and(&cache.rgb)
            .for_each(|d, &y| *d *= y * (1.0 - y));
        let dcolor_post = self
            .color_out
            .backward(store, grads, cache.color_post.view(), drgb_pre.view());
        let dcolor_pre = activation_backward(Activation::Relu, &cache.color_pre, &cache.color_post, &dcolor_post);
        let dcolor_in = self
            .color_hidden
            .backward(store, grads, cache.color_in.view(), dcolor_pre.view());
        let mut dh = dcolor_in.slice(s![.., ..w]).to_owned();
        let dextra = dcolor_in.slice(s![.., w..]).to_owned();

        let mut ddens = dsigma.to_owned();
        ndarray::Zip::from(&mut ddens)
            .and(&cache.density_pre)
            .for_each(|d, &x| *d *= sigmoid(x));
        let h_last = cache.layer_out.last().unwrap();
        dh += &self.density.backward(store, grads, h_last.view(), ddens.view());

        let mut dtrunk_in = Array2::<f64>::zeros(cache.trunk_in.raw_dim());
        for i in (0..self.trunk.len()).rev() {
            ndarray::Zip::from(&mut dh)
                .and(&cache.layer_out[i])
                .for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
            let dinput = self.trunk[i].backward(store, grads, cache.layer_in[i].view(), dh.view());
            if i == 0 {
                dtrunk_in += &dinput;
            } else if Some(i) == self.skip {
                dtrunk_in += &dinput.slice(s![.., w..]);
                dh = dinput.slice(s![.., ..w]).to_owned();
            } else {
                dh = dinput;
            }
        }
        (dtrunk_in, dextra)
    }
}

/// All trainable state of the field: shared weights plus identity codes.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub store: ParamStore,
    pub registry: IdentityRegistry,
    head: ConditionalMlp,
    torso: ConditionalMlp,
    deform: Option<Mlp>,
    proj_speaker: Linear,
    proj_listener: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub config: FieldConfig,
    pub identities: Vec<String>,
}

pub struct FieldOutput {
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
}

pub struct HeadCache {
    net: CondMlpCache,
    seg_codes: Vec<LatentPair>,
    seg_lens: Vec<usize>,
    /// (segment index, features) per role, in segment order.
    role_rows: [Vec<(usize, Vec<f64>)>; 2],
}

pub struct TorsoCache {
    net: CondMlpCache,
    deform: Option<MlpCache>,
    /// Deformation offsets, `n x pos_dim`; zero when the warp is disabled.
    pub delta: Array2<f64>,
    seg_codes: Vec<LatentPair>,
    seg_lens: Vec<usize>,
}

fn role_slot(role: FeatureRole) -> usize {
    match role {
        FeatureRole::SpeakerAudio => 0,
        FeatureRole::ListenerExpression => 1,
    }
}

fn split_output(sigma: &Array2<f64>, rgb: &Array2<f64>) -> FieldOutput {
    FieldOutput {
        sigma: sigma.column(0).to_vec(),
        rgb: rgb.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
    }
}

impl FieldParams {
    pub fn new(config: FieldConfig, identities: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (px, pd, pe, dz, c) = (
            config.pos_dim(),
            config.dir_dim(),
            config.pose_dim(),
            config.latent_dim,
            config.condition_width,
        );
        let head = ConditionalMlp::new(&mut store, "head", &config, px + dz + c, pd + dz, &mut rng);
        let torso = ConditionalMlp::new(&mut store, "torso", &config, px + pe + dz, dz, &mut rng);
        let deform = config.deformation.enabled.then(|| {
            let mut dims = vec![px + pe];
            dims.extend(std::iter::repeat_n(config.deformation.width, config.deformation.depth - 1));
            dims.push(px);
            Mlp::new(&mut store, "deform", &dims, Activation::Relu, Activation::Identity, &mut rng)
        });
        let proj_speaker = Linear::new(&mut store, "proj.speaker", config.speaker_feature_dim, c, &mut rng);
        let proj_listener = Linear::new(&mut store, "proj.listener", config.expression_feature_dim, c, &mut rng);
        let mut field = Self {
            config,
            store,
            registry: IdentityRegistry::default(),
            head,
            torso,
            deform,
            proj_speaker,
            proj_listener,
        };
        for id in identities {
            field.register_identity(id, &mut rng)?;
        }
        Ok(field)
    }

    /// Adds head and torso code pairs, each drawn from N(0, 0.01^2).
    pub fn register_identity(&mut self, id: &str, rng: &mut ChaCha8Rng) -> Result<()> {
        if id.is_empty() {
            return Err(Error::invalid("identity", "empty id"));
        }
        if self.registry.entries.iter().any(|e| e.id == id) {
            return Err(Error::invalid("identity", format!("duplicate id `{id}`")));
        }
        let dz = self.config.latent_dim;
        let mut pair = |part: &str, store: &mut ParamStore| LatentPair {
            z_s: store.add(format!("codes.{id}.{part}.z_s"), vec![dz], gaussian_vec(dz, 0.01, rng)),
            z_a: store.add(format!("codes.{id}.{part}.z_a"), vec![dz], gaussian_vec(dz, 0.01, rng)),
        };
        let head = pair("head", &mut self.store);
        let torso = pair("torso", &mut self.store);
        self.registry.entries.push(IdentityEntry {
            id: id.to_string(),
            head,
            torso,
        });
        Ok(())
    }

    pub fn header(&self) -> FieldHeader {
        FieldHeader {
            config: self.config.clone(),
            identities: self.registry.ids(),
        }
    }

    pub fn write_params(&self, archive: &mut Archive) -> Result<()> {
        self.store.write_into(archive, "param.")
    }

    /// Rebuilds the architecture from the header and loads every tensor,
    /// rejecting missing tensors or shape mismatches.
    pub fn from_archive(header: &FieldHeader, archive: &Archive) -> Result<Self> {
        let mut field = Self::new(header.config.clone(), &header.identities, 0)?;
        field.store.read_from(archive, "param.")?;
        for (name, t) in field.store.tensors_mut() {
            ensure_finite(name, &t.data)?;
        }
        Ok(field)
    }

    pub fn deformation_enabled(&self) -> bool {
        self.deform.is_some()
    }

    /// Parameter ids of the deformation network.
    pub fn deformation_params(&self) -> Vec<ParamId> {
        self.deform
            .iter()
            .flat_map(|m| m.layers.iter().flat_map(|l| [l.weight, l.bias]))
            .collect()
    }

    fn proj(&self, role: FeatureRole) -> &Linear {
        match role {
            FeatureRole::SpeakerAudio => &self.proj_speaker,
            FeatureRole::ListenerExpression => &self.proj_listener,
        }
    }

    fn check_segments(&self, n: usize, segs: &[Segment], aux_dim: usize, aux_name: &str, need_cond: bool) -> Result<()> {
        let total: usize = segs.iter().map(|s| s.len).sum();
        if total != n {
            return Err(Error::dim("segments.len", n, total));
        }
        for seg in segs {
            if seg.aux.len() != aux_dim {
                return Err(Error::dim(aux_name, aux_dim, seg.aux.len()));
            }
            for id in [seg.codes.z_s, seg.codes.z_a] {
                if id >= self.store.len() || self.store.data(id).len() != self.config.latent_dim {
                    return Err(Error::invalid("codes", "latent handle does not belong to this field"));
                }
            }
            match (need_cond, &seg.cond) {
                (true, Some(cond)) => {
                    let want = self.config.feature_dim(cond.role);
                    if cond.features.len() != want {
                        let name = match cond.role {
                            FeatureRole::SpeakerAudio => "f_cond.speaker_audio",
                            FeatureRole::ListenerExpression => "f_cond.listener_expression",
                        };
                        return Err(Error::dim(name, want, cond.features.len()));
                    }
                }
                (true, None) => return Err(Error::invalid("f_cond", "head query needs a condition")),
                _ => {}
            }
        }
        Ok(())
    }

    /// Batched head query over encoded positions `n x pos_dim`.
    pub fn head_forward(&self, pos_enc: ArrayView2<f64>, segs: &[Segment]) -> Result<(FieldOutput, HeadCache)> {
        let cfg = &self.config;
        let (px, pd, dz, c) = (cfg.pos_dim(), cfg.dir_dim(), cfg.latent_dim, cfg.condition_width);
        if pos_enc.ncols() != px {
            return Err(Error::dim("gamma_x", px, pos_enc.ncols()));
        }
        let n = pos_enc.nrows();
        self.check_segments(n, segs, pd, "gamma_d", true)?;

        let mut role_rows: [Vec<(usize, Vec<f64>)>; 2] = [Vec::new(), Vec::new()];
        for (k, seg) in segs.iter().enumerate() {
            let cond = seg.cond.unwrap();
            role_rows[role_slot(cond.role)].push((k, cond.features.to_vec()));
        }
        let mut seg_proj = vec![Vec::new(); segs.len()];
        for (slot, role) in [FeatureRole::SpeakerAudio, FeatureRole::ListenerExpression].into_iter().enumerate() {
            let rows = &role_rows[slot];
            if rows.is_empty() {
                continue;
            }
            let fdim = cfg.feature_dim(role);
            let feats = Array2::from_shape_fn((rows.len(), fdim), |(r, j)| rows[r].1[j]);
            let projected = self.proj(role).forward(&self.store, feats.view());
            for (r, (k, _)) in rows.iter().enumerate() {
                seg_proj[*k] = projected.row(r).to_vec();
            }
        }

        let mut trunk_in = Array2::<f64>::zeros((n, px + dz + c));
        let mut extra = Array2::<f64>::zeros((n, pd + dz));
        trunk_in.slice_mut(s![.., ..px]).assign(&pos_enc);
        let mut row = 0;
        for (k, seg) in segs.iter().enumerate() {
            let zs = self.store.data(seg.codes.z_s);
            let za = self.store.data(seg.codes.z_a);
            for r in row..row + seg.len {
                let mut t = trunk_in.row_mut(r);
                let t = t.as_slice_mut().unwrap();
                t[px..px + dz].copy_from_slice(zs);
                t[px + dz..].copy_from_slice(&seg_proj[k]);
                let mut e = extra.row_mut(r);
                let e = e.as_slice_mut().unwrap();
                e[..pd].copy_from_slice(seg.aux);
                e[pd..].copy_from_slice(za);
            }
            row += seg.len;
        }
        let (sigma, rgb, net) = self.head.forward(&self.store, trunk_in, extra.view());
        Ok((
            split_output(&sigma, &rgb),
            HeadCache {
                net,
                seg_codes: segs.iter().map(|s| s.codes).collect(),
                seg_lens: segs.iter().map(|s| s.len).collect(),
                role_rows,
            },
        ))
    }

    pub fn head_backward(&self, cache: &HeadCache, dsigma: &[f64], drgb: &[[f64; 3]], grads: &mut Grads) {
        let cfg = &self.config;
        let (px, pd, dz) = (cfg.pos_dim(), cfg.dir_dim(), cfg.latent_dim);
        let n = dsigma.len();
        let ds = ArrayView2::from_shape((n, 1), dsigma).unwrap();
        let dc = ArrayView2::from_shape((n, 3), drgb.as_flattened()).unwrap();
        let (dtrunk, dextra) = self.head.backward(&self.store, grads, &cache.net, ds, dc);

        let mut seg_dproj = Vec::with_capacity(cache.seg_lens.len());
        let mut row = 0;
        for (k, &len) in cache.seg_lens.iter().enumerate() {
            let rows = s![row..row + len, ..];
            let dt = dtrunk.slice(rows).sum_axis(Axis(0));
            let de = dextra.slice(rows).sum_axis(Axis(0));
            let codes = cache.seg_codes[k];
            add_into(grads.get_mut(codes.z_s), dt.slice(s![px..px + dz]));
            add_into(grads.get_mut(codes.z_a), de.slice(s![pd..]));
            seg_dproj.push(dt.slice(s![px + dz..]).to_owned());
            row += len;
        }
        for (slot, role) in [FeatureRole::SpeakerAudio, FeatureRole::ListenerExpression].into_iter().enumerate() {
            let rows = &cache.role_rows[slot];
            if rows.is_empty() {
                continue;
            }
            let fdim = cfg.feature_dim(role);
            let feats = Array2::from_shape_fn((rows.len(), fdim), |(r, j)| rows[r].1[j]);
            let dproj = Array2::from_shape_fn((rows.len(), cfg.condition_width), |(r, j)| seg_dproj[rows[r].0][j]);
            self.proj(role).accumulate(grads, feats.view(), dproj.view());
        }
    }

    /// Batched torso query; segments carry `gamma(et)` as `aux`.
    pub fn torso_forward(&self, pos_enc: ArrayView2<f64>, segs: &[Segment]) -> Result<(FieldOutput, TorsoCache)> {
        let cfg = &self.config;
        let (px, pe, dz) = (cfg.pos_dim(), cfg.pose_dim(), cfg.latent_dim);
        if pos_enc.ncols() != px {
            return Err(Error::dim("gamma_x", px, pos_enc.ncols()));
        }
        let n = pos_enc.nrows();
        self.check_segments(n, segs, pe, "gamma_et", false)?;

        let mut deform_in = Array2::<f64>::zeros((n, px + pe));
        deform_in.slice_mut(s![.., ..px]).assign(&pos_enc);
        let mut row = 0;
        for seg in segs {
            for r in row..row + seg.len {
                deform_in.row_mut(r).as_slice_mut().unwrap()[px..].copy_from_slice(seg.aux);
            }
            row += seg.len;
        }
        let (delta, deform_cache) = match &self.deform {
            Some(mlp) => {
                let (d, c) = mlp.forward_cached(&self.store, deform_in.view());
                (d, Some(c))
            }
            None => (Array2::zeros((n, px)), None),
        };

        let mut trunk_in = Array2::<f64>::zeros((n, px + pe + dz));
        let mut extra = Array2::<f64>::zeros((n, dz));
        {
            let mut warped = trunk_in.slice_mut(s![.., ..px]);
            warped.assign(&pos_enc);
            if self.deform.is_some() {
                warped += &delta;
            }
        }
        trunk_in.slice_mut(s![.., px..px + pe]).assign(&deform_in.slice(s![.., px..]));
        let mut row = 0;
        for seg in segs {
            let zs = self.store.data(seg.codes.z_s);
            let za = self.store.data(seg.codes.z_a);
            for r in row..row + seg.len {
                trunk_in.row_mut(r).as_slice_mut().unwrap()[px + pe..].copy_from_slice(zs);
                extra.row_mut(r).as_slice_mut().unwrap().copy_from_slice(za);
            }
            row += seg.len;
        }
        let (sigma, rgb, net) = self.torso.forward(&self.store, trunk_in, extra.view());
        Ok((
            split_output(&sigma, &rgb),
            TorsoCache {
                net,
                deform: deform_cache,
                delta,
                seg_codes: segs.iter().map(|s| s.codes).collect(),
                seg_lens: segs.iter().map(|s| s.len).collect(),
            },
        ))
    }

    /// `ddelta` adds an external gradient on the deformation offsets (the
    /// L2 penalty).
    pub fn torso_backward(
        &self,
        cache: &TorsoCache,
        dsigma: &[f64],
        drgb: &[[f64; 3]],
        ddelta: Option<&Array2<f64>>,
        grads: &mut Grads,
    ) {
        let cfg = &self.config;
        let (px, pe, dz) = (cfg.pos_dim(), cfg.pose_dim(), cfg.latent_dim);
        let n = dsigma.len();
        let ds = ArrayView2::from_shape((n, 1), dsigma).unwrap();
        let dc = ArrayView2::from_shape((n, 3), drgb.as_flattened()).unwrap();
        let (dtrunk, dextra) = self.torso.backward(&self.store, grads, &cache.net, ds, dc);

        if let (Some(mlp), Some(dcache)) = (&self.deform, &cache.deform) {
            let mut dd = dtrunk.slice(s![.., ..px]).to_owned();
            if let Some(extra) = ddelta {
                dd += extra;
            }
            mlp.backward(&self.store, grads, dcache, dd);
        }
        let mut row = 0;
        for (k, &len) in cache.seg_lens.iter().enumerate() {
            let rows = s![row..row + len, ..];
            let dt = dtrunk.slice(rows).sum_axis(Axis(0));
            let de = dextra.slice(rows).sum_axis(Axis(0));
            let codes = cache.seg_codes[k];
            add_into(grads.get_mut(codes.z_s), dt.slice(s![px + pe..px + pe + dz]));
            add_into(grads.get_mut(codes.z_a), de.view());
            row += len;
        }
    }

    /// Single-sample head query on pre-encoded inputs.
    pub fn query_head(&self, pos_enc: &[f64], dir_enc: &[f64], cond: Condition, codes: LatentPair) -> Result<RadianceSample> {
        ensure_finite("gamma_x", pos_enc)?;
        ensure_finite("gamma_d", dir_enc)?;
        ensure_finite("f_cond", cond.features)?;
        let x = row_view(pos_enc)?;
        let seg = Segment {
            len: 1,
            codes,
            cond: Some(cond),
            aux: dir_enc,
        };
        let (out, _) = self.head_forward(x, &[seg])?;
        Ok(RadianceSample {
            color: out.rgb[0],
            sigma: out.sigma[0],
        })
    }

    /// `x' = gamma(x) + delta(gamma(x), gamma(et))`.
    pub fn warp_torso(&self, pos_enc: &[f64], et_enc: &[f64]) -> Result<Vec<f64>> {
        let (px, pe) = (self.config.pos_dim(), self.config.pose_dim());
        if pos_enc.len() != px {
            return Err(Error::dim("gamma_x", px, pos_enc.len()));
        }
        if et_enc.len() != pe {
            return Err(Error::dim("gamma_et", pe, et_enc.len()));
        }
        let Some(mlp) = &self.deform else {
            return Ok(pos_enc.to_vec());
        };
        let input: Vec<f64> = pos_enc.iter().chain(et_enc).copied().collect();
        let delta = mlp.forward(&self.store, row_view(&input)?);
        Ok(pos_enc.iter().zip(delta.iter()).map(|(a, b)| a + b).collect())
    }

    pub fn query_torso(&self, pos_enc: &[f64], et_enc: &[f64], codes: LatentPair) -> Result<RadianceSample> {
        ensure_finite("gamma_x", pos_enc)?;
        ensure_finite("gamma_et", et_enc)?;
        let seg = Segment {
            len: 1,
            codes,
            cond: None,
            aux: et_enc,
        };
        let (out, _) = self.torso_forward(row_view(pos_enc)?, &[seg])?;
        Ok(RadianceSample {
            color: out.rgb[0],
            sigma: out.sigma[0],
        })
    }

    pub fn encode_positions(&self, points: &[[f64; 3]]) -> Array2<f64> {
        encode_rows(points.iter().map(|p| p.as_slice()), 3, &self.config.position_encoding)
    }

    pub fn encode_direction(&self, d: &[f64; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.dir_dim());
        encode_into(d, &self.config.direction_encoding, &mut out);
        out
    }

    pub fn encode_pose(&self, et: &[f64; 6]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.pose_dim());
        encode_into(et, &self.config.pose_encoding, &mut out);
        out
    }
}

impl FieldParams {
    fn check_identity(&self, rays: &[RayQuery]) -> Result<()> {
        for r in rays {
            if r.identity >= self.registry.entries.len() {
                return Err(Error::invalid("identity", format!("index {} is not registered", r.identity)));
            }
        }
        Ok(())
    }
}

impl RadianceField for FieldParams {
    fn head(&self, rays: &[RayQuery], points: &[[f64; 3]], per_ray: usize) -> Result<Vec<RadianceSample>> {
        self.check_identity(rays)?;
        let pos = self.encode_positions(points);
        let dirs: Vec<Vec<f64>> = rays.iter().map(|r| self.encode_direction(&r.direction)).collect();
        let segs: Vec<Segment> = rays
            .iter()
            .zip(&dirs)
            .map(|(r, d)| Segment {
                len: per_ray,
                codes: self.registry.pair(r.identity, Part::Head),
                cond: Some(r.cond),
                aux: d,
            })
            .collect();
        let (out, _) = self.head_forward(pos.view(), &segs)?;
        Ok(out.samples())
    }

    fn torso(&self, rays: &[RayQuery], points: &[[f64; 3]], per_ray: usize) -> Result<Vec<RadianceSample>> {
        self.check_identity(rays)?;
        let pos = self.encode_positions(points);
        let ets: Vec<Vec<f64>> = rays.iter().map(|r| self.encode_pose(&r.et)).collect();
        let segs: Vec<Segment> = rays
            .iter()
            .zip(&ets)
            .map(|(r, e)| Segment {
                len: per_ray,
                codes: self.registry.pair(r.identity, Part::Torso),
                cond: None,
                aux: e,
            })
            .collect();
        let (out, _) = self.torso_forward(pos.view(), &segs)?;
        Ok(out.samples())
    }
}

impl FieldOutput {
    pub fn samples(&self) -> Vec<RadianceSample> {
        self.sigma
            .iter()
            .zip(&self.rgb)
            .map(|(&sigma, &color)| RadianceSample { color, sigma })
            .collect()
    }
}

fn row_view(v: &[f64]) -> Result<ArrayView2<'_, f64>> {
    ArrayView2::from_shape((1, v.len()), v).map_err(|e| Error::format("input", e.to_string()))
}

fn add_into(dst: &mut [f64], src: ndarray::ArrayView1<f64>) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

pub(crate) fn encode_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, k: usize, cfg: &EncodingConfig) -> Array2<f64> {
    let m = cfg.output_dim(k);
    let mut flat = Vec::new();
    let mut n = 0;
    for r in rows {
        encode_into(r, cfg, &mut flat);
        n += 1;
    }
    Array2::from_shape_vec((n, m), flat).unwrap()
}
