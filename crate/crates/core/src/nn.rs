//! Minimal layer library with hand-written reverse mode.
//!
//! Parameters live in a flat, named [`ParamStore`]; layers only hold
//! [`ParamId`]s into it. Forward passes return caches that the matching
//! backward pass consumes, accumulating into a [`Grads`] mirror of the store.

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::blob::{Archive, TensorBlob};
use crate::error::{Error, Result};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.names.push(name.into());
        self.tensors.push(Tensor { shape, data });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.tensors[id].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel());
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Appends every tensor as an f64 blob under `prefix + name`.
    pub fn write_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            archive.push(format!("{prefix}{name}"), TensorBlob::f64(t.shape.clone(), t.data.clone())?);
        }
        Ok(())
    }

    /// Overwrites every tensor from the archive, checking names and shapes.
    pub fn read_from(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let blob = archive.get(&key)?;
            if blob.dims != t.shape {
                return Err(Error::format(
                    key,
                    format!("shape {:?} does not match expected {:?}", blob.dims, t.shape),
                ));
            }
            t.data = blob.to_f64();
        }
        Ok(())
    }
}

/// Gradient accumulators with the same layout as a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.0[id]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through pre-activation `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer `y = x W^T + b`, weight shape `[out, in]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers a layer with PyTorch-style `U(-1/sqrt(in), 1/sqrt(in))` init.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let b: Vec<f64> = (0..fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            weight: store.add(format!("{name}.weight"), vec![fan_out, fan_in], w),
            bias: store.add(format!("{name}.bias"), vec![fan_out], b),
            fan_in,
            fan_out,
        }
    }

    pub fn weight<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.fan_out, self.fan_in), store.data(self.weight)).unwrap()
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.fan_in);
        let bias = store.data(self.bias);
        let mut y = Array2::<f64>::zeros((x.nrows(), self.fan_out));
        for mut row in y.rows_mut() {
            row.as_slice_mut().unwrap().copy_from_slice(bias);
        }
        general_mat_mul(1.0, &x, &self.weight(store).t(), 1.0, &mut y);
        y
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        self.accumulate(grads, x, dy);
        dy.dot(&self.weight(store))
    }

    /// Parameter gradients only, for first layers whose input needs no gradient.
    pub fn accumulate(&self, grads: &mut Grads, x: ArrayView2<f64>, dy: ArrayView2<f64>) {
        {
            let gw = grads.get_mut(self.weight);
            let mut gw = ArrayViewMut2::from_shape((self.fan_out, self.fan_in), gw).unwrap();
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut gw);
        }
        let gb = grads.get_mut(self.bias);
        for (g, s) in gb.iter_mut().zip(dy.sum_axis(Axis(0))) {
            *g += s;
        }
    }
}

pub fn apply_activation(act: Activation, x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| act.apply(v))
}

/// `dL/dx` from `dL/dy`, pre-activation `x` and output `y`.
pub fn activation_backward(act: Activation, x: &Array2<f64>, y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(x)
        .and(y)
        .for_each(|d, &xv, &yv| *d *= act.derivative(xv, yv));
    dx
}

/// Plain MLP: hidden layers with `hidden` activation, last layer with `output`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, hidden, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    fn act(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.act(i);
            h = layer.forward(store, h.view());
            h.mapv_inplace(|v| act.apply(v));
        }
        h
    }

    pub fn forward_cached(&self, store: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(store, h.view());
            let post = apply_activation(self.act(i), &pre);
            cache.inputs.push(h);
            cache.pre.push(pre);
            h = post.clone();
            cache.post.push(post);
        }
        (h, cache)
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &MlpCache, dy: Array2<f64>) -> Array2<f64> {
        let mut d = dy;
        for i in (0..self.layers.len()).rev() {
            let dpre = activation_backward(self.act(i), &cache.pre[i], &cache.post[i], &d);
            d = self.layers[i].backward(store, grads, cache.inputs[i].view(), dpre.view());
        }
        d
    }
}

pub fn gaussian_vec(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}
