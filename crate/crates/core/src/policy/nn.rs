//! Fully connected networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector so that optimizers, target-network
//! averaging, checkpoints and finite-difference checks all work on plain
//! slices. Hidden blocks are `linear → dropout → layer norm → relu`, with
//! dropout and layer norm optional.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Debug;

/// Floating-point element type usable by the networks.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Float
    + FromPrimitive
    + From<f32>
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths including input and output.
    pub sizes: Vec<usize>,
    pub layer_norm: bool,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    /// Offsets of (gamma, beta) when the layer is normalized.
    ln: Option<(usize, usize)>,
    hidden: bool,
}

impl MlpSpec {
    fn layout(&self) -> (Vec<LayerLayout>, usize) {
        assert!(self.sizes.len() >= 2, "network needs input and output widths");
        let n_layers = self.sizes.len() - 1;
        let mut off = 0;
        let mut out = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let hidden = l + 1 < n_layers;
            let w = off;
            off += fan_in * fan_out;
            let b = off;
            off += fan_out;
            let ln = if hidden && self.layer_norm {
                let g = off;
                off += 2 * fan_out;
                Some((g, g + fan_out))
            } else {
                None
            };
            out.push(LayerLayout { fan_in, fan_out, w, b, ln, hidden });
        }
        (out, off)
    }

    pub fn num_params(&self) -> usize {
        self.layout().1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub spec: MlpSpec,
    pub params: Vec<F>,
    layout: Vec<LayerLayout>,
}

/// Intermediate values of one forward pass, needed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Cache<F> {
    layers: Vec<LayerCache<F>>,
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    input: Array2<F>,
    mask: Option<Array2<F>>,
    xhat: Option<Array2<F>>,
    inv_std: Option<Array1<F>>,
    /// Value entering the relu (hidden layers only).
    pre_act: Option<Array2<F>>,
}

impl<F> Cache<F> {
    /// Sign pattern of every relu input, for detecting kinks in finite differences.
    pub fn relu_pattern(&self) -> Vec<bool>
    where
        F: Scalar,
    {
        self.layers
            .iter()
            .filter_map(|l| l.pre_act.as_ref())
            .flat_map(|a| a.iter().map(|v| *v > F::zero()).collect::<Vec<_>>())
            .collect()
    }
}

impl<F: Scalar> Mlp<F> {
    pub fn zeros(spec: MlpSpec) -> Self {
        let (layout, n) = spec.layout();
        let mut params = vec![F::zero(); n];
        for l in &layout {
            if let Some((g, _)) = l.ln {
                params[g..g + l.fan_out].iter_mut().for_each(|v| *v = F::one());
            }
        }
        Mlp { spec, params, layout }
    }

    /// Uniform `±1/sqrt(fan_in)` weights and biases; unit layer-norm gains.
    pub fn new(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut net = Self::zeros(spec);
        for l in net.layout.clone() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for v in &mut net.params[l.w..l.b + l.fan_out] {
                *v = F::from_f64_lossy(rng.random_range(-bound..bound));
            }
        }
        net
    }

    pub fn from_params(spec: MlpSpec, params: Vec<F>) -> Option<Self> {
        let (layout, n) = spec.layout();
        (params.len() == n).then_some(Mlp { spec, params, layout })
    }

    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        Mlp {
            spec: self.spec.clone(),
            params: self.params.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn weights(&self, l: &LayerLayout) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((l.fan_in, l.fan_out), &self.params[l.w..l.b]).unwrap()
    }

    fn bias(&self, l: &LayerLayout) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.params[l.b..l.b + l.fan_out])
    }

    fn ln_params(&self, l: &LayerLayout) -> Option<(ArrayView1<'_, F>, ArrayView1<'_, F>)> {
        l.ln.map(|(g, b)| {
            (ArrayView1::from(&self.params[g..g + l.fan_out]), ArrayView1::from(&self.params[b..b + l.fan_out]))
        })
    }

    /// Inference pass without dropout.
    pub fn predict(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        self.forward(x, None).0
    }

    /// Forward pass; dropout is active only when `dropout_rng` is given.
    pub fn forward(&self, x: ArrayView2<'_, F>, mut dropout_rng: Option<&mut ChaCha8Rng>) -> (Array2<F>, Cache<F>) {
        assert_eq!(x.ncols(), self.spec.input_dim(), "input width");
        let mut cur = x.to_owned();
        let mut caches = Vec::with_capacity(self.layout.len());
        let p = self.spec.dropout;
        for l in &self.layout {
            let mut z = cur.dot(&self.weights(l));
            z += &self.bias(l);
            if !l.hidden {
                caches.push(LayerCache { input: cur, mask: None, xhat: None, inv_std: None, pre_act: None });
                cur = z;
                break;
            }
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let keep = F::from_f64_lossy(1.0 / (1.0 - p));
                    let m = Array2::from_shape_fn(z.raw_dim(), |_| {
                        if rng.random::<f64>() < p {
                            F::zero()
                        } else {
                            keep
                        }
                    });
                    z *= &m;
                    Some(m)
                }
                _ => None,
            };
            let (y, xhat, inv_std) = match self.ln_params(l) {
                Some((gamma, beta)) => {
                    let n = F::from_usize(l.fan_out).unwrap();
                    let mean = z.sum_axis(Axis(1)) / n;
                    let centered = &z - &mean.view().insert_axis(Axis(1));
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
                    let eps = F::from_f64_lossy(LN_EPS);
                    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
                    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
                    let y = &xhat * &gamma + &beta;
                    (y, Some(xhat), Some(inv_std))
                }
                None => (z, None, None),
            };
            let h = y.mapv(|v| v.max(F::zero()));
            caches.push(LayerCache { input: cur, mask, xhat, inv_std, pre_act: Some(y) });
            cur = h;
        }
        (cur, Cache { layers: caches })
    }

    /// Backpropagates `dout` (gradient of the loss w.r.t. the output).
    ///
    /// Parameter gradients are added into `grad` when given; the gradient
    /// w.r.t. the input is returned when `want_input_grad` is set.
    pub fn backward(
        &self,
        cache: &Cache<F>,
        dout: ArrayView2<'_, F>,
        mut grad: Option<&mut [F]>,
        want_input_grad: bool,
    ) -> Option<Array2<F>> {
        let mut d = dout.to_owned();
        for (li, (l, c)) in self.layout.iter().zip(&cache.layers).enumerate().rev() {
            let mut dz = if l.hidden {
                let y = c.pre_act.as_ref().unwrap();
                let mut dy = d;
                dy.zip_mut_with(y, |g, &v| {
                    if v <= F::zero() {
                        *g = F::zero()
                    }
                });
                match (self.ln_params(l), &c.xhat, &c.inv_std) {
                    (Some((gamma, _)), Some(xhat), Some(inv_std)) => {
                        if let Some(g) = grad.as_deref_mut() {
                            let (gg, gb) = l.ln.unwrap();
                            let mut dgamma = ArrayViewMut1::from(&mut g[gg..gg + l.fan_out]);
                            dgamma += &(&dy * xhat).sum_axis(Axis(0));
                            let mut dbeta = ArrayViewMut1::from(&mut g[gb..gb + l.fan_out]);
                            dbeta += &dy.sum_axis(Axis(0));
                        }
                        let n = F::from_usize(l.fan_out).unwrap();
                        let dxhat = &dy * &gamma;
                        let mean_d = dxhat.sum_axis(Axis(1)) / n;
                        let mean_dx = (&dxhat * xhat).sum_axis(Axis(1)) / n;
                        let mut dz = dxhat - &mean_d.view().insert_axis(Axis(1));
                        dz -= &(xhat * &mean_dx.view().insert_axis(Axis(1)));
                        dz *= &inv_std.view().insert_axis(Axis(1));
                        dz
                    }
                    _ => dy,
                }
            } else {
                d
            };
            if let Some(m) = &c.mask {
                dz *= m;
            }
            if let Some(g) = grad.as_deref_mut() {
                let (gw, rest) = g[l.w..].split_at_mut(l.fan_in * l.fan_out);
                let mut gw = ArrayViewMut2::from_shape((l.fan_in, l.fan_out), gw).unwrap();
                general_mat_mul(F::one(), &c.input.t(), &dz, F::one(), &mut gw);
                let mut gb = ArrayViewMut1::from(&mut rest[..l.fan_out]);
                gb += &dz.sum_axis(Axis(0));
            }
            if li == 0 && !want_input_grad {
                return None;
            }
            d = dz.dot(&self.weights(l).t());
        }
        Some(d)
    }

    /// `self ← (1 − tau)·self + tau·source`.
    pub fn soft_update_from(&mut self, source: &Mlp<F>, tau: F) {
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = *t + tau * (*s - *t);
        }
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr: F::from_f64_lossy(lr),
            beta1: F::from_f64_lossy(0.9),
            beta2: F::from_f64_lossy(0.999),
            eps: F::from_f64_lossy(1e-8),
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F]) {
        self.t += 1;
        let one = F::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        let step = self.lr * c2.sqrt() / c1;
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (one - self.beta1) * *g;
            *v = self.beta2 * *v + (one - self.beta2) * *g * *g;
            *p = *p - step * *m / (v.sqrt() + self.eps);
        }
    }
}
