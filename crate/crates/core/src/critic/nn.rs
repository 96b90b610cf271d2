//! Small multilayer perceptron with hand-written backpropagation.
//!
//! Hidden blocks follow the DroQ ordering `Linear → Dropout → LayerNorm → ReLU`;
//! the scalar head is `Linear → tanh`. Batches are stored as columns.
//!
//! Flat parameter layout, per hidden layer in order: weight (`out × in`,
//! column-major), bias (`out`), layer-norm gain (`out`), layer-norm bias (`out`);
//! then the head weight (`1 × last`) and bias (`1`).

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct HiddenOffsets {
    w: usize,
    b: usize,
    gain: usize,
    beta: usize,
    fan_in: usize,
    width: usize,
}

impl MlpShape {
    pub fn n_params(&self) -> usize {
        let (layers, head_w, _) = self.offsets();
        head_w + layers.last().map_or(self.input, |l| l.width) + 1
    }

    fn offsets(&self) -> (Vec<HiddenOffsets>, usize, usize) {
        let mut at = 0;
        let mut fan_in = self.input;
        let mut layers = Vec::with_capacity(self.hidden.len());
        for &width in &self.hidden {
            let w = at;
            let b = w + width * fan_in;
            let gain = b + width;
            let beta = gain + width;
            at = beta + width;
            layers.push(HiddenOffsets {
                w,
                b,
                gain,
                beta,
                fan_in,
                width,
            });
            fan_in = width;
        }
        let head_b = at + fan_in;
        (layers, at, head_b)
    }

    /// PyTorch-style default initialization: linear weights and biases
    /// `U(−1/√fan_in, 1/√fan_in)`, layer-norm gain 1 and bias 0.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params()];
        let (layers, head_w, head_b) = self.offsets();
        for l in &layers {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for p in &mut params[l.w..l.gain] {
                *p = rng.random_range(-bound..bound);
            }
            params[l.gain..l.beta].fill(1.0);
        }
        let last = layers.last().map_or(self.input, |l| l.width);
        let bound = 1.0 / (last as f64).sqrt();
        for p in &mut params[head_w..=head_b] {
            *p = rng.random_range(-bound..bound);
        }
        params
    }
}

struct LayerCache {
    input: DMatrix<f64>,
    mask: Option<DMatrix<f64>>,
    xhat: DMatrix<f64>,
    inv_sd: DVector<f64>,
    normed: DMatrix<f64>,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    last_hidden: DMatrix<f64>,
    pub output: DVector<f64>,
}

/// Dropout configuration for a training-mode forward pass.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'a mut R,
}

fn layer_norm(z: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = z.nrows() as f64;
    let mut xhat = z.clone();
    let mut inv_sd = DVector::zeros(z.ncols());
    for (j, mut col) in xhat.column_iter_mut().enumerate() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / n;
        let isd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        col *= isd;
        inv_sd[j] = isd;
    }
    (xhat, inv_sd)
}

pub fn forward<R: Rng + ?Sized>(
    shape: &MlpShape,
    params: &[f64],
    x: &DMatrix<f64>,
    mut dropout: Option<Dropout<'_, R>>,
) -> ForwardCache {
    let (offsets, head_w, head_b) = shape.offsets();
    let batch = x.ncols();
    let mut h = x.clone();
    let mut layers = Vec::with_capacity(offsets.len());
    for l in &offsets {
        let w = DMatrixView::from_slice(&params[l.w..l.b], l.width, l.fan_in);
        let b = DVectorView::from_slice(&params[l.b..l.gain], l.width);
        let mut z = w * &h;
        for mut col in z.column_iter_mut() {
            col += &b;
        }
        let mask = dropout.as_mut().filter(|d| d.rate > 0.0).map(|d| {
            let keep = 1.0 / (1.0 - d.rate);
            DMatrix::from_fn(l.width, batch, |_, _| {
                if d.rng.random::<f64>() < d.rate {
                    0.0
                } else {
                    keep
                }
            })
        });
        if let Some(m) = &mask {
            z.component_mul_assign(m);
        }
        let (xhat, inv_sd) = layer_norm(&z);
        let gain = &params[l.gain..l.beta];
        let beta = &params[l.beta..l.beta + l.width];
        let normed = DMatrix::from_fn(l.width, batch, |i, j| gain[i] * xhat[(i, j)] + beta[i]);
        let next = normed.map(|v| v.max(0.0));
        layers.push(LayerCache {
            input: std::mem::replace(&mut h, next),
            mask,
            xhat,
            inv_sd,
            normed,
        });
    }
    let last = h.nrows();
    let w = DMatrixView::from_slice(&params[head_w..head_b], 1, last);
    let u = w * &h;
    let output = DVector::from_iterator(batch, u.iter().map(|v| (v + params[head_b]).tanh()));
    ForwardCache {
        layers,
        last_hidden: h,
        output,
    }
}

/// Evaluation-mode forward pass (dropout disabled).
pub fn predict(shape: &MlpShape, params: &[f64], x: &DMatrix<f64>) -> DVector<f64> {
    forward::<rand::rngs::ThreadRng>(shape, params, x, None).output
}

/// Backpropagates `d loss / d output` through a cached forward pass, returning
/// the parameter gradient and the input gradient (`input × batch`).
pub fn backward(
    shape: &MlpShape,
    params: &[f64],
    cache: &ForwardCache,
    d_output: &DVector<f64>,
) -> (Vec<f64>, DMatrix<f64>) {
    let (offsets, head_w, head_b) = shape.offsets();
    let mut grad = vec![0.0; params.len()];
    let du = DVector::from_iterator(
        d_output.len(),
        d_output
            .iter()
            .zip(cache.output.iter())
            .map(|(g, o)| g * (1.0 - o * o)),
    );
    let last = cache.last_hidden.nrows();
    let dw = &cache.last_hidden * &du;
    grad[head_w..head_b].copy_from_slice(dw.as_slice());
    grad[head_b] = du.sum();
    let w = DMatrixView::from_slice(&params[head_w..head_b], 1, last);
    let mut dh = w.transpose() * du.transpose();

    for (l, c) in offsets.iter().zip(&cache.layers).rev() {
        let n = l.width as f64;
        // ReLU
        let mut dn = dh;
        dn.zip_apply(&c.normed, |g, v| {
            if v <= 0.0 {
                *g = 0.0
            }
        });
        // Layer-norm affine part.
        let gain = &params[l.gain..l.beta];
        for i in 0..l.width {
            let row = dn.row(i);
            grad[l.gain + i] = row.dot(&c.xhat.row(i));
            grad[l.beta + i] = row.sum();
        }
        let mut dz = dn;
        for (i, mut row) in dz.row_iter_mut().enumerate() {
            row *= gain[i];
        }
        // Normalization.
        for (j, mut col) in dz.column_iter_mut().enumerate() {
            let xh = c.xhat.column(j);
            let mean_g = col.sum() / n;
            let mean_gx = col.dot(&xh) / n;
            let isd = c.inv_sd[j];
            for i in 0..l.width {
                col[i] = isd * (col[i] - mean_g - xh[i] * mean_gx);
            }
        }
        if let Some(m) = &c.mask {
            dz.component_mul_assign(m);
        }
        let dw = &dz * c.input.transpose();
        grad[l.w..l.b].copy_from_slice(dw.as_slice());
        for i in 0..l.width {
            grad[l.b + i] = dz.row(i).sum();
        }
        let w = DMatrixView::from_slice(&params[l.w..l.b], l.width, l.fan_in);
        dh = w.transpose() * dz;
    }
    (grad, dh)
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.t = 0;
    }

    pub fn is_zeroed(&self) -> bool {
        self.t == 0 && self.m.iter().chain(&self.v).all(|&x| x == 0.0)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
