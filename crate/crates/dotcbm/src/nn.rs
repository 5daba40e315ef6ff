//! The two trainable adapters and their optimizer.
//!
//! Each adapter is a three-layer MLP `y = W3·drop(relu(W2·drop(relu(W1·x +
//! b1)) + b2)) + b3` with inverted dropout after each hidden ReLU. Forward
//! passes record a tape; [`adapter_backward`] replays it for exact gradients
//! of the forward map as executed, including the sampled dropout masks.
//!
//! The optimizer is the decoupled-weight-decay adaptive-moment update
//! (decay applied directly to parameters, then the bias-corrected moment
//! step). It operates on flat slices so adapters and the classifier share
//! one implementation with no cross-parameter coupling.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Batch convention: inputs are rows, weights are `[out x in]`, so one layer
/// computes `x · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub dropout_rate: f64,
}

/// Gradients (or moment accumulators) with the same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct AdapterTape {
    input: Array2<f64>,
    z1: Array2<f64>,
    d1: Array2<f64>,
    z2: Array2<f64>,
    d2: Array2<f64>,
    /// Effective dropout multipliers (0 or 1/(1-rate)); `None` in eval mode.
    mask1: Option<Array2<f64>>,
    mask2: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl AdapterParams {
    /// Uniform fan-in/fan-out initialization, biases zero.
    pub fn init(dim: usize, dropout_rate: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (dim as f64 + dim as f64)).sqrt();
        let mut weight = |d: usize| {
            Array2::from_shape_fn((d, d), |_| rng.random::<f64>() * 2.0 * bound - bound)
        };
        Self {
            w1: weight(dim),
            b1: Array1::zeros(dim),
            w2: weight(dim),
            b2: Array1::zeros(dim),
            w3: weight(dim),
            b3: Array1::zeros(dim),
            dropout_rate,
        }
    }

    /// Near-identity initialization: the adapter starts as `y ≈ x` (hidden
    /// biases lift activations past the ReLUs, the output bias re-centers),
    /// plus a small jittered weight perturbation. Starting from the identity
    /// preserves whatever alignment the raw embedding spaces already carry;
    /// a random start scrambles it and the transport loss must rediscover
    /// the patch-concept pairing from scratch.
    pub fn init_near_identity(
        dim: usize,
        dropout_rate: f64,
        jitter: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Inputs here are O(1) per coordinate; a shift of 3 keeps both
        // hidden layers in the linear region of the ReLU.
        let shift = 3.0;
        let mut weight = |d: usize| {
            Array2::from_shape_fn((d, d), |(i, j)| {
                let noise = rng.random::<f64>() * 2.0 * jitter - jitter;
                if i == j {
                    1.0 + noise
                } else {
                    noise
                }
            })
        };
        let w1 = weight(dim);
        let w2 = weight(dim);
        let w3 = weight(dim);
        let b1 = Array1::from_elem(dim, shift);
        let b2 = Array1::from_elem(dim, shift);
        // Cancel the shift exactly through the jittered weights: y(0) = 0.
        let b3 = -w3.dot(&(w2.dot(&b1) + &b2));
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            dropout_rate,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn zeros_grads(&self) -> AdapterGrads {
        let d = self.dim();
        AdapterGrads {
            w1: Array2::zeros((d, d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
            w3: Array2::zeros((d, d)),
            b3: Array1::zeros(d),
        }
    }

    /// Named views over every parameter tensor, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        let mat = |m: &Array2<f64>| (vec![m.nrows(), m.ncols()], m.iter().copied().collect());
        let vec1 = |v: &Array1<f64>| (vec![v.len()], v.to_vec());
        let (s1, t1) = mat(&self.w1);
        let (s2, t2) = vec1(&self.b1);
        let (s3, t3) = mat(&self.w2);
        let (s4, t4) = vec1(&self.b2);
        let (s5, t5) = mat(&self.w3);
        let (s6, t6) = vec1(&self.b3);
        vec![
            ("w1", s1, t1),
            ("b1", s2, t2),
            ("w2", s3, t3),
            ("b2", s4, t4),
            ("w3", s5, t5),
            ("b3", s6, t6),
        ]
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().expect("contiguous"),
            self.b1.as_slice_mut().expect("contiguous"),
            self.w2.as_slice_mut().expect("contiguous"),
            self.b2.as_slice_mut().expect("contiguous"),
            self.w3.as_slice_mut().expect("contiguous"),
            self.b3.as_slice_mut().expect("contiguous"),
        ]
    }
}

impl AdapterGrads {
    pub fn flat(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().expect("contiguous"),
            self.b1.as_slice().expect("contiguous"),
            self.w2.as_slice().expect("contiguous"),
            self.b2.as_slice().expect("contiguous"),
            self.w3.as_slice().expect("contiguous"),
            self.b3.as_slice().expect("contiguous"),
        ]
    }

    pub fn scaled_add(&mut self, factor: f64, other: &AdapterGrads) {
        self.w1.scaled_add(factor, &other.w1);
        self.b1.scaled_add(factor, &other.b1);
        self.w2.scaled_add(factor, &other.w2);
        self.b2.scaled_add(factor, &other.b2);
        self.w3.scaled_add(factor, &other.w3);
        self.b3.scaled_add(factor, &other.b3);
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let scale = 1.0 / (1.0 - rate);
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < rate { 0.0 } else { scale })
}

/// Forward pass over a batch of row vectors.
///
/// Train mode samples dropout masks from `rng` (required when the rate is
/// nonzero); eval mode applies no dropout and consumes no randomness.
pub fn adapter_forward(
    params: &AdapterParams,
    x: &Array2<f64>,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<f64>, AdapterTape)> {
    if x.ncols() != params.dim() {
        return Err(Error::Shape(format!(
            "adapter dim {} but input has {} columns",
            params.dim(),
            x.ncols()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("adapter input".into()));
    }

    let dropout = mode == Mode::Train && params.dropout_rate > 0.0;
    let mut rng = rng;
    let mut draw_mask = |shape: (usize, usize)| -> Result<Option<Array2<f64>>> {
        if !dropout {
            return Ok(None);
        }
        match rng.as_deref_mut() {
            Some(r) => Ok(Some(dropout_mask(r, shape, params.dropout_rate))),
            None => Err(Error::Config("train-mode forward requires an RNG for dropout".into())),
        }
    };

    let z1 = x.dot(&params.w1.t()) + &params.b1;
    let h1 = relu(&z1);
    let mask1 = draw_mask(h1.dim())?;
    let d1 = match &mask1 {
        Some(m) => &h1 * m,
        None => h1,
    };

    let z2 = d1.dot(&params.w2.t()) + &params.b2;
    let h2 = relu(&z2);
    let mask2 = draw_mask(h2.dim())?;
    let d2 = match &mask2 {
        Some(m) => &h2 * m,
        None => h2,
    };

    let y = d2.dot(&params.w3.t()) + &params.b3;
    let tape = AdapterTape {
        input: x.clone(),
        z1,
        d1,
        z2,
        d2,
        mask1,
        mask2,
    };
    Ok((y, tape))
}

/// Exact gradients of the forward map recorded in `tape`.
///
/// Returns `(d_input, d_params)`.
pub fn adapter_backward(
    params: &AdapterParams,
    tape: &AdapterTape,
    dy: &Array2<f64>,
) -> Result<(Array2<f64>, AdapterGrads)> {
    if dy.dim() != (tape.input.nrows(), params.dim()) {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match forward batch {:?}",
            dy.dim(),
            (tape.input.nrows(), params.dim())
        )));
    }

    let relu_gate = |z: &Array2<f64>, g: &Array2<f64>| -> Array2<f64> {
        Zip::from(z).and(g).map_collect(|&z, &g| if z > 0.0 { g } else { 0.0 })
    };

    let dw3 = dy.t().dot(&tape.d2);
    let db3 = dy.sum_axis(Axis(0));
    let dd2 = dy.dot(&params.w3);
    let dh2 = match &tape.mask2 {
        Some(m) => dd2 * m,
        None => dd2,
    };
    let dz2 = relu_gate(&tape.z2, &dh2);

    let dw2 = dz2.t().dot(&tape.d1);
    let db2 = dz2.sum_axis(Axis(0));
    let dd1 = dz2.dot(&params.w2);
    let dh1 = match &tape.mask1 {
        Some(m) => dd1 * m,
        None => dd1,
    };
    let dz1 = relu_gate(&tape.z1, &dh1);

    let dw1 = dz1.t().dot(&tape.input);
    let db1 = dz1.sum_axis(Axis(0));
    let dx = dz1.dot(&params.w1);

    Ok((
        dx,
        AdapterGrads {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
            w3: dw3,
            b3: db3,
        },
    ))
}

/// Step-size schedule: halve the base rate every ten epochs.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    base_lr * 0.5f64.powi((epoch / 10) as i32)
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer over a fixed set of
/// parameter tensors (given by flat lengths).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(hyper: AdamWHyper, tensor_lens: &[usize]) -> Self {
        Self {
            hyper,
            step: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over all tensors. Non-finite gradients abort the step with
    /// an error before any parameter is touched.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (t, g) in grads.iter().enumerate() {
            if g.len() != self.m[t].len() {
                return Err(Error::Shape(format!(
                    "tensor {t} has {} gradient entries, expected {}",
                    g.len(),
                    self.m[t].len()
                )));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {t}")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);

        for (idx, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.len() {
                p[i] *= 1.0 - lr * h.weight_decay;
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}
