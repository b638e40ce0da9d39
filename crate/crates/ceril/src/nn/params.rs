//! Named parameter storage, initialization and the Adam optimizer.

use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// One named parameter with gradient and optimizer slots.
#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub grad: Vec<S>,
    /// Adam first moment.
    pub m: Vec<S>,
    /// Adam second moment.
    pub v: Vec<S>,
    pub trainable: bool,
}

/// Insertion-ordered parameter store; iteration order is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<S>) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let n = values.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            grad: vec![S::zero(); n],
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            trainable: true,
        });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> &ParamEntry<S> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, name: &str) -> &mut ParamEntry<S> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[idx]
    }

    pub fn values(&self, name: &str) -> &[S] {
        &self.entry(name).values
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Pull gradients accumulated on a graph into the store.
    pub fn accumulate_grads(&mut self, grads: &[(&str, &[S])]) {
        for (name, g) in grads {
            let e = self.entry_mut(name);
            debug_assert_eq!(e.grad.len(), g.len());
            for (d, &gv) in e.grad.iter_mut().zip(*g) {
                *d = *d + gv;
            }
        }
    }

    /// Global L2 norm of all trainable gradients, computed in f64.
    pub fn global_grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for e in &self.entries {
            if !e.trainable {
                continue;
            }
            for &g in &e.grad {
                let gv = g.to_f64_lossy();
                acc += gv * gv;
            }
        }
        acc.sqrt()
    }

    /// Gradient norm over a name-prefixed subset (per-head diagnostics).
    pub fn grad_norm_prefixed(&self, prefix: &str) -> f64 {
        let mut acc = 0.0f64;
        for e in &self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            for &g in &e.grad {
                let gv = g.to_f64_lossy();
                acc += gv * gv;
            }
        }
        acc.sqrt()
    }
}

/// Standard Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(0.5),
        }
    }
}

/// Optimizer state: the shared step counter for bias correction.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub step: u64,
}

impl Adam {
    pub fn new() -> Self {
        Adam { step: 0 }
    }

    /// Apply one Adam step to every trainable parameter; returns the
    /// pre-clip global gradient norm.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, cfg: &AdamConfig) -> f64 {
        self.step += 1;
        let norm = store.global_grad_norm();
        let clip_scale = match cfg.grad_clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        let b1 = S::from_f64_lossy(cfg.beta1);
        let b2 = S::from_f64_lossy(cfg.beta2);
        let one_m_b1 = S::from_f64_lossy(1.0 - cfg.beta1);
        let one_m_b2 = S::from_f64_lossy(1.0 - cfg.beta2);
        let scale = S::from_f64_lossy(clip_scale);
        let lr = S::from_f64_lossy(cfg.lr);
        let eps = S::from_f64_lossy(cfg.eps);
        let inv_bias1 = S::from_f64_lossy(1.0 / bias1);
        let inv_bias2 = S::from_f64_lossy(1.0 / bias2);
        for e in store.entries_mut() {
            if !e.trainable {
                continue;
            }
            for k in 0..e.values.len() {
                let g = e.grad[k] * scale;
                e.m[k] = b1 * e.m[k] + one_m_b1 * g;
                e.v[k] = b2 * e.v[k] + one_m_b2 * g * g;
                let m_hat = e.m[k] * inv_bias1;
                let v_hat = e.v[k] * inv_bias2;
                e.values[k] = e.values[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        norm
    }
}

/// Standard normal sample via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Row-orthogonal `rows x cols` matrix scaled by `gain`, from a seeded
/// Gaussian draw orthonormalized with modified Gram-Schmidt. When
/// rows > cols only the first `cols` rows can be mutually orthogonal; the
/// remainder are unit-normalized residuals, which is adequate for
/// initialization.
pub fn orthogonal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let mut mat: Vec<f64> = (0..rows * cols).map(|_| gaussian(rng)).collect();
    for r in 0..rows {
        for prev in 0..r.min(cols) {
            let mut dot = 0.0;
            for c in 0..cols {
                dot += mat[r * cols + c] * mat[prev * cols + c];
            }
            for c in 0..cols {
                mat[r * cols + c] -= dot * mat[prev * cols + c];
            }
        }
        let mut norm = 0.0;
        for c in 0..cols {
            norm += mat[r * cols + c] * mat[r * cols + c];
        }
        let norm = norm.sqrt().max(1e-12);
        for c in 0..cols {
            mat[r * cols + c] /= norm;
        }
    }
    mat.iter_mut().for_each(|v| *v *= gain);
    mat
}

/// Dense weight [in, out] with orthogonal-style init over the [out, in]
/// view, matching the usual output-row convention.
pub fn dense_init<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Vec<S> {
    let q = orthogonal_init(rng, fan_out, fan_in, gain);
    let mut w = vec![S::zero(); fan_in * fan_out];
    for o in 0..fan_out {
        for i in 0..fan_in {
            w[i * fan_out + o] = S::from_f64_lossy(q[o * fan_in + i]);
        }
    }
    w
}

/// Conv kernel [Co, Ci, kh, kw] with orthogonal-style init over the
/// [Co, Ci*kh*kw] view.
pub fn conv_init<S: Scalar>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    gain: f64,
) -> Vec<S> {
    orthogonal_init(rng, c_out, c_in * kh * kw, gain)
        .into_iter()
        .map(S::from_f64_lossy)
        .collect()
}
