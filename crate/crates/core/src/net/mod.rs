//! Minimal differentiable function approximators.
//!
//! This is deliberately not a general autodiff system: each architecture
//! (dense trunk, GRU cell) records exactly the intermediates its own backward
//! pass needs and accumulates parameter gradients into a caller-owned flat
//! buffer. Parameters live in a single `Vec<R>` per network so optimizers and
//! checkpoints can treat every model as one flat tensor.

mod adam;
mod checkpoint;
mod gru;
pub mod sample;

pub use adam::Adam;
pub use checkpoint::{find_entry, read_checkpoint, write_checkpoint, CheckpointEntry};
pub use gru::{GruCell, GruTape};
pub use sample::{ActionValue, SampleMode};

use crate::error::{Error, Result};
use crate::scalar::{real, Real};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Initial value for the learnable log standard deviation of Gaussian heads.
pub const LOG_STD_INIT: f64 = -0.5;

/// What the final layer's outputs mean.
///
/// `Linear` covers both critics (one output) and categorical policies (the
/// outputs are logits). `Gaussian` marks the outputs as means of a diagonal
/// Gaussian whose log standard deviations are extra learnable parameters,
/// appended after the last layer's weights in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Linear,
    Gaussian,
}

/// Fully connected ReLU trunk with a linear final layer.
///
/// Instances are cheap to clone and not thread-safe for concurrent mutation;
/// parallel rollout hands each worker its own clone and only the learner
/// mutates parameters.
#[derive(Debug, Clone)]
pub struct DenseNet<R> {
    widths: Vec<usize>,
    head: Head,
    params: Vec<R>,
}

/// Intermediates recorded by [`DenseNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<R> {
    input: Vec<R>,
    /// Post-activation output of every layer; the last entry is the raw
    /// linear output.
    acts: Vec<Vec<R>>,
}

impl<R: Real> DenseNet<R> {
    /// Network with all parameters zero.
    ///
    /// `widths` lists layer sizes input-first, e.g. `[10, 128, 128, 4]`.
    pub fn zeros(widths: &[usize], head: Head) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::usage(format!("invalid layer widths {widths:?}")));
        }
        let n = Self::expected_params(widths, head);
        Ok(Self { widths: widths.to_vec(), head, params: vec![R::zero(); n] })
    }

    /// Seeded scaled-uniform fan-in initialization.
    ///
    /// Weights are drawn from `U(-s, s)` with `s = sqrt(1/fan_in)`, biases
    /// start at zero, and the final layer's weights are additionally scaled
    /// by `out_gain` (small gains keep freshly initialized policies close to
    /// uniform). Gaussian heads start at [`LOG_STD_INIT`]. Draws happen in
    /// `f64` so `f32` and `f64` instantiations share the same stream.
    pub fn init(widths: &[usize], head: Head, out_gain: f64, rng: &mut ChaCha12Rng) -> Result<Self> {
        let mut net = Self::zeros(widths, head)?;
        let mut off = 0;
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let gain = if l == widths.len() - 2 { out_gain } else { 1.0 };
            let s = gain * (1.0 / fan_in as f64).sqrt();
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = real(rng.gen_range(-s..s));
            }
            off += fan_in * fan_out + fan_out; // biases stay zero
        }
        if head == Head::Gaussian {
            let out = *widths.last().unwrap();
            for v in &mut net.params[off..off + out] {
                *v = real(LOG_STD_INIT);
            }
        }
        Ok(net)
    }

    /// Flat parameter count for the given shape.
    pub fn expected_params(widths: &[usize], head: Head) -> usize {
        let layers: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        match head {
            Head::Linear => layers,
            Head::Gaussian => layers + widths.last().unwrap(),
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    /// Index range of the Gaussian log-std parameters, if any.
    pub fn logstd_range(&self) -> Option<std::ops::Range<usize>> {
        match self.head {
            Head::Linear => None,
            Head::Gaussian => {
                let out = self.out_dim();
                Some(self.params.len() - out..self.params.len())
            }
        }
    }

    /// Raw (unclamped) log-std slice of a Gaussian head.
    pub fn logstd(&self) -> &[R] {
        let r = self.logstd_range().expect("logstd() requires a Gaussian head");
        &self.params[r]
    }

    /// Forward pass recording the intermediates `backward` needs.
    pub fn forward(&self, x: &[R]) -> (Vec<R>, Tape<R>) {
        assert_eq!(x.len(), self.in_dim(), "input length must match the first layer width");
        let n_layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(n_layers);
        let mut cur = x.to_vec();
        let mut off = 0;
        for l in 0..n_layers {
            let (ni, no) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + ni * no];
            let b = &self.params[off + ni * no..off + ni * no + no];
            let mut out = vec![R::zero(); no];
            for r in 0..no {
                let mut acc = b[r];
                let row = &w[r * ni..(r + 1) * ni];
                for (wi, xi) in row.iter().zip(cur.iter()) {
                    acc = acc + *wi * *xi;
                }
                // Hidden layers are ReLU; the final layer stays linear.
                out[r] = if l + 1 < n_layers && acc < R::zero() { R::zero() } else { acc };
            }
            acts.push(out.clone());
            cur = out;
            off += ni * no + no;
        }
        (cur, Tape { input: x.to_vec(), acts })
    }

    /// Forward pass without recording a tape (rollout/evaluation hot path).
    pub fn infer(&self, x: &[R]) -> Vec<R> {
        self.forward(x).0
    }

    /// Reverse pass: accumulate `d loss / d params` into `grad` (`+=`) given
    /// `d_out = d loss / d output`, and return `d loss / d input`.
    ///
    /// `grad` must have the full parameter length; the Gaussian log-std slots
    /// are left untouched (their gradients do not flow through the layers —
    /// the sampling code computes them directly).
    pub fn backward(&self, tape: &Tape<R>, d_out: &[R], grad: &mut [R]) -> Vec<R> {
        assert_eq!(d_out.len(), self.out_dim(), "d_out length must match the output width");
        assert_eq!(grad.len(), self.params.len(), "grad buffer must cover all parameters");
        let n_layers = self.widths.len() - 1;
        // Parameter offsets of each layer, front to back.
        let mut offs = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offs.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (ni, no) = (self.widths[l], self.widths[l + 1]);
            let off = offs[l];
            let input = if l == 0 { &tape.input } else { &tape.acts[l - 1] };
            let (gw, gb) = grad[off..off + ni * no + no].split_at_mut(ni * no);
            for r in 0..no {
                let d = delta[r];
                if d != R::zero() {
                    let row = &mut gw[r * ni..(r + 1) * ni];
                    for (g, xi) in row.iter_mut().zip(input.iter()) {
                        *g += d * *xi;
                    }
                    gb[r] += d;
                }
            }
            let w = &self.params[off..off + ni * no];
            let mut d_in = vec![R::zero(); ni];
            for r in 0..no {
                let d = delta[r];
                if d != R::zero() {
                    let row = &w[r * ni..(r + 1) * ni];
                    for (di, wi) in d_in.iter_mut().zip(row.iter()) {
                        *di += d * *wi;
                    }
                }
            }
            if l > 0 {
                // Gate by the ReLU that produced this layer's input.
                for (di, a) in d_in.iter_mut().zip(tape.acts[l - 1].iter()) {
                    if *a <= R::zero() {
                        *di = R::zero();
                    }
                }
            }
            delta = d_in;
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let net = DenseNet::<f64>::zeros(&[3, 4, 2], Head::Linear).unwrap();
        assert_eq!(net.infer(&[1.0, -2.0, 0.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let mut net = DenseNet::<f64>::zeros(&[2, 2], Head::Linear).unwrap();
        // W = I, b = 0.
        net.params_mut()[0] = 1.0;
        net.params_mut()[3] = 1.0;
        assert_eq!(net.infer(&[0.3, -0.7]), vec![0.3, -0.7]);
    }

    #[test]
    fn forward_matches_hand_matmul_2_3_1() {
        // Oracle: straight-line arithmetic, worked out by hand.
        //   z0 = W0 x + b0 = [0.5, -0.4, -0.4]; relu -> [0.5, 0, 0]
        //   out = 1.0*0.5 + 0.25 = 0.75
        let mut net = DenseNet::<f64>::zeros(&[2, 3, 1], Head::Linear).unwrap();
        let p = net.params_mut();
        p.copy_from_slice(&[
            0.5, -0.25, 1.0, 0.75, -0.5, 0.25, // W0 row-major
            0.1, -0.2, 0.0, // b0
            1.0, -2.0, 0.5, // W1
            0.25, // b1
        ]);
        let out = net.infer(&[0.4, -0.8]);
        assert_close(out[0], 0.75, 1e-12);
    }

    #[test]
    fn backward_scalar_linear_is_exact() {
        // out = w*x + b with w=3, b=1, x=2: d out/dw = 2, d out/db = 1,
        // d out/dx = 3 — all exact.
        let mut net = DenseNet::<f64>::zeros(&[1, 1], Head::Linear).unwrap();
        net.params_mut().copy_from_slice(&[3.0, 1.0]);
        let (out, tape) = net.forward(&[2.0]);
        assert_eq!(out, vec![7.0]);
        let mut grad = vec![0.0; 2];
        let d_in = net.backward(&tape, &[1.0], &mut grad);
        assert_eq!(grad, vec![2.0, 1.0]);
        assert_eq!(d_in, vec![3.0]);
    }

    #[test]
    fn backward_of_constant_output_is_zero() {
        let mut rng = stream(11, "test-init", 0, 0);
        let net = DenseNet::<f64>::init(&[3, 5, 2], Head::Linear, 1.0, &mut rng).unwrap();
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]);
        let mut grad = vec![0.0; net.n_params()];
        let d_in = net.backward(&tape, &[0.0, 0.0], &mut grad);
        assert!(grad.iter().all(|g| *g == 0.0));
        assert!(d_in.iter().all(|g| *g == 0.0));
    }

    /// Central finite differences of the scalar loss `sum(c * out)` over every
    /// parameter, avoiding inputs that park a ReLU near its kink.
    fn finite_difference_check(widths: &[usize], head: Head, seed: u64, tol: f64) {
        let mut rng = stream(seed, "fd-net", 0, 0);
        let net = DenseNet::<f64>::init(widths, head, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.gen_range(0.5..1.5)).collect();
        let loss = |net: &DenseNet<f64>| -> f64 {
            net.infer(&x).iter().zip(c.iter()).map(|(o, ci)| o * ci).sum()
        };
        let (_, tape) = net.forward(&x);
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&tape, &c, &mut grad);
        let mut pert = net.clone();
        for i in 0..net.n_params() {
            let p0 = net.params()[i];
            let eps = 1e-5 * (1.0 + p0.abs());
            pert.params_mut()[i] = p0 + eps;
            let lp = loss(&pert);
            pert.params_mut()[i] = p0 - eps;
            let lm = loss(&pert);
            pert.params_mut()[i] = p0;
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (grad[i] - fd).abs() / (grad[i].abs() + fd.abs() + 1e-8);
            assert!(rel < tol, "param {i}: analytic {} vs fd {fd} (rel {rel})", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(&[4, 8, 8, 2], Head::Linear, 21, 1e-4);
        finite_difference_check(&[3, 6, 1], Head::Linear, 22, 1e-4);
        finite_difference_check(&[5, 10, 10, 3], Head::Gaussian, 23, 1e-4);
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        // 4*8+8 + 8*8+8 + 8*2+2 = 40+72+18 = 130; Gaussian adds out_dim.
        assert_eq!(DenseNet::<f64>::expected_params(&[4, 8, 8, 2], Head::Linear), 130);
        assert_eq!(DenseNet::<f64>::expected_params(&[4, 8, 8, 2], Head::Gaussian), 132);
        let net = DenseNet::<f64>::zeros(&[4, 8, 8, 2], Head::Gaussian).unwrap();
        assert_eq!(net.n_params(), 132);
        assert_eq!(net.logstd_range().unwrap(), 130..132);
    }

    #[test]
    fn init_is_seed_deterministic_and_width_agnostic() {
        let mut r1 = stream(5, "init", 0, 0);
        let mut r2 = stream(5, "init", 0, 0);
        let a = DenseNet::<f64>::init(&[3, 4, 2], Head::Linear, 1.0, &mut r1).unwrap();
        let b = DenseNet::<f64>::init(&[3, 4, 2], Head::Linear, 1.0, &mut r2).unwrap();
        assert_eq!(a.params(), b.params());
        // The f32 net draws the same underlying f64 stream.
        let mut r3 = stream(5, "init", 0, 0);
        let c = DenseNet::<f32>::init(&[3, 4, 2], Head::Linear, 1.0, &mut r3).unwrap();
        for (x, y) in a.params().iter().zip(c.params().iter()) {
            assert_close(*x, f64::from(*y), 1e-7);
        }
    }

    #[test]
    fn f32_forward_tracks_f64_loosely() {
        let mut r1 = stream(9, "init", 0, 0);
        let mut r2 = stream(9, "init", 0, 0);
        let a = DenseNet::<f64>::init(&[4, 8, 2], Head::Linear, 1.0, &mut r1).unwrap();
        let b = DenseNet::<f32>::init(&[4, 8, 2], Head::Linear, 1.0, &mut r2).unwrap();
        let xa = [0.3, -0.2, 0.9, 0.1];
        let xb = [0.3f32, -0.2, 0.9, 0.1];
        let oa = a.infer(&xa);
        let ob = b.infer(&xb);
        for (x, y) in oa.iter().zip(ob.iter()) {
            assert_close(*x, f64::from(*y), 1e-5);
        }
    }

    #[test]
    #[should_panic(expected = "input length")]
    fn wrong_input_length_panics() {
        let net = DenseNet::<f64>::zeros(&[3, 2], Head::Linear).unwrap();
        net.infer(&[1.0, 2.0]);
    }
}
