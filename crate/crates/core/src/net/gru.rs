//! Gated recurrent cell with exact single-step gradients.
//!
//! Gate equations (σ is the logistic function):
//!
//! ```text
//! z  = σ(Wz x + Uz h + bz)          update gate
//! r  = σ(Wr x + Ur h + br)          reset gate
//! n  = tanh(Wn x + r ∘ (Un h) + bn) candidate state
//! h' = (1 - z) ∘ n + z ∘ h
//! ```
//!
//! The trainer resets `h` to zeros at every episode start and treats stored
//! hidden states as constants during update epochs (truncated backpropagation
//! of length one); `backward` nevertheless returns the gradient with respect
//! to the incoming hidden state so multi-step chains can be composed and
//! verified.

use crate::error::{Error, Result};
use crate::scalar::{real, Real};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct GruCell<R> {
    in_dim: usize,
    hidden: usize,
    params: Vec<R>,
}

/// Intermediates recorded by [`GruCell::forward`].
#[derive(Debug, Clone)]
pub struct GruTape<R> {
    x: Vec<R>,
    h: Vec<R>,
    z: Vec<R>,
    r: Vec<R>,
    n: Vec<R>,
    /// `Un · h`, needed for the reset-gate gradient.
    unh: Vec<R>,
}

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

impl<R: Real> GruCell<R> {
    pub fn zeros(in_dim: usize, hidden: usize) -> Result<Self> {
        if in_dim == 0 || hidden == 0 {
            return Err(Error::usage("gru dimensions must be positive"));
        }
        let n = Self::expected_params(in_dim, hidden);
        Ok(Self { in_dim, hidden, params: vec![R::zero(); n] })
    }

    /// Seeded scaled-uniform fan-in init (biases zero), drawing in `f64`.
    pub fn init(in_dim: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        let mut cell = Self::zeros(in_dim, hidden)?;
        let sx = (1.0 / in_dim as f64).sqrt();
        let sh = (1.0 / hidden as f64).sqrt();
        let mut off = 0;
        for _gate in 0..3 {
            for w in &mut cell.params[off..off + hidden * in_dim] {
                *w = real(rng.gen_range(-sx..sx));
            }
            off += hidden * in_dim;
            for w in &mut cell.params[off..off + hidden * hidden] {
                *w = real(rng.gen_range(-sh..sh));
            }
            off += hidden * hidden + hidden; // biases stay zero
        }
        Ok(cell)
    }

    /// `3 * (hidden*in + hidden*hidden + hidden)`.
    pub fn expected_params(in_dim: usize, hidden: usize) -> usize {
        3 * (hidden * in_dim + hidden * hidden + hidden)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
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

    /// Offsets of (W, U, b) for gate `g` in 0..3 (update, reset, candidate).
    fn gate(&self, g: usize) -> (usize, usize, usize) {
        let per_gate = self.hidden * self.in_dim + self.hidden * self.hidden + self.hidden;
        let base = g * per_gate;
        (base, base + self.hidden * self.in_dim, base + self.hidden * self.in_dim + self.hidden * self.hidden)
    }

    fn gate_preact(&self, g: usize, x: &[R], h: &[R]) -> Vec<R> {
        let (wo, uo, bo) = self.gate(g);
        let mut out = vec![R::zero(); self.hidden];
        for i in 0..self.hidden {
            let mut acc = self.params[bo + i];
            let wrow = &self.params[wo + i * self.in_dim..wo + (i + 1) * self.in_dim];
            for (w, xv) in wrow.iter().zip(x.iter()) {
                acc = acc + *w * *xv;
            }
            let urow = &self.params[uo + i * self.hidden..uo + (i + 1) * self.hidden];
            for (u, hv) in urow.iter().zip(h.iter()) {
                acc = acc + *u * *hv;
            }
            out[i] = acc;
        }
        out
    }

    /// One step: `(h_next, tape)`.
    pub fn forward(&self, x: &[R], h: &[R]) -> (Vec<R>, GruTape<R>) {
        assert_eq!(x.len(), self.in_dim, "input length must match in_dim");
        assert_eq!(h.len(), self.hidden, "hidden length must match hidden_dim");
        let z: Vec<R> = self.gate_preact(0, x, h).into_iter().map(sigmoid).collect();
        let r: Vec<R> = self.gate_preact(1, x, h).into_iter().map(sigmoid).collect();
        // Candidate uses r ∘ (Un h): compute Un h separately from Wn x + bn.
        let (wo, uo, bo) = self.gate(2);
        let mut unh = vec![R::zero(); self.hidden];
        for i in 0..self.hidden {
            let urow = &self.params[uo + i * self.hidden..uo + (i + 1) * self.hidden];
            let mut acc = R::zero();
            for (u, hv) in urow.iter().zip(h.iter()) {
                acc = acc + *u * *hv;
            }
            unh[i] = acc;
        }
        let mut n = vec![R::zero(); self.hidden];
        for i in 0..self.hidden {
            let mut acc = self.params[bo + i] + self.r_times(&r, &unh, i);
            let wrow = &self.params[wo + i * self.in_dim..wo + (i + 1) * self.in_dim];
            for (w, xv) in wrow.iter().zip(x.iter()) {
                acc = acc + *w * *xv;
            }
            n[i] = acc.tanh();
        }
        let mut h_next = vec![R::zero(); self.hidden];
        for i in 0..self.hidden {
            h_next[i] = (R::one() - z[i]) * n[i] + z[i] * h[i];
        }
        let tape = GruTape { x: x.to_vec(), h: h.to_vec(), z, r, n, unh };
        (h_next, tape)
    }

    fn r_times(&self, r: &[R], unh: &[R], i: usize) -> R {
        r[i] * unh[i]
    }

    /// Reverse pass: accumulate parameter gradients into `grad` and return
    /// `(d_x, d_h_prev)`.
    pub fn backward(&self, tape: &GruTape<R>, d_hnext: &[R], grad: &mut [R]) -> (Vec<R>, Vec<R>) {
        assert_eq!(d_hnext.len(), self.hidden, "d_hnext length must match hidden_dim");
        assert_eq!(grad.len(), self.params.len(), "grad buffer must cover all parameters");
        let one = R::one();
        let hdim = self.hidden;
        let mut d_x = vec![R::zero(); self.in_dim];
        let mut d_h = vec![R::zero(); hdim];

        // h' = (1-z)∘n + z∘h
        let d_z: Vec<R> = (0..hdim).map(|i| d_hnext[i] * (tape.h[i] - tape.n[i])).collect();
        let d_n: Vec<R> = (0..hdim).map(|i| d_hnext[i] * (one - tape.z[i])).collect();
        for i in 0..hdim {
            d_h[i] += d_hnext[i] * tape.z[i];
        }

        // Candidate: n = tanh(a), a = Wn x + r∘unh + bn.
        let d_an: Vec<R> = (0..hdim).map(|i| d_n[i] * (one - tape.n[i] * tape.n[i])).collect();
        let d_r: Vec<R> = (0..hdim).map(|i| d_an[i] * tape.unh[i]).collect();
        let d_unh: Vec<R> = (0..hdim).map(|i| d_an[i] * tape.r[i]).collect();
        {
            let (wo, uo, bo) = self.gate(2);
            for i in 0..hdim {
                for (g, xv) in grad[wo + i * self.in_dim..wo + (i + 1) * self.in_dim].iter_mut().zip(tape.x.iter()) {
                    *g += d_an[i] * *xv;
                }
                for (g, hv) in grad[uo + i * hdim..uo + (i + 1) * hdim].iter_mut().zip(tape.h.iter()) {
                    *g += d_unh[i] * *hv;
                }
                grad[bo + i] += d_an[i];
                let wrow = &self.params[wo + i * self.in_dim..wo + (i + 1) * self.in_dim];
                for (dx, w) in d_x.iter_mut().zip(wrow.iter()) {
                    *dx += d_an[i] * *w;
                }
                let urow = &self.params[uo + i * hdim..uo + (i + 1) * hdim];
                for (dh, u) in d_h.iter_mut().zip(urow.iter()) {
                    *dh += d_unh[i] * *u;
                }
            }
        }

        // Sigmoid gates: preact gradient = d_gate ∘ g(1-g).
        for (g_idx, (gate_val, d_gate)) in [(&tape.z, &d_z), (&tape.r, &d_r)].into_iter().enumerate() {
            let d_pre: Vec<R> =
                (0..hdim).map(|i| d_gate[i] * gate_val[i] * (one - gate_val[i])).collect();
            let (wo, uo, bo) = self.gate(g_idx);
            for i in 0..hdim {
                for (g, xv) in grad[wo + i * self.in_dim..wo + (i + 1) * self.in_dim].iter_mut().zip(tape.x.iter()) {
                    *g += d_pre[i] * *xv;
                }
                for (g, hv) in grad[uo + i * hdim..uo + (i + 1) * hdim].iter_mut().zip(tape.h.iter()) {
                    *g += d_pre[i] * *hv;
                }
                grad[bo + i] += d_pre[i];
                let wrow = &self.params[wo + i * self.in_dim..wo + (i + 1) * self.in_dim];
                for (dx, w) in d_x.iter_mut().zip(wrow.iter()) {
                    *dx += d_pre[i] * *w;
                }
                let urow = &self.params[uo + i * hdim..uo + (i + 1) * hdim];
                for (dh, u) in d_h.iter_mut().zip(urow.iter()) {
                    *dh += d_pre[i] * *u;
                }
            }
        }
        (d_x, d_h)
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
    fn zero_parameters_halve_the_hidden_state() {
        // With all parameters zero: z = σ(0) = 1/2, n = tanh(0) = 0,
        // so h' = z∘h = h/2 exactly.
        let cell = GruCell::<f64>::zeros(3, 4).unwrap();
        let (h1, _) = cell.forward(&[0.3, -0.1, 0.9], &[1.0, -2.0, 0.5, 4.0]);
        assert_eq!(h1, vec![0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        assert_eq!(GruCell::<f64>::expected_params(3, 4), 3 * (12 + 16 + 4));
        let cell = GruCell::<f64>::zeros(3, 4).unwrap();
        assert_eq!(cell.n_params(), 96);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = stream(17, "gru", 0, 0);
        let cell = GruCell::<f64>::init(4, 6, &mut rng).unwrap();
        let x = [0.2, -0.5, 0.8, 0.0];
        let mut h = vec![0.0; 6];
        let mut seq_a = Vec::new();
        for _ in 0..5 {
            h = cell.forward(&x, &h).0;
            seq_a.push(h.clone());
        }
        let mut h = vec![0.0; 6];
        for step in seq_a {
            h = cell.forward(&x, &h).0;
            assert_eq!(h, step);
        }
    }

    #[test]
    fn two_step_chain_matches_finite_differences() {
        // Loss = c · h2 where h2 = cell(x2, cell(x1, h0)). Checks parameter
        // gradients accumulated across both steps plus d_x and d_h_prev.
        let mut rng = stream(31, "gru-fd", 0, 0);
        let cell = GruCell::<f64>::init(3, 4, &mut rng).unwrap();
        let x1 = [0.4, -0.6, 0.2];
        let x2 = [-0.3, 0.5, 0.7];
        let h0 = [0.1, -0.2, 0.3, -0.4];
        let c = [0.9, -0.7, 0.5, 1.1];
        let loss = |cell: &GruCell<f64>, x1: &[f64], h0: &[f64]| {
            let h1 = cell.forward(x1, h0).0;
            let h2 = cell.forward(&x2, &h1).0;
            h2.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>()
        };

        let (h1, tape1) = cell.forward(&x1, &h0);
        let (_, tape2) = cell.forward(&x2, &h1);
        let mut grad = vec![0.0; cell.n_params()];
        let (_, d_h1) = cell.backward(&tape2, &c, &mut grad);
        let (d_x1, d_h0) = cell.backward(&tape1, &d_h1, &mut grad);

        let mut pert = cell.clone();
        for i in 0..cell.n_params() {
            let p0 = cell.params()[i];
            pert.params_mut()[i] = p0 + 1e-6;
            let lp = loss(&pert, &x1, &h0);
            pert.params_mut()[i] = p0 - 1e-6;
            let lm = loss(&pert, &x1, &h0);
            pert.params_mut()[i] = p0;
            assert_close(grad[i], (lp - lm) / 2e-6, 1e-5);
        }
        for d in 0..3 {
            let mut xp = x1;
            let mut xm = x1;
            xp[d] += 1e-6;
            xm[d] -= 1e-6;
            assert_close(d_x1[d], (loss(&cell, &xp, &h0) - loss(&cell, &xm, &h0)) / 2e-6, 1e-5);
        }
        for d in 0..4 {
            let mut hp = h0;
            let mut hm = h0;
            hp[d] += 1e-6;
            hm[d] -= 1e-6;
            assert_close(d_h0[d], (loss(&cell, &x1, &hp) - loss(&cell, &x1, &hm)) / 2e-6, 1e-5);
        }
    }
}
