//! Policy heads: categorical over logits and diagonal Gaussian.
//!
//! Sampling and likelihood evaluation share one code path, so the log
//! probability stored at collection time is bit-identical to the one
//! recomputed at update time under unchanged parameters — which is what makes
//! the first-epoch importance ratio exactly one.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::{real, Real};

/// Clamp range for Gaussian log standard deviations.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// An action as produced by a policy head.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionValue<R> {
    Discrete(usize),
    Continuous(Vec<R>),
}

/// Stochastic draws during collection, greedy (argmax / mean) at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Greedy,
}

/// Likelihood, entropy, and gradient pieces of a categorical head at a fixed
/// action.
#[derive(Debug, Clone)]
pub struct CatEval<R> {
    pub logp: R,
    pub entropy: R,
    probs: Vec<R>,
    logps: Vec<R>,
    action: usize,
}

impl<R: Real> CatEval<R> {
    pub fn new(logits: &[R], action: usize) -> Self {
        assert!(action < logits.len(), "action index out of range");
        let m = logits.iter().cloned().fold(R::neg_infinity(), R::max);
        let lse = m + logits.iter().map(|z| (*z - m).exp()).sum::<R>().ln();
        let logps: Vec<R> = logits.iter().map(|z| *z - lse).collect();
        let probs: Vec<R> = logps.iter().map(|lp| lp.exp()).collect();
        let entropy = probs
            .iter()
            .zip(logps.iter())
            .filter(|(p, _)| **p > R::zero())
            .map(|(p, lp)| -*p * *lp)
            .sum();
        Self { logp: logps[action], entropy, probs, logps, action }
    }

    pub fn probs(&self) -> &[R] {
        &self.probs
    }

    /// `d(g_logp * logp + g_ent * entropy) / d logits`.
    pub fn d_logits(&self, g_logp: R, g_ent: R) -> Vec<R> {
        let h = self.entropy;
        self.probs
            .iter()
            .zip(self.logps.iter())
            .enumerate()
            .map(|(j, (p, lp))| {
                let indicator = if j == self.action { R::one() } else { R::zero() };
                let d_logp = indicator - *p;
                let d_ent = if *p > R::zero() { -*p * (*lp + h) } else { R::zero() };
                g_logp * d_logp + g_ent * d_ent
            })
            .collect()
    }
}

/// Likelihood, entropy, and gradient pieces of a diagonal Gaussian head at a
/// fixed action. The raw log-stds are clamped into
/// [`LOG_STD_MIN`, `LOG_STD_MAX`]; clamped dimensions get zero log-std
/// gradient.
#[derive(Debug, Clone)]
pub struct GaussEval<R> {
    pub logp: R,
    pub entropy: R,
    z: Vec<R>,
    sigma: Vec<R>,
    clamped: Vec<bool>,
}

impl<R: Real> GaussEval<R> {
    pub fn new(mean: &[R], logstd_raw: &[R], action: &[R]) -> Self {
        assert_eq!(mean.len(), logstd_raw.len(), "mean/logstd length mismatch");
        assert_eq!(mean.len(), action.len(), "mean/action length mismatch");
        let lo = real::<R>(LOG_STD_MIN);
        let hi = real::<R>(LOG_STD_MAX);
        let half_ln_2pi = real::<R>(0.5 * (2.0 * std::f64::consts::PI).ln());
        let half = real::<R>(0.5);
        let mut logp = R::zero();
        let mut entropy = R::zero();
        let mut z = Vec::with_capacity(mean.len());
        let mut sigma = Vec::with_capacity(mean.len());
        let mut clamped = Vec::with_capacity(mean.len());
        for d in 0..mean.len() {
            let ls = logstd_raw[d].max(lo).min(hi);
            clamped.push(logstd_raw[d] < lo || logstd_raw[d] > hi);
            let s = ls.exp();
            let zd = (action[d] - mean[d]) / s;
            logp = logp - half * zd * zd - ls - half_ln_2pi;
            entropy = entropy + half + half_ln_2pi + ls;
            z.push(zd);
            sigma.push(s);
        }
        Self { logp, entropy, z, sigma, clamped }
    }

    /// `d(g_logp * logp) / d mean` (entropy does not depend on the mean).
    pub fn d_mean(&self, g_logp: R) -> Vec<R> {
        self.z.iter().zip(self.sigma.iter()).map(|(z, s)| g_logp * *z / *s).collect()
    }

    /// `d(g_logp * logp + g_ent * entropy) / d logstd_raw`.
    pub fn d_logstd(&self, g_logp: R, g_ent: R) -> Vec<R> {
        self.z
            .iter()
            .zip(self.clamped.iter())
            .map(|(z, cl)| {
                if *cl {
                    R::zero()
                } else {
                    g_logp * (*z * *z - R::one()) + g_ent
                }
            })
            .collect()
    }
}

/// Draw (or pick greedily) a discrete action from logits.
pub fn categorical<R: Real>(
    logits: &[R],
    mode: SampleMode,
    rng: &mut ChaCha12Rng,
) -> (usize, CatEval<R>) {
    let action = match mode {
        SampleMode::Greedy => {
            let mut best = 0;
            for (i, z) in logits.iter().enumerate() {
                if *z > logits[best] {
                    best = i;
                }
            }
            best
        }
        SampleMode::Stochastic => {
            // Draws happen in f64 regardless of R so every instantiation
            // consumes the stream identically.
            let eval = CatEval::new(logits, 0);
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut chosen = logits.len() - 1;
            for (i, p) in eval.probs().iter().enumerate() {
                cum += p.to_f64c();
                if u < cum {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    (action, CatEval::new(logits, action))
}

/// Draw (or take the mean of) a diagonal Gaussian action.
///
/// The returned action is the raw draw; environments clip to their action box
/// when applying it, while likelihoods always refer to the unclipped value.
pub fn gaussian<R: Real>(
    mean: &[R],
    logstd_raw: &[R],
    mode: SampleMode,
    rng: &mut ChaCha12Rng,
) -> (Vec<R>, GaussEval<R>) {
    let lo = real::<R>(LOG_STD_MIN);
    let hi = real::<R>(LOG_STD_MAX);
    let action: Vec<R> = match mode {
        SampleMode::Greedy => mean.to_vec(),
        SampleMode::Stochastic => mean
            .iter()
            .zip(logstd_raw.iter())
            .map(|(m, ls)| {
                let s = ls.max(lo).min(hi).exp();
                let z: f64 = StandardNormal.sample(rng);
                *m + s * real::<R>(z)
            })
            .collect(),
    };
    let eval = GaussEval::new(mean, logstd_raw, &action);
    (action, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn uniform_logits_have_log_n_entropy() {
        let eval = CatEval::new(&[0.0f64; 4], 1);
        assert_close(eval.entropy, 4.0f64.ln(), 1e-12);
        assert_close(eval.logp, -(4.0f64.ln()), 1e-12);
        assert_close(eval.probs().iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn greedy_picks_the_largest_logit() {
        let mut rng = stream(1, "sample", 0, 0);
        let (a, _) = categorical(&[0.1f64, 3.0, -1.0], SampleMode::Greedy, &mut rng);
        assert_eq!(a, 1);
        let (a, eval) = gaussian(&[0.5f64, -0.25], &[0.0, 0.0], SampleMode::Greedy, &mut rng);
        assert_eq!(a, vec![0.5, -0.25]);
        // At the mean, z = 0, so logp is just the normalizer.
        assert_close(eval.logp, -(2.0 * std::f64::consts::PI).ln(), 1e-12);
    }

    #[test]
    fn standard_normal_logp_at_zero_is_half_log_2pi() {
        let eval = GaussEval::new(&[0.0f64], &[0.0], &[0.0]);
        assert_close(eval.logp, -0.5 * (2.0 * std::f64::consts::PI).ln(), 1e-12);
        assert_close(eval.entropy, 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()), 1e-12);
    }

    #[test]
    fn logstd_is_clamped_and_clamped_dims_get_zero_gradient() {
        let eval = GaussEval::new(&[0.0f64], &[5.0], &[1.0]);
        // Effective sigma is e^2, not e^5.
        assert_close(eval.sigma[0], 2.0f64.exp(), 1e-12);
        assert_close(eval.entropy, 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()) + 2.0, 1e-12);
        assert_eq!(eval.d_logstd(1.0, 0.0), vec![0.0]);
        let inside = GaussEval::new(&[0.0f64], &[0.5], &[1.0]);
        assert!(inside.d_logstd(1.0, 0.0)[0] != 0.0);
    }

    #[test]
    fn sampling_frequencies_follow_probabilities() {
        let logits = [1.0f64, 0.0, -1.0];
        let probs = CatEval::new(&logits, 0).probs().to_vec();
        let mut rng = stream(42, "sample-freq", 0, 0);
        let mut counts = [0usize; 3];
        let n = 40_000;
        for _ in 0..n {
            let (a, _) = categorical(&logits, SampleMode::Stochastic, &mut rng);
            counts[a] += 1;
        }
        for k in 0..3 {
            let freq = counts[k] as f64 / n as f64;
            assert_close(freq, probs[k], 0.01);
        }
    }

    #[test]
    fn sampling_is_stream_deterministic() {
        let draw = |seed| {
            let mut rng = stream(seed, "det", 0, 0);
            let mut acts = Vec::new();
            for _ in 0..16 {
                acts.push(categorical(&[0.3f64, -0.1, 0.2], SampleMode::Stochastic, &mut rng).0);
            }
            for _ in 0..4 {
                acts.push(gaussian(&[0.0f64], &[0.0], SampleMode::Stochastic, &mut rng).0[0] as usize);
            }
            acts
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn categorical_gradients_match_finite_differences() {
        let logits = [0.4f64, -0.2, 0.9, 0.05];
        let action = 2;
        let eval = CatEval::new(&logits, action);
        let (g_logp, g_ent) = (0.7, -0.3);
        let grad = eval.d_logits(g_logp, g_ent);
        let f = |z: &[f64]| {
            let e = CatEval::new(z, action);
            g_logp * e.logp + g_ent * e.entropy
        };
        for j in 0..logits.len() {
            let mut zp = logits;
            let mut zm = logits;
            zp[j] += 1e-6;
            zm[j] -= 1e-6;
            let fd = (f(&zp) - f(&zm)) / 2e-6;
            assert_close(grad[j], fd, 1e-7);
        }
    }

    #[test]
    fn gaussian_gradients_match_finite_differences() {
        let mean = [0.3f64, -0.7];
        let logstd = [0.2f64, -0.4];
        let action = [0.9f64, -1.1];
        let (g_logp, g_ent) = (0.6, 0.2);
        let eval = GaussEval::new(&mean, &logstd, &action);
        let dm = eval.d_mean(g_logp);
        let ds = eval.d_logstd(g_logp, g_ent);
        let f = |m: &[f64], s: &[f64]| {
            let e = GaussEval::new(m, s, &action);
            g_logp * e.logp + g_ent * e.entropy
        };
        for d in 0..2 {
            let mut mp = mean;
            let mut mm = mean;
            mp[d] += 1e-6;
            mm[d] -= 1e-6;
            assert_close(dm[d], (f(&mp, &logstd) - f(&mm, &logstd)) / 2e-6, 1e-6);
            let mut sp = logstd;
            let mut sm = logstd;
            sp[d] += 1e-6;
            sm[d] -= 1e-6;
            assert_close(ds[d], (f(&mean, &sp) - f(&mean, &sm)) / 2e-6, 1e-6);
        }
    }

    #[test]
    fn collection_and_update_likelihoods_agree_bitwise() {
        let mut rng = stream(3, "roundtrip", 0, 0);
        let logits = [0.2f64, 0.1, -0.4];
        let (a, eval) = categorical(&logits, SampleMode::Stochastic, &mut rng);
        assert_eq!(eval.logp, CatEval::new(&logits, a).logp);
        let mean = [0.1f64, 0.9];
        let logstd = [-0.3f64, 0.4];
        let (act, eval) = gaussian(&mean, &logstd, SampleMode::Stochastic, &mut rng);
        assert_eq!(eval.logp, GaussEval::new(&mean, &logstd, &act).logp);
    }
}
