//! Score/variance estimation heads.
//!
//! A head consumes a raw pre-sigmoid score ("logit") plus a pair
//! representation and produces a calibrated probability together with a
//! variance. Two implementations:
//!
//! - [`HeteroscedasticHead`]: trainable. Models the logit as a Gaussian
//!   whose mean offset and log-variance are affine in the representation;
//!   the probability is a Monte-Carlo average of the logistic over that
//!   Gaussian (reparameterized, so the loss is differentiable end to end).
//! - [`CountBasedHead`]: closed-form. Variance decays as 1/(1+count) per
//!   entity; serves as an analytic reference for index and retrieval tests
//!   and as a training-free mode for index-only experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Probability clamp applied inside the loss for numeric stability.
pub const PROB_CLAMP: f64 = 1e-7;

/// A calibrated (score, variance) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyEstimate {
    /// Probability in [0, 1].
    pub score: f64,
    /// Variance, ≥ 0.
    pub variance: f64,
}

impl UncertaintyEstimate {
    pub fn new(score: f64, variance: f64) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::Numeric(format!("score {score} outside [0,1]")));
        }
        if !variance.is_finite() || variance < 0.0 {
            return Err(Error::Numeric(format!("variance {variance} is negative")));
        }
        Ok(UncertaintyEstimate { score, variance })
    }
}

/// Numerically stable logistic function 1/(1+e^(-x)).
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse logistic: ln(p/(1-p)). Defined only on the open interval (0, 1).
pub fn logit(probability: f64) -> Result<f64> {
    if !(probability > 0.0 && probability < 1.0) {
        return Err(Error::Domain(format!(
            "logit requires probability in (0,1), got {probability}"
        )));
    }
    Ok((probability / (1.0 - probability)).ln())
}

/// Common estimation interface over (source, target) pairs. `raw` is the
/// pre-sigmoid score; `repr` is the pair representation (may be ignored).
pub trait UeHead {
    fn estimate_pair(
        &self,
        source: u64,
        target: u64,
        raw: f64,
        repr: &[f64],
    ) -> Result<UncertaintyEstimate>;
}

/// Gradient of [`HeteroscedasticHead::dual_loss_grad`] with respect to every
/// head parameter and both inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGrad {
    pub mu_w: Vec<f64>,
    pub mu_b: f64,
    pub logvar_w: Vec<f64>,
    pub logvar_b: f64,
    pub logit: f64,
    pub repr: Vec<f64>,
}

/// Trainable Gaussian-logit head.
///
/// μ = logit + mu_w·repr + mu_b, σ² = exp(logvar_w·repr + logvar_b),
/// score = (1/S) Σ_s logistic(μ + σ·ε_s) with ε_s frozen standard-normal
/// draws from the head's seed. Freezing the draws keeps every estimate pure
/// and makes the reparameterized gradient exact for those same draws.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroscedasticHead {
    pub mu_w: Vec<f64>,
    pub mu_b: f64,
    pub logvar_w: Vec<f64>,
    pub logvar_b: f64,
    mc_samples: usize,
    seed: u64,
    eps: Vec<f64>,
}

impl HeteroscedasticHead {
    /// Zero-initialized head: μ-offset 0, σ² = exp(0) = 1.
    pub fn zeros(width: usize, mc_samples: usize, seed: u64) -> Result<Self> {
        if mc_samples == 0 {
            return Err(Error::Config("mc_samples must be positive".into()));
        }
        Ok(HeteroscedasticHead {
            mu_w: vec![0.0; width],
            mu_b: 0.0,
            logvar_w: vec![0.0; width],
            logvar_b: 0.0,
            mc_samples,
            seed,
            eps: draw_eps(mc_samples, seed),
        })
    }

    pub fn width(&self) -> usize {
        self.mu_w.len()
    }

    pub fn mc_samples(&self) -> usize {
        self.mc_samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same parameters, different Monte-Carlo budget (draws re-frozen).
    pub fn with_mc_samples(&self, mc_samples: usize) -> Result<Self> {
        if mc_samples == 0 {
            return Err(Error::Config("mc_samples must be positive".into()));
        }
        Ok(HeteroscedasticHead {
            eps: draw_eps(mc_samples, self.seed),
            mc_samples,
            ..self.clone()
        })
    }

    fn check_inputs(&self, logit: f64, repr: &[f64]) -> Result<()> {
        if repr.len() != self.width() {
            return Err(Error::Validation(format!(
                "representation width {} does not match head width {}",
                repr.len(),
                self.width()
            )));
        }
        let finite = self.mu_w.iter().chain(self.logvar_w.iter()).all(|v| v.is_finite())
            && self.mu_b.is_finite()
            && self.logvar_b.is_finite();
        if !finite {
            return Err(Error::Numeric("head parameters are non-finite".into()));
        }
        if !logit.is_finite() || repr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("estimate inputs are non-finite".into()));
        }
        Ok(())
    }

    fn mu_sigma(&self, logit: f64, repr: &[f64]) -> (f64, f64, f64) {
        let mu = logit + dot(&self.mu_w, repr) + self.mu_b;
        let logvar = dot(&self.logvar_w, repr) + self.logvar_b;
        let var = logvar.exp();
        (mu, var, var.sqrt())
    }

    /// Monte-Carlo (score, variance) estimate.
    pub fn estimate(&self, logit: f64, repr: &[f64]) -> Result<UncertaintyEstimate> {
        self.check_inputs(logit, repr)?;
        let (mu, var, sigma) = self.mu_sigma(logit, repr);
        let mut acc = 0.0;
        for &e in &self.eps {
            acc += logistic(mu + sigma * e);
        }
        UncertaintyEstimate::new(acc / self.mc_samples as f64, var)
    }

    /// Binary cross-entropy of the Monte-Carlo score against `label`.
    pub fn dual_loss(&self, logit: f64, repr: &[f64], label: u8) -> Result<f64> {
        Ok(self.dual_loss_grad(logit, repr, label)?.0)
    }

    /// Loss plus analytic gradients via the reparameterization μ + σ·ε.
    /// When the probability clamp is active its gradient is zero.
    pub fn dual_loss_grad(&self, logit: f64, repr: &[f64], label: u8) -> Result<(f64, HeteroGrad)> {
        if label > 1 {
            return Err(Error::Validation(format!("label must be 0 or 1, got {label}")));
        }
        self.check_inputs(logit, repr)?;
        let (mu, _var, sigma) = self.mu_sigma(logit, repr);
        let s_inv = 1.0 / self.mc_samples as f64;

        let mut p_raw = 0.0;
        let mut dp_dmu = 0.0;
        let mut dp_dsigma = 0.0;
        for &e in &self.eps {
            let p = logistic(mu + sigma * e);
            let dp = p * (1.0 - p);
            p_raw += s_inv * p;
            dp_dmu += s_inv * dp;
            dp_dsigma += s_inv * dp * e;
        }

        let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p_raw);
        let p_hat = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let y = label as f64;
        let loss = -(y * p_hat.ln() + (1.0 - y) * (1.0 - p_hat).ln());

        let dl_dp = if clamped {
            0.0
        } else {
            (p_hat - y) / (p_hat * (1.0 - p_hat))
        };
        let dl_dmu = dl_dp * dp_dmu;
        // σ = exp(logvar/2) so dσ/dlogvar = σ/2.
        let dl_dlogvar = dl_dp * dp_dsigma * sigma * 0.5;

        let mut grad = HeteroGrad {
            mu_w: vec![0.0; self.width()],
            mu_b: dl_dmu,
            logvar_w: vec![0.0; self.width()],
            logvar_b: dl_dlogvar,
            logit: dl_dmu,
            repr: vec![0.0; self.width()],
        };
        for j in 0..self.width() {
            grad.mu_w[j] = dl_dmu * repr[j];
            grad.logvar_w[j] = dl_dlogvar * repr[j];
            grad.repr[j] = dl_dmu * self.mu_w[j] + dl_dlogvar * self.logvar_w[j];
        }
        Ok((loss, grad))
    }
}

impl UeHead for HeteroscedasticHead {
    fn estimate_pair(
        &self,
        _source: u64,
        _target: u64,
        raw: f64,
        repr: &[f64],
    ) -> Result<UncertaintyEstimate> {
        self.estimate(raw, repr)
    }
}

fn draw_eps(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Closed-form head: variance(id) = v0/(1+count(id)), pair variance is the
/// sum over both entities, score is the plain logistic of the raw score.
/// Unknown ids have count 0 and therefore maximal variance v0.
#[derive(Debug, Clone, PartialEq)]
pub struct CountBasedHead {
    v0: f64,
    counts: BTreeMap<u64, u64>,
}

impl CountBasedHead {
    pub fn new(v0: f64, counts: BTreeMap<u64, u64>) -> Result<Self> {
        if !(v0 > 0.0) || !v0.is_finite() {
            return Err(Error::Config(format!("base variance v0 must be > 0, got {v0}")));
        }
        Ok(CountBasedHead { v0, counts })
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn count(&self, id: u64) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn entity_variance(&self, id: u64) -> f64 {
        self.v0 / (1.0 + self.count(id) as f64)
    }
}

impl UeHead for CountBasedHead {
    fn estimate_pair(
        &self,
        source: u64,
        target: u64,
        raw: f64,
        _repr: &[f64],
    ) -> Result<UncertaintyEstimate> {
        UncertaintyEstimate::new(
            logistic(raw),
            self.entity_variance(source) + self.entity_variance(target),
        )
    }
}
