//! Schedule mathematics: training-schedule construction, forward corruption,
//! the two training losses, the ancestral reverse step, the bilateral
//! noise-schedule search, schedule alignment, and the continuous-noise-level
//! variant.
//!
//! Index convention is 1-based `t = 1..=T` throughout, matching the products
//! `alpha_t = prod_{i<=t} sqrt(1 - beta_i)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Training-time noise schedule with derived amplitude products.
#[derive(Debug, Clone)]
pub struct TrainingSchedule {
    beta: Vec<f64>,
    /// `alpha[t-1] = prod_{i<=t} sqrt(1 - beta_i)`, strictly decreasing.
    alpha: Vec<f64>,
    /// `delta[t-1] = sqrt(1 - alpha_t^2)`.
    delta: Vec<f64>,
}

impl TrainingSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidConfig("schedule needs T >= 1".into()));
        }
        if beta.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::InvalidConfig("beta values must lie in (0, 1)".into()));
        }
        let mut alpha = Vec::with_capacity(beta.len());
        let mut prod = 1.0f64;
        for &b in &beta {
            prod *= (1.0 - b).sqrt();
            alpha.push(prod);
        }
        let delta: Vec<f64> = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        Ok(TrainingSchedule { beta, alpha, delta })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::StepOutOfRange {
                t: t as f64,
                lo: 1.0,
                hi: self.len() as f64,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_t` with the `alpha_0 = 1` convention.
    pub fn alpha_or_one(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha[t - 1]
        }
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
}

/// Linear beta schedule: `beta_t = lo + (hi - lo) * (t - 1) / (T - 1)`.
pub fn linear_beta(t_steps: usize, lo: f64, hi: f64) -> Result<TrainingSchedule> {
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "invalid linear beta range [{lo}, {hi}]"
        )));
    }
    if t_steps == 0 {
        return Err(Error::InvalidConfig("schedule needs T >= 1".into()));
    }
    let beta: Vec<f64> = if t_steps == 1 {
        vec![lo]
    } else {
        (0..t_steps)
            .map(|i| lo + (hi - lo) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    TrainingSchedule::from_betas(beta)
}

/// The pre-defined training schedule: linear from 1e-4 to 5e-3 over 1000 steps.
pub fn default_training_schedule() -> TrainingSchedule {
    linear_beta(1000, 1e-4, 5e-3).expect("constants are valid")
}

/// Inference-time schedule, optionally aligned to training steps.
#[derive(Debug, Clone)]
pub struct SamplingSchedule {
    pub beta_hat: Vec<f64>,
    /// `alpha_hat[s-1] = prod_{i<=s} sqrt(1 - beta_hat_i)`, strictly decreasing.
    pub alpha_hat: Vec<f64>,
    /// Real-valued training-step indices, populated by alignment.
    pub t_m: Option<Vec<f64>>,
}

impl SamplingSchedule {
    pub fn from_beta_hat(beta_hat: Vec<f64>) -> Result<Self> {
        if beta_hat.is_empty() {
            return Err(Error::InvalidConfig("sampling schedule needs T_m >= 1".into()));
        }
        if beta_hat.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::InvalidConfig(
                "beta_hat values must lie in (0, 1)".into(),
            ));
        }
        let mut alpha_hat = Vec::with_capacity(beta_hat.len());
        let mut prod = 1.0f64;
        for &b in &beta_hat {
            prod *= (1.0 - b).sqrt();
            alpha_hat.push(prod);
        }
        Ok(SamplingSchedule {
            beta_hat,
            alpha_hat,
            t_m: None,
        })
    }

    /// Full-length view of a training schedule (t_m = 1..=T), so one sampling
    /// loop covers both the fast and the full-T paths.
    pub fn from_training(train: &TrainingSchedule) -> Self {
        SamplingSchedule {
            beta_hat: train.beta.clone(),
            alpha_hat: train.alpha.clone(),
            t_m: Some((1..=train.len()).map(|t| t as f64).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.beta_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta_hat.is_empty()
    }

    pub fn is_aligned(&self) -> bool {
        self.t_m.is_some()
    }

    /// `alpha_hat_s` with the `alpha_hat_0 = 1` convention.
    pub fn alpha_hat_or_one(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_hat[s - 1]
        }
    }
}

/// Search hyperparameters: start point `(alpha_hat_n, beta_hat_n)`, maximum
/// schedule length `n`, and the gap `tau` used when training the predictor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SchedulerHyper {
    pub tau: usize,
    pub alpha_hat_n: f64,
    pub beta_hat_n: f64,
    pub n: usize,
}

impl Default for SchedulerHyper {
    fn default() -> Self {
        SchedulerHyper {
            tau: 200,
            alpha_hat_n: 0.54,
            beta_hat_n: 0.70,
            n: 4,
        }
    }
}

impl SchedulerHyper {
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.tau == 0 || self.tau >= t_steps {
            return Err(Error::InvalidConfig(format!(
                "tau {} must satisfy 1 <= tau < T ({t_steps})",
                self.tau
            )));
        }
        if !(0.0 < self.alpha_hat_n && self.alpha_hat_n < 1.0)
            || !(0.0 < self.beta_hat_n && self.beta_hat_n < 1.0)
        {
            return Err(Error::InvalidConfig(
                "search start point must lie in (0, 1)".into(),
            ));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("search needs N >= 1".into()));
        }
        Ok(())
    }
}

/// `x_t = alpha_t x_0 + delta_t eps`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &TrainingSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_diffuse",
            detail: format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        });
    }
    let mut out = x0.scale(sched.alpha(t));
    out.axpy(sched.delta(t), eps);
    Ok(out)
}

/// Corruption at a continuous amplitude: `x_s = alpha_s x_0 + sqrt(1-alpha_s^2) eps`.
pub fn forward_diffuse_continuous(x0: &Tensor, alpha_s: f64, eps: &Tensor) -> Tensor {
    let delta_s = (1.0 - alpha_s * alpha_s).sqrt();
    let mut out = x0.scale(alpha_s);
    out.axpy(delta_s, eps);
    out
}

/// Uniform draw in `[alpha_t, alpha_{t-1}]` (with `alpha_0 = 1`).
pub fn continuous_alpha_sample(t: usize, sched: &TrainingSchedule, rng: &mut Rng) -> Result<f64> {
    sched.check_t(t)?;
    let hi = sched.alpha_or_one(t - 1);
    let lo = sched.alpha(t);
    Ok(rng.uniform_range(lo, hi))
}

/// Mean squared error between the drawn and predicted noise.
pub fn score_loss(eps: &Tensor, eps_pred: &Tensor) -> f64 {
    assert_eq!(eps.shape(), eps_pred.shape(), "score_loss: shape mismatch");
    eps.data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / eps.len() as f64
}

/// Tape version of [`score_loss`]; `eps` is a constant, gradients flow into
/// the prediction.
pub fn score_loss_tape(tape: &mut Tape, eps: &Tensor, eps_pred: Var) -> Var {
    let e = tape.constant(eps.clone());
    let d = tape.sub(e, eps_pred);
    let sq = tape.mul(d, d);
    tape.mean(sq)
}

/// Capped step variance handed to the predictor:
/// `min(1 - alpha_t^2, 1 - alpha_{t+tau}^2 / alpha_t^2) * phi_out`.
pub fn beta_hat_for_training(
    t: usize,
    phi_out: f64,
    sched: &TrainingSchedule,
    tau: usize,
) -> Result<f64> {
    if t < tau || t > sched.len() - tau {
        return Err(Error::StepOutOfRange {
            t: t as f64,
            lo: tau as f64,
            hi: (sched.len() - tau) as f64,
        });
    }
    Ok(beta_hat_cap(sched.alpha(t), sched.alpha(t + tau)) * phi_out)
}

fn beta_hat_cap(alpha_t: f64, alpha_t_tau: f64) -> f64 {
    let a2 = alpha_t * alpha_t;
    (1.0 - a2).min(1.0 - alpha_t_tau * alpha_t_tau / a2)
}

/// Weighted noise-matching loss for the schedule predictor:
/// `delta^2 / (2 (delta^2 - beta_hat)) * mean((eps - beta_hat/delta^2 * eps_pred)^2)`.
///
/// Plain value form; `eps_pred` is treated as a constant.
pub fn noise_predictor_loss(
    eps: &Tensor,
    eps_pred: &Tensor,
    beta_hat_t: f64,
    delta_t: f64,
) -> Result<f64> {
    let d2 = delta_t * delta_t;
    if !(0.0 < beta_hat_t && beta_hat_t < d2) {
        return Err(Error::Constraint(format!(
            "beta_hat {beta_hat_t} must lie in (0, delta_t^2 = {d2})"
        )));
    }
    let scale = beta_hat_t / d2;
    let inner = eps
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(e, p)| {
            let r = e - scale * p;
            r * r
        })
        .sum::<f64>()
        / eps.len() as f64;
    Ok(d2 / (2.0 * (d2 - beta_hat_t)) * inner)
}

/// Tape version of [`noise_predictor_loss`]. Gradients flow only through the
/// scalar `beta_hat` variable (the predictor's pathway); `eps` and `eps_pred`
/// enter as constants.
pub fn noise_predictor_loss_tape(
    tape: &mut Tape,
    eps: &Tensor,
    eps_pred: &Tensor,
    beta_hat: Var,
    delta_t: f64,
) -> Result<Var> {
    let d2 = delta_t * delta_t;
    let bh = tape.value(beta_hat).item();
    if !(0.0 < bh && bh < d2) {
        return Err(Error::Constraint(format!(
            "beta_hat {bh} must lie in (0, delta_t^2 = {d2})"
        )));
    }
    // inner = mean((eps - (beta_hat/d2) * eps_pred)^2)
    let resid = tape.add_scaled_const(eps.clone(), eps_pred.scale(-1.0 / d2), beta_hat);
    let sq = tape.mul(resid, resid);
    let inner = tape.mean(sq);
    // weight = d2 / (2 (d2 - beta_hat))
    let neg = tape.scale(beta_hat, -1.0);
    let gap = tape.add_const(neg, d2);
    let inv = tape.recip(gap);
    let weight = tape.scale(inv, d2 / 2.0);
    Ok(tape.mul(weight, inner))
}

/// The constant term of the predictor's KL objective, reported but never
/// trained on: `0.25 ln(delta^2/beta) + (d/2)(beta/delta^2 - 1)` (natural log).
pub fn kl_constant_term(beta_t: f64, alpha_t_sq: f64, dims: usize) -> f64 {
    let d2 = 1.0 - alpha_t_sq;
    0.25 * (d2 / beta_t).ln() + dims as f64 / 2.0 * (beta_t / d2 - 1.0)
}

/// One ancestral reverse step computed from the *sampling* schedule:
/// mean `(x_t - beta/delta * eps_pred) / sqrt(1 - beta)` and variance
/// `beta * (1 - alpha_{s-1}^2) / (1 - alpha_s^2)` with `alpha_0 = 1` (so the
/// final step is deterministic). `z` is ignored when `last_step`.
pub fn reverse_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    s: usize,
    sched: &SamplingSchedule,
    z: &Tensor,
    last_step: bool,
) -> Result<Tensor> {
    if s < 1 || s > sched.len() {
        return Err(Error::StepOutOfRange {
            t: s as f64,
            lo: 1.0,
            hi: sched.len() as f64,
        });
    }
    reverse_step_raw(
        x_t,
        eps_pred,
        sched.beta_hat[s - 1],
        sched.alpha_hat[s - 1],
        sched.alpha_hat_or_one(s - 1),
        if last_step { None } else { Some(z) },
    )
}

/// Reverse-step kernel shared by the sampler and the schedule search.
pub fn reverse_step_raw(
    x_t: &Tensor,
    eps_pred: &Tensor,
    beta: f64,
    alpha: f64,
    alpha_prev: f64,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    if x_t.shape() != eps_pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "reverse_step",
            detail: format!("x_t {:?} vs eps_pred {:?}", x_t.shape(), eps_pred.shape()),
        });
    }
    let delta = (1.0 - alpha * alpha).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    let mut out = x_t.clone();
    out.axpy(-beta / delta, eps_pred);
    let out = out.scale(inv);
    match z {
        Some(z) => {
            let var = beta * (1.0 - alpha_prev * alpha_prev) / (1.0 - alpha * alpha);
            let mut out = out;
            out.axpy(var.max(0.0).sqrt(), z);
            Ok(out)
        }
        None => Ok(out),
    }
}

/// Noise-prediction model interface used by the sampler and the search.
/// `t_cond` is the (possibly real-valued) conditioning step.
pub trait EpsModel {
    fn predict_eps(&self, x_t: &Tensor, t_cond: f64) -> Result<Tensor>;
}

/// Scalar ratio predictor interface.
pub trait NoiseRatio {
    fn ratio(&self, x_t: &Tensor) -> Result<f64>;
}

/// Constant-ratio stand-in for the predictor; makes the search deterministic
/// in tests and supports the `--phi-const` CLI path.
pub struct ConstRatio(pub f64);

impl NoiseRatio for ConstRatio {
    fn ratio(&self, _x_t: &Tensor) -> Result<f64> {
        Ok(self.0)
    }
}

/// Refiner stand-in predicting zero noise.
pub struct ZeroEps;

impl EpsModel for ZeroEps {
    fn predict_eps(&self, x_t: &Tensor, _t_cond: f64) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

/// Iterative noise-schedule search. Starting from
/// `(alpha_hat_N, beta_hat_N)`, walks `t = N..2`, reverse-sampling the
/// context and setting
/// `beta_hat_{t-1} = min(1 - alpha_hat_{t-1}^2, beta_hat_t) * phi(x_{t-1})`
/// with `alpha_hat_{t-1} = alpha_hat_t / sqrt(1 - beta_hat_t)`. Stops early
/// when the candidate drops below `beta_1`. Returns the collected `beta_hat`
/// in increasing-t order.
pub fn noise_schedule_search(
    theta: &dyn EpsModel,
    phi: &dyn NoiseRatio,
    hyper: &SchedulerHyper,
    train: &TrainingSchedule,
    x_init: &Tensor,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    hyper.validate(train.len())?;
    let beta_1 = train.beta(1);
    let mut collected = vec![hyper.beta_hat_n];
    let mut alpha_hat = hyper.alpha_hat_n;
    let mut beta_hat = hyper.beta_hat_n;
    let mut x = x_init.clone();

    for _t in (2..=hyper.n).rev() {
        let alpha_prev = alpha_hat / (1.0 - beta_hat).sqrt();
        if !(0.0 < alpha_prev && alpha_prev < 1.0) {
            return Err(Error::SearchDiverged(format!(
                "alpha_hat update left (0, 1): {alpha_prev}"
            )));
        }
        let t_cond = align_alpha_to_step(alpha_hat, train).0;
        let eps = theta.predict_eps(&x, t_cond)?;
        let z = rng.normal_tensor(x.shape());
        x = reverse_step_raw(&x, &eps, beta_hat, alpha_hat, alpha_prev, Some(&z))?;

        let cap = (1.0 - alpha_prev * alpha_prev).min(beta_hat);
        let candidate = cap * phi.ratio(&x)?;
        if candidate < beta_1 {
            break;
        }
        collected.push(candidate);
        alpha_hat = alpha_prev;
        beta_hat = candidate;
    }
    collected.reverse();
    Ok(collected)
}

/// Maps one amplitude to a real-valued training step by interpolating between
/// the bracketing training amplitudes. Returns `(t_m, clamped)`.
pub fn align_alpha_to_step(alpha: f64, train: &TrainingSchedule) -> (f64, bool) {
    let l = train.alphas();
    let t_steps = l.len();
    if alpha > l[0] {
        return (1.0, true);
    }
    if alpha < l[t_steps - 1] {
        return (t_steps as f64, true);
    }
    // l is strictly decreasing; find t (1-based) with l_{t+1} <= alpha <= l_t
    let idx = l.partition_point(|&v| v >= alpha); // first index with l < alpha
    let t = idx.clamp(1, t_steps - 1); // bracketing interval start, 1-based
    let (lt, lt1) = (l[t - 1], l[t]);
    if alpha >= lt {
        return (t as f64, false);
    }
    (t as f64 + (lt - alpha) / (lt - lt1), false)
}

/// Aligns a searched schedule against the training schedule, producing
/// real-valued step indices `t_m`. Out-of-range amplitudes clamp to the ends
/// with a warning.
pub fn align_schedule(beta_hat: &[f64], train: &TrainingSchedule) -> Result<SamplingSchedule> {
    let mut sched = SamplingSchedule::from_beta_hat(beta_hat.to_vec())?;
    let mut t_m = Vec::with_capacity(sched.len());
    let mut clamped_at = Vec::with_capacity(sched.len());
    for (s, &a) in sched.alpha_hat.iter().enumerate() {
        let (t, clamped) = align_alpha_to_step(a, train);
        if clamped {
            log::warn!(
                "alignment: alpha_hat_{} = {a} outside [l_T, l_1]; clamped to t_m = {t}",
                s + 1
            );
        }
        t_m.push(t);
        clamped_at.push(clamped);
    }
    // clamping can produce ties at the schedule ends; separate them by an
    // epsilon so the steps stay strictly increasing
    for s in 1..t_m.len() {
        if t_m[s] <= t_m[s - 1] {
            if !(clamped_at[s] || clamped_at[s - 1]) {
                return Err(Error::Constraint(format!(
                    "aligned steps not strictly increasing: {t_m:?}"
                )));
            }
            let bumped = t_m[s - 1] + 1e-6;
            log::warn!(
                "alignment: clamped tie at s = {}; separating t_m {} -> {bumped}",
                s + 1,
                t_m[s]
            );
            t_m[s] = bumped;
        }
    }
    if *t_m.last().expect("non-empty") > train.len() as f64 + 1.0 {
        return Err(Error::Constraint(format!(
            "aligned steps escaped the training range: {t_m:?}"
        )));
    }
    sched.t_m = Some(t_m);
    Ok(sched)
}

/// Provenance of a sampling schedule on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleSource {
    Grid,
    Predictor,
}

/// JSON schedule file: the training-schedule parameters it was aligned
/// against plus the searched betas and aligned steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub beta_hat: Vec<f64>,
    pub t_m: Vec<f64>,
    pub source: ScheduleSource,
}

impl ScheduleFile {
    pub fn training_schedule(&self) -> Result<TrainingSchedule> {
        linear_beta(self.t, self.beta_lo, self.beta_hi)
    }

    pub fn sampling_schedule(&self) -> Result<SamplingSchedule> {
        let mut s = SamplingSchedule::from_beta_hat(self.beta_hat.clone())?;
        if self.t_m.len() != self.beta_hat.len() {
            return Err(Error::InvalidConfig(
                "schedule file: t_m length differs from beta_hat".into(),
            ));
        }
        for w in self.t_m.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidConfig(
                    "schedule file: t_m must be strictly increasing".into(),
                ));
            }
        }
        s.t_m = Some(self.t_m.clone());
        Ok(s)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Other(format!("schedule serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("schedule file {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_schedule() -> TrainingSchedule {
        default_training_schedule()
    }

    #[test]
    fn single_step_schedule() {
        let s = linear_beta(1, 0.5, 0.5).unwrap();
        assert_eq!(s.beta(1), 0.5);
        assert!((s.alpha(1) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn linear_endpoints_exact() {
        let s = paper_schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 5e-3);
    }

    #[test]
    fn alpha_matches_product_oracle() {
        let s = paper_schedule();
        // independent product in long-double style accumulation order
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            let beta = 1e-4 + (5e-3 - 1e-4) * (t - 1) as f64 / 999.0;
            prod *= (1.0 - beta).sqrt();
        }
        assert!((s.alpha(1000) - prod).abs() < 1e-14);
        // the product lands near 0.28
        assert!((prod - 0.28).abs() < 0.01, "alpha_1000 = {prod}");
    }

    #[test]
    fn alpha_delta_identity_and_monotonicity() {
        let s = paper_schedule();
        for t in 1..=1000 {
            let (a, d) = (s.alpha(t), s.delta(t));
            assert!((a * a + d * d - 1.0).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha(t) < s.alpha(t - 1));
            }
            assert!(0.0 < a && a < 1.0);
        }
    }

    #[test]
    fn forward_diffuse_hand_values() {
        let s = linear_beta(1, 0.75, 0.75).unwrap(); // alpha_1 = 0.5
        let x0 = Tensor::from_vec(vec![1.0, 0.0]);
        let eps = Tensor::from_vec(vec![0.0, 1.0]);
        let xt = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        assert!((xt.data()[0] - 0.5).abs() < 1e-15);
        assert!((xt.data()[1] - 0.75f64.sqrt()).abs() < 1e-15);
        // eps = 0 leaves alpha_t * x0
        let xt0 = forward_diffuse(&x0, 1, &Tensor::zeros(&[2]), &s).unwrap();
        assert_eq!(xt0.data(), &[0.5, 0.0]);
        assert!(forward_diffuse(&x0, 2, &eps, &s).is_err());
    }

    #[test]
    fn score_loss_values() {
        let eps = Tensor::from_vec(vec![1.0, 0.0]);
        assert_eq!(score_loss(&eps, &eps), 0.0);
        let pred = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(score_loss(&eps, &pred), 0.5);
    }

    #[test]
    fn beta_hat_cap_hand_value() {
        // alpha_t = 0.9, alpha_{t+tau} = 0.8 -> min(0.19, 1 - 0.64/0.81) = 0.19
        let cap = super::beta_hat_cap(0.9, 0.8);
        assert!((cap - 0.19).abs() < 1e-12);
        // phi = 0 zeroes the result regardless of cap
        let s = paper_schedule();
        assert_eq!(beta_hat_for_training(500, 0.0, &s, 200).unwrap(), 0.0);
        // support boundaries enforced
        assert!(beta_hat_for_training(199, 0.5, &s, 200).is_err());
        assert!(beta_hat_for_training(801, 0.5, &s, 200).is_err());
        assert!(beta_hat_for_training(800, 0.5, &s, 200).is_ok());
    }

    #[test]
    fn beta_hat_from_schedule_product_oracle() {
        let s = paper_schedule();
        let a500 = s.alpha(500);
        let a700 = s.alpha(700);
        let want = (1.0 - a500 * a500).min(1.0 - a700 * a700 / (a500 * a500)) * 0.5;
        let got = beta_hat_for_training(500, 0.5, &s, 200).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn noise_loss_hand_value_and_limit() {
        // eps = eps_pred = [1], delta^2 = 0.5, beta_hat = 0.25
        // -> (0.5 / (2*0.25)) * (1 - 0.5)^2 = 0.25
        let eps = Tensor::from_vec(vec![1.0]);
        let loss = noise_predictor_loss(&eps, &eps, 0.25, 0.5f64.sqrt()).unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
        // beta_hat -> 0 limit tends to 0.5 * mean(eps^2)
        let eps = Tensor::from_vec(vec![2.0, 0.0]);
        let pred = Tensor::from_vec(vec![0.3, -0.7]);
        let tiny = noise_predictor_loss(&eps, &pred, 1e-12, 1.0).unwrap();
        assert!((tiny - 0.5 * 2.0).abs() < 1e-9);
        // constraint violation surfaces
        assert!(noise_predictor_loss(&eps, &pred, 0.6, 0.7).is_err());
    }

    #[test]
    fn kl_constant_hand_value() {
        // beta=0.01, alpha^2=0.9, D=1: 0.25 ln(0.1/0.01) + 0.5 (0.01/0.1 - 1)
        let want = 0.25 * (0.1f64 / 0.01).ln() + 0.5 * (0.01 / 0.1 - 1.0);
        let got = kl_constant_term(0.01, 0.9, 1);
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn noise_loss_gradient_matches_finite_difference() {
        use crate::nn::grad_check::grad_check;
        use crate::nn::tape::ParamStore;
        let mut rng = crate::rng::Rng::seed_from_u64(21);
        let eps = rng.normal_tensor(&[6]);
        let pred = rng.normal_tensor(&[6]);
        let delta = 0.8;
        let mut store = ParamStore::new();
        store.insert("beta_hat", Tensor::scalar(0.3));
        let report = grad_check(
            &mut store,
            |tape, store| {
                let bh = tape.param_of(store, "beta_hat");
                noise_predictor_loss_tape(tape, &eps, &pred, bh, delta).unwrap()
            },
            1e-5,
            None,
        );
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
    }

    #[test]
    fn score_loss_gradient_matches_finite_difference() {
        use crate::nn::grad_check::grad_check;
        use crate::nn::tape::ParamStore;
        let mut rng = crate::rng::Rng::seed_from_u64(22);
        let eps = rng.normal_tensor(&[8]);
        let mut store = ParamStore::new();
        store.insert("pred", rng.normal_tensor(&[8]));
        let report = grad_check(
            &mut store,
            |tape, store| {
                let p = tape.param_of(store, "pred");
                score_loss_tape(tape, &eps, p)
            },
            1e-5,
            None,
        );
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
        // analytic gradient is 2 (pred - eps) / n
        store.zero_grads();
        let mut tape = Tape::new();
        let p = tape.param_of(&store, "pred");
        let loss = score_loss_tape(&mut tape, &eps, p);
        tape.backward(loss, &mut store).unwrap();
        for i in 0..8 {
            let want = 2.0 * (store.get("pred").value.data()[i] - eps.data()[i]) / 8.0;
            assert!((store.get("pred").grad.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_formula_reductions() {
        let sched = SamplingSchedule::from_beta_hat(vec![0.1, 0.2]).unwrap();
        let x = Tensor::from_vec(vec![1.0, -2.0]);
        let zero = Tensor::zeros(&[2]);
        // eps_pred = 0, z = 0: x / sqrt(1 - beta)
        let out = reverse_step(&x, &zero, 2, &sched, &zero, false).unwrap();
        let inv = 1.0 / (1.0 - 0.2f64).sqrt();
        assert!((out.data()[0] - inv).abs() < 1e-15);
        assert!((out.data()[1] + 2.0 * inv).abs() < 1e-15);
        // s = 1 is deterministic: variance term vanishes by alpha_0 = 1
        let z = Tensor::from_vec(vec![100.0, 100.0]);
        let a = reverse_step(&x, &zero, 1, &sched, &z, false).unwrap();
        let b = reverse_step(&x, &zero, 1, &sched, &z, true).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(reverse_step(&x, &zero, 3, &sched, &z, false).is_err());
    }

    #[test]
    fn single_step_perfect_eps_recovers_x0() {
        // beta_hat = 1 - alpha_hat^2: starting from alpha x0 + delta eps with
        // exact eps the reverse step returns x0
        let alpha: f64 = 0.54;
        let beta = 1.0 - alpha * alpha;
        let sched = SamplingSchedule::from_beta_hat(vec![beta]).unwrap();
        let mut rng = crate::rng::Rng::seed_from_u64(7);
        let x0 = rng.normal_tensor(&[64]);
        let eps = rng.normal_tensor(&[64]);
        let mut xt = x0.scale(alpha);
        xt.axpy((1.0 - alpha * alpha).sqrt(), &eps);
        let out = reverse_step(&xt, &eps, 1, &sched, &Tensor::zeros(&[64]), true).unwrap();
        assert!(out.sub(&x0).max_abs() < 1e-10);
    }

    #[test]
    fn search_matches_hand_iteration_with_stub_ratio() {
        let train = paper_schedule();
        let hyper = SchedulerHyper::default();
        let mut rng = crate::rng::Rng::seed_from_u64(0);
        let x0 = rng.normal_tensor(&[32]);
        let got = noise_schedule_search(
            &ZeroEps,
            &ConstRatio(0.5),
            &hyper,
            &train,
            &x0,
            &mut rng,
        )
        .unwrap();

        // hand iteration of the recurrence
        let mut expect = vec![0.70f64];
        let mut a = 0.54f64;
        let mut b = 0.70f64;
        for _ in 0..3 {
            a /= (1.0 - b).sqrt();
            b = (1.0 - a * a).min(b) * 0.5;
            expect.push(b);
        }
        expect.reverse();
        assert_eq!(got.len(), 4);
        for (g, e) in got.iter().zip(&expect) {
            assert_eq!(g, e, "exact match required");
        }
        // first iterate: alpha_hat_3 = 0.54 / sqrt(0.30)
        let a3 = 0.54 / 0.30f64.sqrt();
        assert!((a3 - 0.98590).abs() < 1e-5);
    }

    #[test]
    fn search_terminates_immediately_with_tiny_ratio() {
        let train = paper_schedule();
        let hyper = SchedulerHyper::default();
        let mut rng = crate::rng::Rng::seed_from_u64(0);
        let x0 = rng.normal_tensor(&[16]);
        let got = noise_schedule_search(
            &ZeroEps,
            &ConstRatio(1e-12),
            &hyper,
            &train,
            &x0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(got, vec![0.70]);
    }

    #[test]
    fn search_output_is_nondecreasing_and_bounded() {
        let train = paper_schedule();
        let hyper = SchedulerHyper::default();
        for ratio in [0.3, 0.5, 0.9, 0.999] {
            let mut rng = crate::rng::Rng::seed_from_u64(1);
            let x0 = rng.normal_tensor(&[16]);
            let got = noise_schedule_search(
                &ZeroEps,
                &ConstRatio(ratio),
                &hyper,
                &train,
                &x0,
                &mut rng,
            )
            .unwrap();
            assert!(got.len() <= hyper.n);
            for w in got.windows(2) {
                assert!(w[0] <= w[1], "collected betas must increase with t");
            }
            assert!(got.iter().all(|&b| b >= train.beta(1)));
        }
    }

    #[test]
    fn alignment_boundary_cases() {
        let train = paper_schedule();
        // alpha exactly l_t maps to t; alpha exactly l_{t+1} maps to t+1
        for t in [1usize, 17, 500, 999] {
            let (tm, clamped) = align_alpha_to_step(train.alpha(t), &train);
            assert!(!clamped);
            assert!((tm - t as f64).abs() < 1e-9, "t {t} -> {tm}");
        }
        // midpoint interpolates linearly
        let mid = (train.alpha(10) + train.alpha(11)) / 2.0;
        let (tm, _) = align_alpha_to_step(mid, &train);
        assert!((tm - 10.5).abs() < 1e-9);
        // clamps with flag
        let (lo, c1) = align_alpha_to_step(0.9999999, &train);
        assert!(c1 && lo == 1.0);
        let (hi, c2) = align_alpha_to_step(1e-6, &train);
        assert!(c2 && hi == 1000.0);
    }

    #[test]
    fn alignment_matches_exhaustive_oracle_on_paper_schedule() {
        let train = paper_schedule();
        let beta_hat = vec![3.2176e-4, 2.5743e-3, 2.5376e-2, 7.0414e-1];
        let sched = align_schedule(&beta_hat, &train).unwrap();
        let t_m = sched.t_m.as_ref().unwrap();

        // brute-force oracle scanning all intervals
        let l = train.alphas();
        let mut prod = 1.0;
        for (s, &bh) in beta_hat.iter().enumerate() {
            prod *= (1.0 - bh).sqrt();
            let mut oracle = None;
            for t in 1..l.len() {
                let (lt, lt1) = (l[t - 1], l[t]);
                if prod <= lt && prod >= lt1 {
                    oracle = Some(t as f64 + (lt - prod) / (lt - lt1));
                    break;
                }
            }
            let oracle = oracle.expect("amplitude must land in some interval");
            assert!(
                (t_m[s] - oracle).abs() < 1e-9,
                "s={}: {} vs oracle {}",
                s + 1,
                t_m[s],
                oracle
            );
        }
        for w in t_m.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(t_m.iter().all(|&t| (1.0..=1000.0).contains(&t)));
    }

    #[test]
    fn continuous_alpha_sampling_bounds() {
        let train = paper_schedule();
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let a = continuous_alpha_sample(1, &train, &mut rng).unwrap();
            assert!(train.alpha(1) <= a && a <= 1.0);
            let b = continuous_alpha_sample(500, &train, &mut rng).unwrap();
            assert!(train.alpha(500) <= b && b <= train.alpha(499));
        }
    }

    #[test]
    fn continuous_alpha_uniformity_ks_test() {
        // Kolmogorov-Smirnov against the uniform CDF on [alpha_t, alpha_{t-1}]
        let train = paper_schedule();
        let mut rng = crate::rng::Rng::seed_from_u64(6);
        let t = 500;
        let (lo, hi) = (train.alpha(t), train.alpha(t - 1));
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|_| continuous_alpha_sample(t, &train, &mut rng).unwrap())
            .collect();
        draws.sort_by(f64::total_cmp);
        let mut d = 0.0f64;
        for (i, &x) in draws.iter().enumerate() {
            let cdf = (x - lo) / (hi - lo);
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            d = d.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        // critical value at significance 0.01: 1.63 / sqrt(n)
        let crit = 1.63 / (n as f64).sqrt();
        assert!(d < crit, "KS statistic {d} >= {crit}");
    }

    #[test]
    fn schedule_file_round_trip() {
        let dir = std::env::temp_dir().join("diffvox-sched-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.json");
        let train = paper_schedule();
        let aligned = align_schedule(&[3.2176e-4, 2.5743e-3, 2.5376e-2, 7.0414e-1], &train).unwrap();
        let file = ScheduleFile {
            t: 1000,
            beta_lo: 1e-4,
            beta_hi: 5e-3,
            beta_hat: aligned.beta_hat.clone(),
            t_m: aligned.t_m.clone().unwrap(),
            source: ScheduleSource::Predictor,
        };
        file.save(&path).unwrap();
        let back = ScheduleFile::load(&path).unwrap();
        assert_eq!(back.beta_hat, file.beta_hat);
        assert_eq!(back.t_m, file.t_m);
        assert_eq!(back.source, ScheduleSource::Predictor);
        assert!(back.sampling_schedule().unwrap().is_aligned());
        // unknown keys rejected
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ScheduleFile>(v).is_err());
    }

    #[test]
    fn marginal_consistency_chained_vs_closed_form() {
        // chaining q(x_t | x_{t-1}) for t steps matches the closed-form
        // marginal on a scalar, within 4 standard errors over 100k draws
        let train = paper_schedule();
        let x0 = 0.8f64;
        let n = 100_000;
        let checkpoints = [1usize, 100, 500, 1000];
        let mut rng = crate::rng::Rng::seed_from_u64(12);
        let mut sums = [0.0f64; 4];
        let mut sq_sums = [0.0f64; 4];
        for _ in 0..n {
            let mut x = x0;
            let mut ci = 0;
            for t in 1..=1000 {
                x = (1.0 - train.beta(t)).sqrt() * x + train.beta(t).sqrt() * rng.normal();
                if checkpoints[ci] == t {
                    sums[ci] += x;
                    sq_sums[ci] += x * x;
                    ci += 1;
                    if ci == checkpoints.len() {
                        break;
                    }
                }
            }
        }
        for (i, &t) in checkpoints.iter().enumerate() {
            let mean = sums[i] / n as f64;
            let var = sq_sums[i] / n as f64 - mean * mean;
            let want_mean = train.alpha(t) * x0;
            let want_var = 1.0 - train.alpha(t) * train.alpha(t);
            let se_mean = want_var.sqrt() / (n as f64).sqrt();
            let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!(
                (mean - want_mean).abs() < 4.0 * se_mean,
                "t={t}: mean {mean} vs {want_mean}"
            );
            assert!(
                (var - want_var).abs() < 4.0 * se_var,
                "t={t}: var {var} vs {want_var}"
            );
        }
    }
}
