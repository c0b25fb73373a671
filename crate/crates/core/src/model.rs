//! The synthesizer: a normal regression of `log x` on the predictors with a
//! conjugate normal–inverse-gamma prior.
//!
//! Record `i` enters the likelihood raised to its weight `w_i ∈ [0, 1]`, which
//! for the normal family is the same as scaling its sufficient-statistic
//! contributions by `w_i`. The pseudo posterior is therefore available in
//! closed form and sampled exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{RngContract, StreamRng};
use crate::stats::{normal_cdf, LN_2PI};

/// Conjugate prior: `β | σ² ~ N(m0, σ² / κ · I)`, `σ² ~ InvGamma(shape, rate)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Prior coefficient mean. Empty means the zero vector.
    pub coef_mean: Vec<f64>,
    /// κ, the prior precision scaling of the coefficients.
    pub precision_scale: f64,
    pub shape: f64,
    pub rate: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            coef_mean: Vec::new(),
            precision_scale: 0.01,
            shape: 1.0,
            rate: 1.0,
        }
    }
}

impl PriorConfig {
    fn validate(&self, p: usize) -> Result<()> {
        if !(self.precision_scale > 0.0) || !(self.shape > 0.0) || !(self.rate > 0.0) {
            return Err(Error::Config(
                "prior precision_scale, shape and rate must be positive".into(),
            ));
        }
        if !self.coef_mean.is_empty() && self.coef_mean.len() != p {
            return Err(Error::Dimension(format!(
                "prior mean has {} entries for {p} coefficients",
                self.coef_mean.len()
            )));
        }
        Ok(())
    }

    fn mean(&self, p: usize) -> DVector<f64> {
        if self.coef_mean.is_empty() {
            DVector::zeros(p)
        } else {
            DVector::from_column_slice(&self.coef_mean)
        }
    }
}

/// One parameter draw θ = (β, σ²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaDraw {
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

impl ThetaDraw {
    pub fn new(beta: Vec<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(Self { beta, sigma2 })
    }

    /// Log-scale location `row · β`.
    pub fn location(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }

    pub fn sd(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// Whether the per-record density is that of `log x_i` or of `x_i`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Density of `log x_i` under the normal regression.
    #[default]
    Normal,
    /// Density of `x_i` itself: the normal density minus `log x_i`.
    Lognormal,
}

/// Unweighted fits feed the risk and knowledge computations; weighted fits
/// are the released mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Unweighted,
    Weighted,
}

/// Weighted sufficient statistics `(XᵀWX, XᵀWy, yᵀWy, Σw)` with `y = log x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub p: usize,
    /// Row-major `p × p`.
    pub xtwx: Vec<f64>,
    pub xtwy: Vec<f64>,
    pub ytwy: f64,
    pub weight_sum: f64,
}

impl SufficientStats {
    pub fn compute(data: &Dataset, weights: &[f64]) -> Self {
        let p = data.p();
        let mut xtwx = vec![0.0; p * p];
        let mut xtwy = vec![0.0; p];
        let mut ytwy = 0.0;
        let mut weight_sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            let row = data.row(i);
            let y = data.outcome(i).ln();
            for a in 0..p {
                let wa = w * row[a];
                xtwy[a] += wa * y;
                for b in 0..p {
                    xtwx[a * p + b] += wa * row[b];
                }
            }
            ytwy += w * y * y;
            weight_sum += w;
        }
        Self {
            p,
            xtwx,
            xtwy,
            ytwy,
            weight_sum,
        }
    }
}

/// Normal–inverse-gamma posterior hyperparameters:
/// `β | σ² ~ N(mean, σ² · precision⁻¹)`, `σ² ~ InvGamma(shape, rate)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NigPosterior {
    pub mean: Vec<f64>,
    /// Row-major `p × p`.
    pub precision: Vec<f64>,
    pub shape: f64,
    pub rate: f64,
}

impl NigPosterior {
    pub fn update(prior: &PriorConfig, stats: &SufficientStats) -> Result<Self> {
        let p = stats.p;
        prior.validate(p)?;
        let m0 = prior.mean(p);
        let k0 = prior.precision_scale;
        let precision = DMatrix::from_row_slice(p, p, &stats.xtwx) + DMatrix::identity(p, p) * k0;
        let rhs = DVector::from_column_slice(&stats.xtwy) + &m0 * k0;
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InsufficientEffectiveSample("posterior precision is singular".into()))?;
        let mean = chol.solve(&rhs);
        let shape = prior.shape + 0.5 * stats.weight_sum;
        let quad = stats.ytwy + k0 * m0.dot(&m0) - mean.dot(&(&precision * &mean));
        // The quadratic form is a weighted residual sum of squares; clamp rounding noise.
        let rate = prior.rate + 0.5 * quad.max(0.0);
        Ok(Self {
            mean: mean.iter().copied().collect(),
            precision: precision.transpose().iter().copied().collect(),
            shape,
            rate,
        })
    }

    /// `E[σ²] = rate / (shape − 1)`, defined for shape > 1.
    pub fn sigma2_mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.rate / (self.shape - 1.0))
    }

    /// Marginal posterior covariance of β: `rate/(shape−1) · precision⁻¹`.
    pub fn beta_covariance(&self) -> Option<Vec<f64>> {
        let p = self.mean.len();
        let s = self.sigma2_mean()?;
        let inv = DMatrix::from_row_slice(p, p, &self.precision).try_inverse()?;
        Some((inv * s).transpose().iter().copied().collect())
    }
}

/// M draws from a (pseudo) posterior plus the weights that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    draws: Vec<ThetaDraw>,
    weights: Vec<f64>,
    stage: Stage,
    hyper: NigPosterior,
}

impl PosteriorDraws {
    pub fn draws(&self) -> &[ThetaDraw] {
        &self.draws
    }

    pub fn m(&self) -> usize {
        self.draws.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn hyper(&self) -> &NigPosterior {
        &self.hyper
    }

    /// Assembles draws directly, e.g. for hand-built test instances.
    pub fn from_parts(draws: Vec<ThetaDraw>, weights: Vec<f64>, hyper: NigPosterior) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Config("need at least one posterior draw".into()));
        }
        let stage = stage_of(&weights);
        Ok(Self {
            draws,
            weights,
            stage,
            hyper,
        })
    }

    /// A single fixed θ with unit weights over `n` records.
    pub fn point(theta: ThetaDraw, n: usize) -> Self {
        let p = theta.beta.len();
        let hyper = NigPosterior {
            mean: theta.beta.clone(),
            precision: vec![0.0; p * p],
            shape: f64::NAN,
            rate: f64::NAN,
        };
        Self {
            draws: vec![theta],
            weights: vec![1.0; n],
            stage: Stage::Unweighted,
            hyper,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let p = self.draws[0].beta.len();
        let mut header = vec!["draw".to_string()];
        header.extend((0..p).map(|k| format!("beta_{k}")));
        header.push("sigma2".into());
        w.write_record(&header)?;
        for (m, d) in self.draws.iter().enumerate() {
            let mut rec = vec![m.to_string()];
            rec.extend(d.beta.iter().map(f64::to_string));
            rec.push(d.sigma2.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn stage_of(weights: &[f64]) -> Stage {
    if weights.iter().all(|&w| w == 1.0) {
        Stage::Unweighted
    } else {
        Stage::Weighted
    }
}

/// Exact draws from the weighted conjugate pseudo posterior.
///
/// Each draw consumes one uniform (σ² by gamma inverse CDF) followed by `p`
/// standard normals, so two fits with the same seed and different weights use
/// identical underlying random numbers.
pub fn fit_pseudo_posterior(
    data: &Dataset,
    weights: &[f64],
    prior: &PriorConfig,
    m: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    if weights.len() != data.n() {
        return Err(Error::Dimension(format!(
            "{} weights for {} records",
            weights.len(),
            data.n()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Weights(format!("weight {w} outside [0, 1]")));
    }
    if m == 0 {
        return Err(Error::Config("draw count M must be at least 1".into()));
    }
    let stats = SufficientStats::compute(data, weights);
    if !(stats.weight_sum > 0.0) {
        return Err(Error::InsufficientEffectiveSample("all weights are zero".into()));
    }
    let hyper = NigPosterior::update(prior, &stats)?;
    let mut rng = RngContract::new(seed).stream("posterior", 0);
    let draws = sample_nig(&hyper, m, &mut rng)?;
    Ok(PosteriorDraws {
        draws,
        weights: weights.to_vec(),
        stage: stage_of(weights),
        hyper,
    })
}

fn sample_nig(hyper: &NigPosterior, m: usize, rng: &mut StreamRng) -> Result<Vec<ThetaDraw>> {
    let p = hyper.mean.len();
    let precision = DMatrix::from_row_slice(p, p, &hyper.precision);
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::InsufficientEffectiveSample("posterior precision is singular".into()))?;
    let upper = chol.l().transpose();
    let precision_gamma =
        Gamma::new(hyper.shape, hyper.rate).map_err(|e| Error::Config(format!("posterior gamma: {e}")))?;
    let mean = DVector::from_column_slice(&hyper.mean);
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let u: f64 = rng.sample(Open01);
        let tau = precision_gamma.inverse_cdf(u);
        let sigma2 = 1.0 / tau;
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        // Lᵀ v = z gives v ~ N(0, Λ⁻¹) when Λ = L Lᵀ.
        let v = upper
            .solve_upper_triangular(&z)
            .expect("cholesky factor is non-singular");
        let beta = &mean + v * sigma2.sqrt();
        out.push(ThetaDraw::new(beta.iter().copied().collect(), sigma2)?);
    }
    Ok(out)
}

/// `log p_θ(x_i)`.
pub fn log_density(theta: &ThetaDraw, data: &Dataset, i: usize, mode: ScaleMode) -> f64 {
    let y = data.outcome(i).ln();
    let r = y - theta.location(data.row(i));
    let normal = -0.5 * (LN_2PI + theta.sigma2.ln()) - r * r / (2.0 * theta.sigma2);
    match mode {
        ScaleMode::Normal => normal,
        ScaleMode::Lognormal => normal - y,
    }
}

/// `P(X_i ≤ value | θ)` for the lognormal outcome.
pub fn cdf(theta: &ThetaDraw, data: &Dataset, i: usize, value: f64) -> f64 {
    cdf_at_log(theta, data.row(i), value.ln())
}

/// Model CDF evaluated at `log value`; `±∞` give 1 and 0.
pub fn cdf_at_log(theta: &ThetaDraw, row: &[f64], log_value: f64) -> f64 {
    if log_value == f64::NEG_INFINITY {
        return 0.0;
    }
    if log_value == f64::INFINITY {
        return 1.0;
    }
    normal_cdf((log_value - theta.location(row)) / theta.sd())
}

/// `S` posterior predictive draws of `log x*_i` by composition: a uniformly
/// chosen θ_m, then `Normal(row_i · β_m, σ²_m)`.
pub fn predictive_log_draws(
    posterior: &PosteriorDraws,
    data: &Dataset,
    i: usize,
    count: usize,
    rng: &mut StreamRng,
) -> Vec<f64> {
    let draws = posterior.draws();
    let row = data.row(i);
    (0..count)
        .map(|_| {
            let theta = &draws[rng.random_range(0..draws.len())];
            let e: f64 = rng.sample(StandardNormal);
            theta.location(row) + theta.sd() * e
        })
        .collect()
}

/// `S` posterior predictive draws of `x*_i`.
pub fn predictive_draw(
    posterior: &PosteriorDraws,
    data: &Dataset,
    i: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Config("predictive draw count must be at least 1".into()));
    }
    let mut rng = RngContract::new(seed).stream("predictive", i as u64);
    Ok(predictive_log_draws(posterior, data, i, count, &mut rng)
        .into_iter()
        .map(f64::exp)
        .collect())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::data::{simulate, SimulationConfig, INTERCEPT_LABEL};

    fn intercept_only(xs: &[f64]) -> Dataset {
        Dataset::new(
            xs.to_vec(),
            vec![1.0; xs.len()],
            1,
            true,
            "y",
            vec![INTERCEPT_LABEL.into()],
        )
        .unwrap()
    }

    #[test]
    fn log_density_hand_values() {
        let e = std::f64::consts::E;
        let d = intercept_only(&[e, e]);
        let theta = ThetaDraw::new(vec![1.0], 1.0).unwrap();
        assert_abs_diff_eq!(
            log_density(&theta, &d, 0, ScaleMode::Normal),
            -0.918_938_533,
            epsilon = 1e-8
        );
        assert_abs_diff_eq!(
            log_density(&theta, &d, 0, ScaleMode::Lognormal),
            -1.918_938_533,
            epsilon = 1e-8
        );

        let off = ThetaDraw::new(vec![1.0 - 3.0], 1.0).unwrap();
        assert_abs_diff_eq!(
            log_density(&off, &d, 0, ScaleMode::Normal),
            -5.418_938_533,
            epsilon = 1e-8
        );
    }

    #[test]
    fn cdf_hand_values() {
        let d = intercept_only(&[1.0, 2.0]);
        let theta = ThetaDraw::new(vec![0.0], 1.0).unwrap();
        assert_abs_diff_eq!(cdf(&theta, &d, 0, 1.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(cdf(&theta, &d, 0, 0.588f64.exp()), 0.7218, epsilon = 1e-4);
        assert_eq!(cdf(&theta, &d, 0, 0.0), 0.0);
        assert_eq!(cdf(&theta, &d, 0, f64::INFINITY), 1.0);
        assert!(cdf(&theta, &d, 0, 1e-300) < 1e-12);
    }

    #[test]
    fn unit_weights_are_unweighted_stage() {
        let d = simulate(&SimulationConfig {
            n: 50,
            ..Default::default()
        })
        .unwrap();
        let post = fit_pseudo_posterior(&d, &vec![1.0; 50], &PriorConfig::default(), 10, 1).unwrap();
        assert_eq!(post.stage(), Stage::Unweighted);
        assert_eq!(post.m(), 10);
        let mut w = vec![1.0; 50];
        w[3] = 0.5;
        let post = fit_pseudo_posterior(&d, &w, &PriorConfig::default(), 10, 1).unwrap();
        assert_eq!(post.stage(), Stage::Weighted);
    }

    #[test]
    fn half_weights_equal_half_sample_update() {
        // Intercept-only: κ = 0.01, m0 = 0, a0 = b0 = 1, y = log x.
        let xs = [0.5, 1.3, 2.2, 4.0, 0.9, 7.1];
        let d = intercept_only(&xs);
        let post = NigPosterior::update(&PriorConfig::default(), &SufficientStats::compute(&d, &[0.5; 6])).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x: &f64| x.ln()).collect();
        let n_eff = 3.0;
        let sum_y = 0.5 * ys.iter().sum::<f64>();
        let sum_y2 = 0.5 * ys.iter().map(|y| y * y).sum::<f64>();
        let lambda = 0.01 + n_eff;
        let mean = sum_y / lambda;
        let shape = 1.0 + n_eff / 2.0;
        let rate = 1.0 + 0.5 * (sum_y2 - lambda * mean * mean);
        assert_abs_diff_eq!(post.mean[0], mean, epsilon = 1e-12);
        assert_abs_diff_eq!(post.precision[0], lambda, epsilon = 1e-12);
        assert_abs_diff_eq!(post.shape, shape, epsilon = 1e-12);
        assert_abs_diff_eq!(post.rate, rate, epsilon = 1e-12);
    }

    #[test]
    fn zero_weights_rejected() {
        let d = intercept_only(&[1.0, 2.0, 3.0]);
        let err = fit_pseudo_posterior(&d, &[0.0; 3], &PriorConfig::default(), 5, 1).unwrap_err();
        assert!(err.to_string().contains("insufficient effective sample"), "{err}");
    }

    #[test]
    fn invalid_weights_rejected() {
        let d = intercept_only(&[1.0, 2.0]);
        assert!(fit_pseudo_posterior(&d, &[1.0, 1.5], &PriorConfig::default(), 5, 1).is_err());
        assert!(fit_pseudo_posterior(&d, &[1.0], &PriorConfig::default(), 5, 1).is_err());
        assert!(fit_pseudo_posterior(&d, &[1.0, 1.0], &PriorConfig::default(), 0, 1).is_err());
    }

    #[test]
    fn fit_is_deterministic_under_seed() {
        let d = simulate(&SimulationConfig {
            n: 100,
            ..Default::default()
        })
        .unwrap();
        let w = vec![0.7; 100];
        let a = fit_pseudo_posterior(&d, &w, &PriorConfig::default(), 20, 5).unwrap();
        let b = fit_pseudo_posterior(&d, &w, &PriorConfig::default(), 20, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn slope_recovered_on_default_simulation() {
        let d = simulate(&SimulationConfig::default()).unwrap();
        let post = fit_pseudo_posterior(&d, &vec![1.0; d.n()], &PriorConfig::default(), 1000, 9).unwrap();
        let slopes: Vec<f64> = post.draws().iter().map(|t| t.beta[1]).collect();
        let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
        let var = slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (slopes.len() - 1) as f64;
        assert!((mean - 1.0).abs() < 3.0 * var.sqrt(), "slope {mean} sd {}", var.sqrt());
    }

    #[test]
    fn degenerate_predictive_hits_location() {
        let d = intercept_only(&[1.0, 2.0]);
        let post = PosteriorDraws::point(ThetaDraw::new(vec![0.3], 1e-16).unwrap(), 2);
        let x = predictive_draw(&post, &d, 0, 1, 4).unwrap();
        assert!(((x[0] - 0.3f64.exp()) / 0.3f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn predictive_median_binomial_check() {
        let d = intercept_only(&[1.0, 2.0]);
        let post = PosteriorDraws::point(ThetaDraw::new(vec![0.8], 2.0).unwrap(), 2);
        let s = 200_000;
        let xs = predictive_draw(&post, &d, 1, s, 17).unwrap();
        let below = xs.iter().filter(|&&x| x <= 0.8f64.exp()).count() as f64 / s as f64;
        let se = (0.25 / s as f64).sqrt();
        assert!((below - 0.5).abs() < 3.0 * se, "{below}");
        assert_eq!(xs, predictive_draw(&post, &d, 1, s, 17).unwrap());
        assert!(predictive_draw(&post, &d, 1, 0, 17).is_err());
    }
}
