//! Sensitive ranges, knowledge probabilities λ, composed weights α*, and
//! truncation masses `P(R_i | θ)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cdf_at_log, predictive_log_draws, PosteriorDraws, Stage, ThetaDraw};
use crate::rng::RngContract;
use crate::stats::normal_cdf;
use crate::weights::RiskWeights;

/// Sensitive interval for one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordRange {
    /// The whole support: nothing is publicly known.
    Unbounded,
    /// `[lower · x_i, upper · x_i]` with `0 < lower ≤ 1 ≤ upper`.
    Multiplicative { lower: f64, upper: f64 },
    /// A fixed interval `[lower, upper]` that must contain `x_i`.
    Absolute { lower: f64, upper: f64 },
}

impl RecordRange {
    pub fn multiplicative(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && lower <= 1.0 && upper >= 1.0 && lower < upper && upper.is_finite()) {
            return Err(Error::Range(format!(
                "multipliers ({lower}, {upper}) must satisfy 0 < a ≤ 1 ≤ b, a < b"
            )));
        }
        Ok(RecordRange::Multiplicative { lower, upper })
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self, RecordRange::Unbounded)
    }

    /// Interval endpoints on the log scale for a record with outcome `x`.
    pub fn log_bounds(&self, x: f64) -> (f64, f64) {
        match *self {
            RecordRange::Unbounded => (f64::NEG_INFINITY, f64::INFINITY),
            RecordRange::Multiplicative { lower, upper } => {
                let y = x.ln();
                (y + lower.ln(), y + upper.ln())
            }
            RecordRange::Absolute { lower, upper } => (lower.ln(), upper.ln()),
        }
    }

    /// Interval endpoints on the outcome scale.
    pub fn bounds(&self, x: f64) -> (f64, f64) {
        match *self {
            RecordRange::Unbounded => (0.0, f64::INFINITY),
            RecordRange::Multiplicative { lower, upper } => (lower * x, upper * x),
            RecordRange::Absolute { lower, upper } => (lower, upper),
        }
    }

    fn validate(&self, x: f64) -> Result<()> {
        match *self {
            RecordRange::Unbounded => Ok(()),
            RecordRange::Multiplicative { lower, upper } => RecordRange::multiplicative(lower, upper).map(|_| ()),
            RecordRange::Absolute { lower, upper } => {
                if !(lower >= 0.0 && lower < upper && lower <= x && x <= upper) {
                    Err(Error::Range(format!(
                        "[{lower}, {upper}] must be a proper interval containing {x}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// One sensitive range per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    ranges: Vec<RecordRange>,
}

impl RangeSpec {
    pub fn new(ranges: Vec<RecordRange>) -> Self {
        Self { ranges }
    }

    pub fn unbounded(n: usize) -> Self {
        Self::new(vec![RecordRange::Unbounded; n])
    }

    /// The same multiplier pair `(a, b)` for every record.
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Ok(Self::new(vec![RecordRange::multiplicative(lower, upper)?; n]))
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn get(&self, i: usize) -> &RecordRange {
        &self.ranges[i]
    }

    pub fn records(&self) -> &[RecordRange] {
        &self.ranges
    }

    pub fn is_all_unbounded(&self) -> bool {
        self.ranges.iter().all(RecordRange::is_unbounded)
    }

    /// Checks lengths and that every `x_i` lies in its own range.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.len() != data.n() {
            return Err(Error::Dimension(format!(
                "{} ranges for {} records",
                self.len(),
                data.n()
            )));
        }
        for (i, r) in self.ranges.iter().enumerate() {
            r.validate(data.outcome(i))
                .map_err(|e| Error::Range(format!("record {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Monte Carlo estimates of `λ_i = Pr(x*_i ∉ R_i)` under the stage-1
/// posterior predictive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeProbs {
    pub lambda: Vec<f64>,
    pub draws: usize,
    pub se: Vec<f64>,
}

impl KnowledgeProbs {
    /// λ = 0 everywhere, as for unbounded ranges.
    pub fn zeros(n: usize, draws: usize) -> Self {
        Self {
            lambda: vec![0.0; n],
            draws,
            se: vec![0.0; n],
        }
    }

    pub fn from_lambda(lambda: Vec<f64>, draws: usize) -> Result<Self> {
        if let Some(l) = lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Range(format!("lambda {l} outside [0, 1]")));
        }
        let se = lambda.iter().map(|&l| binomial_se(l, draws)).collect();
        Ok(Self { lambda, draws, se })
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }
}

fn binomial_se(p: f64, s: usize) -> f64 {
    (p * (1.0 - p) / s as f64).sqrt()
}

/// Estimates λ from `S` predictive draws per record.
///
/// Record `i` uses substream `(seed, "predictive", i)`, the same stream as
/// [`crate::model::predictive_draw`], so estimates for different ranges under
/// one seed share their draws. A draw on an endpoint counts as inside.
pub fn estimate_lambda(
    posterior: &PosteriorDraws,
    data: &Dataset,
    ranges: &RangeSpec,
    s: usize,
    seed: u64,
) -> Result<KnowledgeProbs> {
    ranges.validate(data)?;
    if s == 0 {
        return Err(Error::Config("lambda draw count S must be at least 1".into()));
    }
    if posterior.stage() != Stage::Unweighted {
        return Err(Error::MechanismMismatch(
            "lambda must be estimated from the unweighted stage-1 posterior".into(),
        ));
    }
    let contract = RngContract::new(seed);
    let lambda = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let range = ranges.get(i);
            if range.is_unbounded() {
                return 0.0;
            }
            let (lo, hi) = range.log_bounds(data.outcome(i));
            let mut rng = contract.stream("predictive", i as u64);
            let outside = predictive_log_draws(posterior, data, i, s, &mut rng)
                .into_iter()
                .filter(|&y| y < lo || y > hi)
                .count();
            outside as f64 / s as f64
        })
        .collect();
    KnowledgeProbs::from_lambda(lambda, s)
}

/// `α*_i = λ_i + (1 − λ_i) α_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedWeights {
    pub alpha_star: Vec<f64>,
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
}

pub fn compose_alpha_star(alpha: &RiskWeights, lambda: &KnowledgeProbs) -> Result<ComposedWeights> {
    if alpha.n() != lambda.n() {
        return Err(Error::Dimension(format!(
            "{} weights and {} knowledge probabilities",
            alpha.n(),
            lambda.n()
        )));
    }
    let alpha_star = alpha
        .alpha
        .iter()
        .zip(&lambda.lambda)
        .map(|(&a, &l)| if a == 1.0 { 1.0 } else { (l + (1.0 - l) * a).min(1.0) })
        .collect();
    Ok(ComposedWeights {
        alpha_star,
        alpha: alpha.alpha.clone(),
        lambda: lambda.lambda.clone(),
    })
}

/// Probability mass of a normal between two standardized points, computed
/// on whichever tail keeps precision.
fn standard_normal_mass(za: f64, zb: f64) -> f64 {
    if za > 0.0 {
        normal_cdf(-za) - normal_cdf(-zb)
    } else {
        normal_cdf(zb) - normal_cdf(za)
    }
}

/// `P(b x_i | θ) − P(a x_i | θ)`; exactly 1 for unbounded ranges.
pub fn truncation_mass(theta: &ThetaDraw, data: &Dataset, i: usize, ranges: &RangeSpec) -> f64 {
    let range = ranges.get(i);
    if range.is_unbounded() {
        return 1.0;
    }
    let (lo, hi) = range.log_bounds(data.outcome(i));
    if lo == f64::NEG_INFINITY || hi == f64::INFINITY {
        return cdf_at_log(theta, data.row(i), hi) - cdf_at_log(theta, data.row(i), lo);
    }
    let mu = theta.location(data.row(i));
    let sd = theta.sd();
    standard_normal_mass((lo - mu) / sd, (hi - mu) / sd)
}

/// Base range `(a, b)` for every record, widened to `(a', b')` for records
/// at or above the top-`q` outcome threshold.
///
/// The threshold is the `⌈q n⌉`-th largest outcome, so exactly `⌈q n⌉`
/// records are widened when outcomes are distinct; ties at the threshold are
/// all widened.
pub fn tail_widened_ranges(data: &Dataset, base: (f64, f64), wide: (f64, f64), top_fraction: f64) -> Result<RangeSpec> {
    if !(0.0..1.0).contains(&top_fraction) {
        return Err(Error::Range(format!("top fraction {top_fraction} outside [0, 1)")));
    }
    let base_r = RecordRange::multiplicative(base.0, base.1)?;
    let wide_r = RecordRange::multiplicative(wide.0, wide.1)?;
    if wide.0 > base.0 || wide.1 < base.1 {
        return Err(Error::Range(format!(
            "wide range ({}, {}) does not contain base range ({}, {})",
            wide.0, wide.1, base.0, base.1
        )));
    }
    let n = data.n();
    // Guard against q·n landing a hair above an integer.
    let k = ((top_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if k == 0 {
        return Ok(RangeSpec::new(vec![base_r; n]));
    }
    let mut sorted = data.outcomes().to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[n - k.min(n)];
    Ok(RangeSpec::new(
        data.outcomes()
            .iter()
            .map(|&x| if x >= threshold { wide_r } else { base_r })
            .collect(),
    ))
}

impl ComposedWeights {
    pub fn write_csv(&self, se: &[f64], path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["record", "lambda", "se", "alpha", "alpha_star"])?;
        let rows = self.lambda.iter().zip(se).zip(self.alpha.iter().zip(&self.alpha_star));
        for (i, ((l, s), (a, star))) in rows.enumerate() {
            w.write_record(&[
                i.to_string(),
                l.to_string(),
                s.to_string(),
                a.to_string(),
                star.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::data::INTERCEPT_LABEL;

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

    fn point(mean: f64, sigma2: f64, n: usize) -> PosteriorDraws {
        PosteriorDraws::point(ThetaDraw::new(vec![mean], sigma2).unwrap(), n)
    }

    #[test]
    fn range_validation() {
        assert!(RecordRange::multiplicative(0.4, 1.8).is_ok());
        assert!(RecordRange::multiplicative(1.2, 1.8).is_err());
        assert!(RecordRange::multiplicative(0.0, 1.8).is_err());
        assert!(RecordRange::multiplicative(0.5, 0.9).is_err());
        let d = intercept_only(&[1.0, 2.0]);
        let bad = RangeSpec::new(vec![RecordRange::Absolute { lower: 1.5, upper: 3.0 }; 2]);
        assert!(bad.validate(&d).is_err());
        assert!(RangeSpec::unbounded(3).validate(&d).is_err());
    }

    #[test]
    fn unbounded_lambda_is_exactly_zero() {
        let d = intercept_only(&[1.0, 2.0, 3.0]);
        let k = estimate_lambda(&point(0.0, 1.0, 3), &d, &RangeSpec::unbounded(3), 100, 1).unwrap();
        assert_eq!(k.lambda, vec![0.0; 3]);
    }

    #[test]
    fn lambda_matches_normal_cdf_oracle() {
        let d = intercept_only(&[1.0, 1.0]);
        let oracle = 1.0 - (normal_cdf(1.8f64.ln()) - normal_cdf(0.4f64.ln()));
        assert_abs_diff_eq!(oracle, 0.458, epsilon = 1e-3);
        let k = estimate_lambda(
            &point(0.0, 1.0, 2),
            &d,
            &RangeSpec::uniform(2, 0.4, 1.8).unwrap(),
            1000,
            3,
        )
        .unwrap();
        let se = binomial_se(oracle, 1000);
        assert!((k.lambda[0] - oracle).abs() < 3.0 * se, "{} vs {oracle}", k.lambda[0]);
    }

    #[test]
    fn degenerate_predictive_inside_range() {
        let d = intercept_only(&[1.0, 1.0]);
        let k = estimate_lambda(
            &point(0.1, 1e-16, 2),
            &d,
            &RangeSpec::uniform(2, 0.4, 1.8).unwrap(),
            500,
            3,
        )
        .unwrap();
        assert_eq!(k.lambda, vec![0.0, 0.0]);
    }

    #[test]
    fn lambda_requires_unweighted_posterior() {
        let d = intercept_only(&[1.0, 2.0]);
        let post = crate::model::fit_pseudo_posterior(&d, &[0.5, 1.0], &Default::default(), 5, 1).unwrap();
        let err = estimate_lambda(&post, &d, &RangeSpec::uniform(2, 0.4, 1.8).unwrap(), 10, 1).unwrap_err();
        assert!(matches!(err, Error::MechanismMismatch(_)));
    }

    #[test]
    fn composition_rules() {
        let w = RiskWeights {
            alpha: vec![0.0, 1.0, 0.5, 0.3],
            raw: vec![1.0; 4],
            scale_constant: 1.0,
            zero_loglik_count: 0,
        };
        let l = KnowledgeProbs::from_lambda(vec![0.3, 0.7, 0.458, 0.0], 1000).unwrap();
        let c = compose_alpha_star(&w, &l).unwrap();
        assert_eq!(c.alpha_star[0], 0.3);
        assert_eq!(c.alpha_star[1], 1.0);
        assert_abs_diff_eq!(c.alpha_star[2], 0.729, epsilon = 1e-12);
        assert_eq!(c.alpha_star[3], 0.3);
    }

    #[test]
    fn truncation_mass_values() {
        let d = intercept_only(&[1.0, 1.0]);
        let theta = ThetaDraw::new(vec![0.0], 1.0).unwrap();
        assert_eq!(truncation_mass(&theta, &d, 0, &RangeSpec::unbounded(2)), 1.0);
        let wide = truncation_mass(&theta, &d, 0, &RangeSpec::uniform(2, 0.4, 1.8).unwrap());
        assert_abs_diff_eq!(wide, 0.542, epsilon = 1e-3);
        let narrow = truncation_mass(&theta, &d, 0, &RangeSpec::uniform(2, 0.6, 1.2).unwrap());
        assert!(narrow < wide);
    }

    #[test]
    fn truncation_mass_keeps_precision_in_upper_tail() {
        let d = intercept_only(&[1.0, 1.0]);
        let theta = ThetaDraw::new(vec![-9.0], 1.0).unwrap();
        let m = truncation_mass(&theta, &d, 0, &RangeSpec::uniform(2, 0.6, 1.2).unwrap());
        assert!(m > 0.0 && m < 1e-15, "{m}");
    }

    #[test]
    fn tail_widening_counts() {
        let xs: Vec<f64> = (1..=2000).map(|k| k as f64 * 0.37 + 0.1).collect();
        let d = intercept_only(&xs);
        let count = |q| {
            tail_widened_ranges(&d, (0.4, 1.8), (0.2, 2.4), q)
                .unwrap()
                .records()
                .iter()
                .filter(|r| matches!(r, RecordRange::Multiplicative { lower, .. } if *lower == 0.2))
                .count()
        };
        assert_eq!(count(0.0), 0);
        assert_eq!(count(0.01), 20);
        assert_eq!(count(0.05), 100);
        assert_eq!(count(0.10), 200);

        let d5 = intercept_only(&[3.0, 1.0, 5.0, 2.0, 4.0]);
        let r = tail_widened_ranges(&d5, (0.4, 1.8), (0.2, 2.4), 1.0 - 1.0 / 5.0).unwrap();
        let widened: Vec<bool> = r
            .records()
            .iter()
            .map(|r| matches!(r, RecordRange::Multiplicative { lower, .. } if *lower == 0.2))
            .collect();
        assert_eq!(widened, vec![true, false, true, true, true]);
    }

    #[test]
    fn tail_widening_ties_and_errors() {
        let d = intercept_only(&[1.0, 2.0, 2.0, 2.0]);
        let r = tail_widened_ranges(&d, (0.4, 1.8), (0.2, 2.4), 0.25).unwrap();
        let n_wide = r
            .records()
            .iter()
            .filter(|r| matches!(r, RecordRange::Multiplicative { lower, .. } if *lower == 0.2))
            .count();
        assert_eq!(n_wide, 3);
        assert!(tail_widened_ranges(&d, (0.4, 1.8), (0.5, 2.4), 0.1).is_err());
        assert!(tail_widened_ranges(&d, (0.4, 1.8), (0.2, 1.5), 0.1).is_err());
        assert!(tail_widened_ranges(&d, (0.4, 1.8), (0.2, 2.4), 1.0).is_err());
    }
}
