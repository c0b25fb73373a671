//! Synthetic data generation from a fitted mechanism and utility scoring
//! against the confidential data.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::PosteriorDraws;
use crate::rng::RngContract;
use crate::stats::{mean, quantile_sorted};

/// How posterior draws are assigned to synthetic records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisMode {
    /// A fresh θ* per synthetic record.
    #[default]
    PerRecord,
    /// One θ* for the whole synthetic dataset.
    PerDataset,
}

impl SynthesisMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "per_record" => Ok(SynthesisMode::PerRecord),
            "per_dataset" => Ok(SynthesisMode::PerDataset),
            other => Err(Error::Config(format!("unknown synthesis mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub outcomes: Vec<f64>,
    pub standard: Option<String>,
    pub draw_indices: Vec<usize>,
    pub seed: u64,
}

/// Posterior predictive synthetic outcomes, one per confidential record.
///
/// Draws come from stream `(seed, "synthesize", 0)` in record order: a draw
/// index then a standard normal per record. Two mechanisms with the same
/// number of draws therefore see the same indices and noise, and identical
/// posteriors yield identical synthetic data.
pub fn synthesize(posterior: &PosteriorDraws, data: &Dataset, seed: u64, mode: SynthesisMode) -> SyntheticDataset {
    let mut rng = RngContract::new(seed).stream("synthesize", 0);
    let m = posterior.m();
    let fixed = match mode {
        SynthesisMode::PerDataset => Some(rng.random_range(0..m)),
        SynthesisMode::PerRecord => None,
    };
    let mut outcomes = Vec::with_capacity(data.n());
    let mut draw_indices = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let idx = fixed.unwrap_or_else(|| rng.random_range(0..m));
        let theta = &posterior.draws()[idx];
        let e: f64 = rng.sample(StandardNormal);
        let x = (theta.location(data.row(i)) + theta.sd() * e).exp();
        // exp can round to 0 or overflow for absurd draws; keep the support.
        outcomes.push(x.clamp(f64::MIN_POSITIVE, f64::MAX));
        draw_indices.push(idx);
    }
    SyntheticDataset {
        outcomes,
        standard: None,
        draw_indices,
        seed,
    }
}

impl SyntheticDataset {
    pub fn tagged(mut self, standard: impl Into<String>) -> Self {
        self.standard = Some(standard.into());
        self
    }

    /// Writes the synthetic outcomes with the confidential predictors, in the
    /// input CSV schema.
    pub fn write_csv(&self, data: &Dataset, path: impl AsRef<std::path::Path>) -> Result<()> {
        data.with_outcomes(self.outcomes.clone())?.write_csv(path)
    }
}

/// Kolmogorov-style maximum and mean squared ECDF differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcdfMetrics {
    pub max_ecdf: f64,
    pub avg_ecdf: f64,
}

/// Compares two empirical CDFs at every point of the merged sample
/// (`n₁ + n₂` points, duplicates kept).
pub fn ecdf_metrics(confidential: &[f64], synthetic: &[f64]) -> Result<EcdfMetrics> {
    if confidential.is_empty() || synthetic.is_empty() {
        return Err(Error::Dimension("ECDF metrics need two non-empty samples".into()));
    }
    let mut a = confidential.to_vec();
    let mut b = synthetic.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut merged: Vec<f64> = a.iter().chain(&b).copied().collect();
    merged.sort_by(f64::total_cmp);

    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut max_ecdf = 0.0f64;
    let mut sum_sq = 0.0;
    for &v in &merged {
        while ia < a.len() && a[ia] <= v {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= v {
            ib += 1;
        }
        let d = (ia as f64 / na - ib as f64 / nb).abs();
        max_ecdf = max_ecdf.max(d);
        sum_sq += d * d;
    }
    Ok(EcdfMetrics {
        max_ecdf,
        avg_ecdf: sum_sq / merged.len() as f64,
    })
}

/// Mean, median and 90th percentile (linear interpolation between order
/// statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileStats {
    pub mean: f64,
    pub median: f64,
    pub q90: f64,
}

pub fn quantile_stats(values: &[f64]) -> Result<QuantileStats> {
    if values.is_empty() {
        return Err(Error::Dimension("quantiles of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(QuantileStats {
        mean: mean(&v),
        median: quantile_sorted(&v, 0.5),
        q90: quantile_sorted(&v, 0.9),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub max_ecdf: f64,
    pub avg_ecdf: f64,
    pub synthetic: QuantileStats,
    pub confidential: QuantileStats,
    /// Number of synthetic datasets averaged into this report.
    pub replicates: usize,
}

impl UtilityReport {
    /// Absolute distances of the synthetic mean, median and q90 from the
    /// confidential ones.
    pub fn closeness(&self) -> QuantileStats {
        QuantileStats {
            mean: (self.synthetic.mean - self.confidential.mean).abs(),
            median: (self.synthetic.median - self.confidential.median).abs(),
            q90: (self.synthetic.q90 - self.confidential.q90).abs(),
        }
    }
}

/// Scores one or more synthetic datasets; metrics are averaged across them.
pub fn utility_report(confidential: &Dataset, synthetic: &[SyntheticDataset]) -> Result<UtilityReport> {
    if synthetic.is_empty() {
        return Err(Error::Dimension("no synthetic datasets to score".into()));
    }
    let k = synthetic.len() as f64;
    let mut max_ecdf = 0.0;
    let mut avg_ecdf = 0.0;
    let mut stats = QuantileStats {
        mean: 0.0,
        median: 0.0,
        q90: 0.0,
    };
    for s in synthetic {
        let e = ecdf_metrics(confidential.outcomes(), &s.outcomes)?;
        max_ecdf += e.max_ecdf / k;
        avg_ecdf += e.avg_ecdf / k;
        let q = quantile_stats(&s.outcomes)?;
        stats.mean += q.mean / k;
        stats.median += q.median / k;
        stats.q90 += q.q90 / k;
    }
    Ok(UtilityReport {
        max_ecdf,
        avg_ecdf,
        synthetic: stats,
        confidential: quantile_stats(confidential.outcomes())?,
        replicates: synthetic.len(),
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::data::INTERCEPT_LABEL;
    use crate::model::ThetaDraw;

    #[test]
    fn ecdf_identity_and_disjoint() {
        let a = [1.0, 5.0, 2.0];
        assert_eq!(
            ecdf_metrics(&a, &a).unwrap(),
            EcdfMetrics {
                max_ecdf: 0.0,
                avg_ecdf: 0.0
            }
        );
        assert_eq!(ecdf_metrics(&[1.0, 2.0], &[3.0, 4.0]).unwrap().max_ecdf, 1.0);
        assert!(ecdf_metrics(&[], &[1.0]).is_err());
    }

    #[test]
    fn ecdf_hand_enumeration() {
        // Merged support 1,1,2,2,3,4: differences 0,0,0,0,1/3,0.
        let m = ecdf_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_abs_diff_eq!(m.max_ecdf, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.avg_ecdf, 1.0 / 54.0, epsilon = 1e-15);
    }

    #[test]
    fn quantiles() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let q = quantile_stats(&v).unwrap();
        assert_abs_diff_eq!(q.q90, 9.1, epsilon = 1e-12);
        assert_abs_diff_eq!(q.median, 5.5, epsilon = 1e-12);
        assert_abs_diff_eq!(q.mean, 5.5, epsilon = 1e-12);
        let c = quantile_stats(&[2.5; 7]).unwrap();
        assert_eq!((c.mean, c.median, c.q90), (2.5, 2.5, 2.5));
        assert!(quantile_stats(&[]).is_err());
    }

    fn data(n: usize) -> Dataset {
        Dataset::new(
            (1..=n).map(|k| k as f64).collect(),
            vec![1.0; n],
            1,
            true,
            "y",
            vec![INTERCEPT_LABEL.into()],
        )
        .unwrap()
    }

    #[test]
    fn degenerate_posterior_synthesis() {
        let d = data(20);
        let post = PosteriorDraws::point(ThetaDraw::new(vec![0.7], 1e-16).unwrap(), 20);
        let s = synthesize(&post, &d, 5, SynthesisMode::PerRecord);
        assert_eq!(s.outcomes.len(), 20);
        for x in &s.outcomes {
            assert!(((x - 0.7f64.exp()) / 0.7f64.exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn seeds_change_output() {
        let d = data(50);
        let post = PosteriorDraws::point(ThetaDraw::new(vec![0.0], 1.0).unwrap(), 50);
        let a = synthesize(&post, &d, 1, SynthesisMode::PerRecord);
        let b = synthesize(&post, &d, 2, SynthesisMode::PerRecord);
        assert_ne!(a.outcomes, b.outcomes);
        assert_eq!(a, synthesize(&post, &d, 1, SynthesisMode::PerRecord));
        assert!(a.outcomes.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn per_dataset_mode_uses_one_draw() {
        let d = data(30);
        let draws = (0..5)
            .map(|k| ThetaDraw::new(vec![k as f64], 1.0).unwrap())
            .collect::<Vec<_>>();
        let post = PosteriorDraws::from_parts(
            draws.clone(),
            vec![1.0; 30],
            PosteriorDraws::point(draws[0].clone(), 30).hyper().clone(),
        )
        .unwrap();
        let s = synthesize(&post, &d, 3, SynthesisMode::PerDataset);
        assert!(s.draw_indices.iter().all(|&i| i == s.draw_indices[0]));
        let r = synthesize(&post, &d, 3, SynthesisMode::PerRecord);
        assert!(r.draw_indices.iter().any(|&i| i != r.draw_indices[0]));
    }

    #[test]
    fn report_averages_replicates() {
        let d = data(10);
        let s1 = SyntheticDataset {
            outcomes: d.outcomes().to_vec(),
            standard: None,
            draw_indices: vec![0; 10],
            seed: 0,
        };
        let s2 = SyntheticDataset {
            outcomes: d.outcomes().iter().map(|x| x + 100.0).collect(),
            ..s1.clone()
        };
        let r = utility_report(&d, &[s1, s2]).unwrap();
        assert_eq!(r.replicates, 2);
        assert_abs_diff_eq!(r.max_ecdf, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.synthetic.mean, 55.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.closeness().mean, 50.0, epsilon = 1e-12);
    }
}
