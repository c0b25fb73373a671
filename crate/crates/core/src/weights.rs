//! Risk weights α from a first-stage unweighted fit, and scaling of those
//! weights to hit a target budget.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{log_density, PosteriorDraws, ScaleMode, Stage};

/// `n × M` matrix of `f_{θ_m}(x_i)`, row-major by record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikMatrix {
    values: Vec<f64>,
    n: usize,
    m: usize,
    stage: Stage,
}

impl LoglikMatrix {
    pub fn from_rows(values: Vec<f64>, n: usize, m: usize, stage: Stage) -> Result<Self> {
        if n == 0 || m == 0 || values.len() != n * m {
            return Err(Error::Dimension(format!(
                "log-likelihood matrix with {} entries is not {n}×{m}",
                values.len()
            )));
        }
        Ok(Self { values, n, m, stage })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn get(&self, i: usize, m: usize) -> f64 {
        self.values[i * self.m + m]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    /// `max_m |f_{θ_m}(x_i)|` per record.
    pub fn max_abs_by_record(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
            .collect()
    }
}

/// Evaluates every record under every posterior draw.
pub fn loglik_matrix(posterior: &PosteriorDraws, data: &Dataset, mode: ScaleMode) -> Result<LoglikMatrix> {
    if posterior.weights().len() != data.n() {
        return Err(Error::Dimension(format!(
            "posterior fitted on {} records, dataset has {}",
            posterior.weights().len(),
            data.n()
        )));
    }
    let m = posterior.m();
    let values: Vec<f64> = (0..data.n())
        .into_par_iter()
        .flat_map_iter(|i| posterior.draws().iter().map(move |t| log_density(t, data, i, mode)))
        .collect();
    LoglikMatrix::from_rows(values, data.n(), m, posterior.stage())
}

/// Per-record weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskWeights {
    pub alpha: Vec<f64>,
    /// `1 / max_m |f|` before normalisation; `+∞` when the maximum is zero.
    pub raw: Vec<f64>,
    pub scale_constant: f64,
    /// Records whose maximum absolute log-likelihood was zero.
    pub zero_loglik_count: usize,
}

impl RiskWeights {
    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn unit(n: usize) -> Self {
        Self {
            alpha: vec![1.0; n],
            raw: vec![f64::INFINITY; n],
            scale_constant: 1.0,
            zero_loglik_count: 0,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["record", "alpha", "raw", "scale_constant"])?;
        for i in 0..self.n() {
            w.write_record(&[
                i.to_string(),
                self.alpha[i].to_string(),
                self.raw[i].to_string(),
                self.scale_constant.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// `α_i = min(1, raw_i / max_j raw_j)` with `raw_i = 1 / max_m |f_{θ_m}(x_i)|`.
///
/// The riskiest record gets the smallest positive weight and the least risky
/// gets exactly 1. A record with zero maximum gets `α_i = 1` and is counted in
/// `zero_loglik_count`.
pub fn compute_alpha(ll: &LoglikMatrix) -> RiskWeights {
    let maxima = ll.max_abs_by_record();
    let raw: Vec<f64> = maxima
        .iter()
        .map(|&l| if l > 0.0 { 1.0 / l } else { f64::INFINITY })
        .collect();
    let zero_loglik_count = raw.iter().filter(|r| r.is_infinite()).count();
    if zero_loglik_count > 0 {
        log::warn!("{zero_loglik_count} records have zero maximum |log-likelihood|; weight set to 1");
    }
    let top = raw.iter().copied().filter(|r| r.is_finite()).fold(0.0f64, f64::max);
    let alpha = raw
        .iter()
        .map(|&r| if r.is_finite() { (r / top).min(1.0) } else { 1.0 })
        .collect();
    RiskWeights {
        alpha,
        raw,
        scale_constant: 1.0,
        zero_loglik_count,
    }
}

/// Multiplies every weight by `c ∈ (0, 1]`.
pub fn scale_weights(w: &RiskWeights, c: f64) -> Result<RiskWeights> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Weights(format!("scale constant {c} outside (0, 1]")));
    }
    Ok(RiskWeights {
        alpha: w.alpha.iter().map(|a| c * a).collect(),
        raw: w.raw.clone(),
        scale_constant: w.scale_constant * c,
        zero_loglik_count: w.zero_loglik_count,
    })
}

/// One probe of the calibration search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProbe {
    pub scale: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scale: f64,
    pub epsilon: f64,
    pub target: f64,
    pub converged: bool,
    pub trace: Vec<CalibrationProbe>,
}

impl Calibration {
    pub fn relative_error(&self) -> f64 {
        (self.epsilon - self.target).abs() / self.target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            tolerance: 0.02,
            max_iters: 25,
        }
    }
}

/// Bisection on the scale constant `c ∈ (0, 1]`.
///
/// `budget_at` must refit the mechanism with weights scaled by `c` and return
/// its ε. The search assumes ε grows with `c`; refitting moves the posterior
/// draws, so this holds only approximately and the trace is kept for audit.
pub fn calibrate_scale<F>(mut budget_at: F, target: f64, settings: CalibrationSettings) -> Result<Calibration>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Config(format!("target epsilon must be positive, got {target}")));
    }
    if !(settings.tolerance > 0.0) || settings.max_iters == 0 {
        return Err(Error::Config(
            "calibration needs tolerance > 0 and max_iters ≥ 1".into(),
        ));
    }
    let within = |eps: f64| (eps - target).abs() / target <= settings.tolerance;

    let eps_one = budget_at(1.0)?;
    let mut trace = vec![CalibrationProbe {
        scale: 1.0,
        epsilon: eps_one,
    }];
    if within(eps_one) {
        return Ok(Calibration {
            scale: 1.0,
            epsilon: eps_one,
            target,
            converged: true,
            trace,
        });
    }
    if eps_one < target {
        return Err(Error::TargetAboveBudget {
            target,
            budget: eps_one,
        });
    }

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = trace[0];
    for _ in 0..settings.max_iters {
        let mid = 0.5 * (lo + hi);
        let eps = budget_at(mid)?;
        let probe = CalibrationProbe {
            scale: mid,
            epsilon: eps,
        };
        trace.push(probe);
        if (eps - target).abs() < (best.epsilon - target).abs() {
            best = probe;
        }
        if within(eps) {
            return Ok(Calibration {
                scale: mid,
                epsilon: eps,
                target,
                converged: true,
                trace,
            });
        }
        if eps > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    log::warn!(
        "calibration did not reach tolerance {} in {} iterations; best scale {} gives epsilon {}",
        settings.tolerance,
        settings.max_iters,
        best.scale,
        best.epsilon
    );
    Ok(Calibration {
        scale: best.scale,
        epsilon: best.epsilon,
        target,
        converged: false,
        trace,
    })
}
