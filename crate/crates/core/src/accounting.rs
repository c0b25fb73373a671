//! Lipschitz sensitivity Δ and budget ε = 2Δ under the four standards.
//!
//! All standards share one shape: the per-record, per-draw value is the
//! log-likelihood of the sensitive complement of record `i`'s contribution,
//! and Δ is its largest absolute value over records and draws of the
//! mechanism's own posterior.
//!
//! | standard         | sensitive term                     | mechanism weights |
//! |------------------|------------------------------------|-------------------|
//! | unweighted       | `f`                                | 1                 |
//! | weighted         | `α f`                              | α                 |
//! | range-averaged   | `(1 − λ) α f`                      | α* = λ + (1−λ) α  |
//! | range-truncated  | `α f − log P(R | θ)`               | α                 |

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{log_density, PosteriorDraws, ScaleMode, Stage, ThetaDraw};
use crate::range::{compose_alpha_star, truncation_mass, KnowledgeProbs, RangeSpec};
use crate::weights::RiskWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardKind {
    Unweighted,
    Weighted,
    RangeAveraged,
    RangeTruncated,
}

impl StandardKind {
    pub fn needs_ranges(self) -> bool {
        matches!(self, StandardKind::RangeAveraged | StandardKind::RangeTruncated)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StandardKind::Unweighted => "unweighted",
            StandardKind::Weighted => "weighted",
            StandardKind::RangeAveraged => "range_averaged",
            StandardKind::RangeTruncated => "range_truncated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "unweighted" => Ok(StandardKind::Unweighted),
            "weighted" | "adp" => Ok(StandardKind::Weighted),
            "range_averaged" | "averaged" | "avg" => Ok(StandardKind::RangeAveraged),
            "range_truncated" | "truncated" | "trunc" => Ok(StandardKind::RangeTruncated),
            other => Err(Error::Config(format!("unknown standard {other:?}"))),
        }
    }
}

impl fmt::Display for StandardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a standard needs besides the posterior and the data.
#[derive(Debug, Clone, Copy)]
pub struct AccountingInputs<'a> {
    /// Risk weights α (already scaled, if scaling applies).
    pub weights: &'a RiskWeights,
    pub lambda: Option<&'a KnowledgeProbs>,
    pub ranges: Option<&'a RangeSpec>,
    pub mode: ScaleMode,
}

impl<'a> AccountingInputs<'a> {
    pub fn new(weights: &'a RiskWeights) -> Self {
        Self {
            weights,
            lambda: None,
            ranges: None,
            mode: ScaleMode::Normal,
        }
    }

    pub fn with_lambda(mut self, lambda: &'a KnowledgeProbs) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_ranges(mut self, ranges: &'a RangeSpec) -> Self {
        self.ranges = Some(ranges);
        self
    }

    pub fn with_mode(mut self, mode: ScaleMode) -> Self {
        self.mode = mode;
        self
    }

    fn lambda(&self, kind: StandardKind) -> Result<&'a KnowledgeProbs> {
        self.lambda.ok_or_else(|| Error::MissingInput {
            standard: kind.to_string(),
            what: "knowledge probabilities (lambda)".into(),
        })
    }

    fn ranges(&self, kind: StandardKind) -> Result<&'a RangeSpec> {
        self.ranges.ok_or_else(|| Error::MissingInput {
            standard: kind.to_string(),
            what: "sensitive ranges".into(),
        })
    }
}

/// The sensitive-complement value from its ingredients.
///
/// `lambda` is used only by the range-averaged standard and `log_mass` only
/// by the range-truncated one.
pub fn sensitive_value(kind: StandardKind, f: f64, alpha: f64, lambda: f64, log_mass: f64) -> f64 {
    match kind {
        StandardKind::Unweighted => f,
        StandardKind::Weighted => alpha * f,
        StandardKind::RangeAveraged => ((1.0 - lambda) * alpha) * f,
        StandardKind::RangeTruncated => alpha * f - log_mass,
    }
}

/// Signed sensitive log-likelihood of record `i` under θ.
pub fn sensitive_loglik(
    kind: StandardKind,
    theta: &ThetaDraw,
    data: &Dataset,
    i: usize,
    inputs: &AccountingInputs<'_>,
) -> Result<f64> {
    let f = log_density(theta, data, i, inputs.mode);
    let alpha = inputs.weights.alpha[i];
    Ok(match kind {
        StandardKind::Unweighted | StandardKind::Weighted => sensitive_value(kind, f, alpha, 0.0, 0.0),
        StandardKind::RangeAveraged => {
            let lambda = inputs.lambda(kind)?.lambda[i];
            sensitive_value(kind, f, alpha, lambda, 0.0)
        }
        StandardKind::RangeTruncated => {
            let mass = truncation_mass(theta, data, i, inputs.ranges(kind)?);
            sensitive_value(kind, f, alpha, 0.0, mass.ln())
        }
    })
}

/// Per-record Lipschitz values and the resulting budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccount {
    pub standard: StandardKind,
    pub per_record_lipschitz: Vec<f64>,
    pub delta: f64,
    pub epsilon: f64,
    pub m: usize,
    /// Cells `(i, m)` where the truncated sensitive term was positive.
    pub sign_flip_count: usize,
}

/// JSON summary of an account, without the per-record vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountSummary {
    pub standard: StandardKind,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub sign_flip_count: usize,
}

impl PrivacyAccount {
    pub fn summary(&self) -> AccountSummary {
        AccountSummary {
            standard: self.standard,
            epsilon: self.epsilon,
            delta: self.delta,
            m: self.m,
            sign_flip_count: self.sign_flip_count,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["record", "lipschitz"])?;
        for (i, l) in self.per_record_lipschitz.iter().enumerate() {
            w.write_record(&[i.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn check_mechanism(kind: StandardKind, posterior: &PosteriorDraws, inputs: &AccountingInputs<'_>) -> Result<()> {
    let expected: Vec<f64> = match kind {
        StandardKind::Unweighted => {
            if posterior.stage() != Stage::Unweighted {
                return Err(Error::MechanismMismatch(
                    "unweighted standard needs the unweighted posterior".into(),
                ));
            }
            return Ok(());
        }
        StandardKind::Weighted | StandardKind::RangeTruncated => inputs.weights.alpha.clone(),
        StandardKind::RangeAveraged => compose_alpha_star(inputs.weights, inputs.lambda(kind)?)?.alpha_star,
    };
    if posterior.weights() != expected.as_slice() {
        let what = if kind == StandardKind::RangeAveraged {
            "alpha*"
        } else {
            "alpha"
        };
        return Err(Error::MechanismMismatch(format!(
            "{kind} accounting needs the posterior fitted with {what} weights"
        )));
    }
    Ok(())
}

/// Δ and ε for one standard over the mechanism's posterior draws.
pub fn account(
    kind: StandardKind,
    posterior: &PosteriorDraws,
    data: &Dataset,
    inputs: &AccountingInputs<'_>,
) -> Result<PrivacyAccount> {
    let n = data.n();
    if inputs.weights.n() != n || posterior.weights().len() != n {
        return Err(Error::Dimension(format!(
            "weights ({}), posterior ({}) and data ({n}) disagree on record count",
            inputs.weights.n(),
            posterior.weights().len()
        )));
    }
    if kind == StandardKind::RangeAveraged && inputs.lambda(kind)?.n() != n {
        return Err(Error::Dimension("lambda length differs from record count".into()));
    }
    if kind == StandardKind::RangeTruncated {
        inputs.ranges(kind)?.validate(data)?;
    }
    check_mechanism(kind, posterior, inputs)?;

    let unit = RiskWeights::unit(n);
    let inputs = if kind == StandardKind::Unweighted {
        AccountingInputs {
            weights: &unit,
            ..*inputs
        }
    } else {
        *inputs
    };
    let per_record: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = 0.0f64;
            let mut flips = 0;
            for theta in posterior.draws() {
                let v = sensitive_loglik(kind, theta, data, i, &inputs).expect("inputs checked");
                if kind == StandardKind::RangeTruncated && v > 0.0 {
                    flips += 1;
                }
                // NaN-propagating max so a broken cell cannot hide.
                best = if v.abs() > best || v.is_nan() { v.abs() } else { best };
            }
            (best, flips)
        })
        .collect();
    let per_record_lipschitz: Vec<f64> = per_record.iter().map(|p| p.0).collect();
    let sign_flip_count = per_record.iter().map(|p| p.1).sum();
    let delta = per_record_lipschitz
        .iter()
        .copied()
        .fold(0.0f64, |a, b| if b > a || b.is_nan() { b } else { a });
    if sign_flip_count > 0 {
        log::debug!("{kind}: {sign_flip_count} cells with positive truncated sensitive log-likelihood");
    }
    Ok(PrivacyAccount {
        standard: kind,
        per_record_lipschitz,
        delta,
        epsilon: 2.0 * delta,
        m: posterior.m(),
        sign_flip_count,
    })
}

/// A standard plus the uniform multiplier range it uses, if any.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantKey {
    pub standard: StandardKind,
    pub range: Option<(f64, f64)>,
}

impl VariantKey {
    pub fn label(&self) -> String {
        match self.range {
            None => self.standard.to_string(),
            Some((a, b)) => {
                let short = match self.standard {
                    StandardKind::RangeAveraged => "avg",
                    StandardKind::RangeTruncated => "trunc",
                    other => other.as_str(),
                };
                format!("{short}_{a}_{b}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDifference {
    pub left: String,
    pub right: String,
    /// `ε_left − ε_right`.
    pub difference: f64,
    pub tie: bool,
}

/// One expected relation `left > right` (or `≥` when `strict` is false).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOrdering {
    pub left: String,
    pub right: String,
    pub strict: bool,
    pub holds: bool,
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    /// Labels and ε, ascending.
    pub sorted: Vec<(String, f64)>,
    pub pairwise: Vec<PairwiseDifference>,
    pub expected: Vec<ExpectedOrdering>,
}

impl OrderingReport {
    pub fn all_expected_hold(&self) -> bool {
        self.expected.iter().all(|e| e.holds)
    }

    pub fn find(&self, left: &str, right: &str) -> Option<&ExpectedOrdering> {
        self.expected.iter().find(|e| e.left == left && e.right == right)
    }
}

fn strictly_nested(inner: (f64, f64), outer: (f64, f64)) -> bool {
    outer.0 <= inner.0 && inner.1 <= outer.1 && outer != inner
}

/// Which of two variants is expected to carry the larger budget, if known.
/// Returns `Some(strict)` when `left` should exceed `right`.
fn expected_relation(left: &VariantKey, right: &VariantKey) -> Option<bool> {
    use StandardKind::*;
    match (left.standard, left.range, right.standard, right.range) {
        (Weighted, _, RangeTruncated, _) => Some(true),
        (Weighted, _, RangeAveraged, _) => Some(false),
        (RangeTruncated, _, RangeAveraged, _) => Some(true),
        (RangeTruncated, Some(l), RangeTruncated, Some(r)) if strictly_nested(r, l) => Some(true),
        (RangeAveraged, Some(l), RangeAveraged, Some(r)) if strictly_nested(r, l) => Some(true),
        _ => None,
    }
}

/// Sorts budgets, tabulates pairwise differences and checks the expected
/// orderings between weighted, range-truncated and range-averaged variants.
pub fn compare_accounts(accounts: &[(VariantKey, PrivacyAccount)]) -> OrderingReport {
    let mut sorted: Vec<(String, f64)> = accounts.iter().map(|(k, a)| (k.label(), a.epsilon)).collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut pairwise = Vec::new();
    let mut expected = Vec::new();
    for (i, (ki, ai)) in accounts.iter().enumerate() {
        for (j, (kj, aj)) in accounts.iter().enumerate() {
            if i < j {
                let difference = ai.epsilon - aj.epsilon;
                pairwise.push(PairwiseDifference {
                    left: ki.label(),
                    right: kj.label(),
                    difference,
                    tie: difference == 0.0,
                });
            }
            if i != j {
                if let Some(strict) = expected_relation(ki, kj) {
                    let tie = ai.epsilon == aj.epsilon;
                    let holds = if strict {
                        ai.epsilon > aj.epsilon
                    } else {
                        ai.epsilon >= aj.epsilon
                    };
                    expected.push(ExpectedOrdering {
                        left: ki.label(),
                        right: kj.label(),
                        strict,
                        holds,
                        tie,
                    });
                }
            }
        }
    }
    OrderingReport {
        sorted,
        pairwise,
        expected,
    }
}
