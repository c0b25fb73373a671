//! Replicated simulation experiments.
//!
//! Replicate `r` draws its own population and runs its own pipeline from the
//! `r`-th seed of [`replicate_seeds`]. Replicates run in parallel; results are
//! gathered in replicate order, so every aggregate is a pure function of the
//! configuration.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{StandardKind, VariantKey};
use crate::data::{simulate, Dataset};
use crate::error::{Error, Result, StageContext};
use crate::pipeline::{execute, Artifact, ArtifactWriter, Mechanism, PipelineConfig, Prepared, Through};
use crate::rng::{replicate_seeds, RngContract};
use crate::stats::{iqr, mean, quantile};
use crate::utility::{QuantileStats, UtilityReport};

/// Budget and utility of one variant in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub label: String,
    pub epsilon: f64,
    pub delta: f64,
    pub scale: f64,
    pub utility: Option<UtilityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub n: usize,
    pub variants: Vec<VariantMetrics>,
}

impl ReplicateRow {
    pub fn get(&self, label: &str) -> Option<&VariantMetrics> {
        self.variants.iter().find(|v| v.label == label)
    }

    fn epsilon(&self, label: &str) -> f64 {
        self.get(label).map_or(f64::NAN, |v| v.epsilon)
    }
}

/// Five-number spread of a per-replicate quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub iqr: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        Self {
            min: quantile(values, 0.0),
            q25: quantile(values, 0.25),
            median: quantile(values, 0.5),
            q75: quantile(values, 0.75),
            max: quantile(values, 1.0),
            iqr: iqr(values),
        }
    }
}

/// Fraction of replicates in which `labels[0] > labels[1] > ...` holds
/// strictly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainFraction {
    pub labels: Vec<String>,
    pub fraction: f64,
    /// Per adjacent pair, the fraction of replicates where it holds.
    pub links: Vec<f64>,
}

fn chain_fraction(
    rows: &[ReplicateRow],
    labels: &[String],
    value: impl Fn(&ReplicateRow, &str) -> f64,
) -> ChainFraction {
    let n = rows.len().max(1) as f64;
    let holds = |r: &ReplicateRow, k: usize| value(r, &labels[k]) > value(r, &labels[k + 1]);
    let links = (0..labels.len().saturating_sub(1))
        .map(|k| rows.iter().filter(|r| holds(r, k)).count() as f64 / n)
        .collect();
    let full = rows
        .iter()
        .filter(|r| (0..labels.len() - 1).all(|k| holds(r, k)))
        .count();
    ChainFraction {
        labels: labels.to_vec(),
        fraction: full as f64 / n,
        links,
    }
}

fn spreads(rows: &[ReplicateRow], value: impl Fn(&VariantMetrics) -> Option<f64>) -> BTreeMap<String, Spread> {
    let mut by_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in rows {
        for v in &row.variants {
            if let Some(x) = value(v) {
                by_label.entry(v.label.clone()).or_default().push(x);
            }
        }
    }
    by_label.into_iter().map(|(k, v)| (k, Spread::of(&v))).collect()
}

/// Runs `f` once per replicate in parallel. On failure the error of the
/// lowest failing replicate is returned.
fn run_replicates<T, F>(master: u64, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync,
{
    let seeds = replicate_seeds(master, count);
    let results: Vec<Result<T>> = seeds.par_iter().enumerate().map(|(r, &s)| f(r, s)).collect();
    results.into_iter().collect()
}

fn replicate_data(cfg: &PipelineConfig, seed: u64, n: usize) -> Result<Dataset> {
    simulate(&cfg.simulation_for(seed, n)).stage("simulate")
}

fn metrics(label: String, m: &Mechanism, utility: Option<UtilityReport>) -> VariantMetrics {
    VariantMetrics {
        label,
        epsilon: m.account.epsilon,
        delta: m.account.delta,
        scale: m.scale,
        utility,
    }
}

fn six_variant_config(cfg: &PipelineConfig) -> Result<PipelineConfig> {
    if cfg.ranges.len() < 2 {
        return Err(Error::Config(
            "this experiment needs two ranges, the wider first".into(),
        ));
    }
    Ok(PipelineConfig {
        standards: vec![
            StandardKind::Unweighted,
            StandardKind::Weighted,
            StandardKind::RangeTruncated,
            StandardKind::RangeAveraged,
        ],
        ranges: cfg.ranges[..2].to_vec(),
        target_epsilon: None,
        top_fraction: 0.0,
        ..cfg.clone()
    })
}

fn label(standard: StandardKind, range: Option<(f64, f64)>) -> String {
    VariantKey { standard, range }.label()
}

/// Paired difference summary `mean ± se` over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub mean: f64,
    pub se: f64,
    pub within_two_se: bool,
}

impl PairedDifference {
    pub fn of(diffs: &[f64]) -> Self {
        let k = diffs.len() as f64;
        let m = mean(diffs);
        let var = if diffs.len() > 1 {
            diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        let se = (var / k).sqrt();
        Self {
            mean: m,
            se,
            within_two_se: m.abs() <= 2.0 * se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingExperiment {
    pub replicates: usize,
    /// weighted > trunc(wide) > trunc(narrow) > avg(wide) > avg(narrow).
    pub chain: ChainFraction,
    pub epsilon: BTreeMap<String, Spread>,
    pub avg_ecdf: BTreeMap<String, Spread>,
    pub q90: BTreeMap<String, Spread>,
    /// avg-ECDF of weighted minus range-truncated (wide range).
    pub weighted_vs_trunc_avg_ecdf: PairedDifference,
    pub rows: Vec<ReplicateRow>,
}

/// Budgets and utility of the six variants over replicated populations.
pub fn run_experiment_budget_ordering(cfg: &PipelineConfig) -> Result<OrderingExperiment> {
    if cfg.replicates < 2 {
        return Err(Error::Config(
            "the ordering experiment needs at least 2 replicates".into(),
        ));
    }
    let six = six_variant_config(cfg)?;
    let n = cfg.simulation.n;
    let rows = run_replicates(cfg.seed, cfg.replicates, |r, seed| {
        let data = replicate_data(&six, seed, n)?;
        let out = execute(&data, &six, seed, Through::Utility)?;
        let variants = out
            .variants
            .iter()
            .map(|v| metrics(v.label.clone(), &v.mechanism, v.utility.clone()))
            .collect();
        Ok(ReplicateRow {
            replicate: r,
            seed,
            n,
            variants,
        })
    })?;
    let (wide, narrow) = (six.ranges[0], six.ranges[1]);
    let chain_labels = vec![
        label(StandardKind::Weighted, None),
        label(StandardKind::RangeTruncated, Some(wide)),
        label(StandardKind::RangeTruncated, Some(narrow)),
        label(StandardKind::RangeAveraged, Some(wide)),
        label(StandardKind::RangeAveraged, Some(narrow)),
    ];
    let chain = chain_fraction(&rows, &chain_labels, |r, l| r.epsilon(l));
    let ecdf = |r: &ReplicateRow, l: &str| {
        r.get(l)
            .and_then(|v| v.utility.as_ref())
            .map_or(f64::NAN, |u| u.avg_ecdf)
    };
    let diffs: Vec<f64> = rows
        .iter()
        .map(|r| ecdf(r, &chain_labels[0]) - ecdf(r, &chain_labels[1]))
        .collect();
    Ok(OrderingExperiment {
        replicates: rows.len(),
        chain,
        epsilon: spreads(&rows, |v| Some(v.epsilon)),
        avg_ecdf: spreads(&rows, |v| v.utility.as_ref().map(|u| u.avg_ecdf)),
        q90: spreads(&rows, |v| v.utility.as_ref().map(|u| u.synthetic.q90)),
        weighted_vs_trunc_avg_ecdf: PairedDifference::of(&diffs),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualBudgetReplicate {
    pub replicate: usize,
    pub seed: u64,
    pub target: f64,
    pub weighted_scale: f64,
    pub trunc_wide_scale: f64,
    pub converged: bool,
    pub max_relative_error: f64,
    /// Each variant's q90/mean/median closeness ordering check passed.
    pub closeness_order_holds: bool,
    pub q90_order_holds: bool,
    pub row: ReplicateRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualBudgetExperiment {
    pub labels: [String; 3],
    pub weighted_scale: Spread,
    pub trunc_wide_scale: Spread,
    /// Fraction of replicates with every achieved ε within tolerance.
    pub within_tolerance: f64,
    pub q90_order_fraction: f64,
    pub closeness_order_fraction: f64,
    pub replicates: Vec<EqualBudgetReplicate>,
}

/// Calibrates weighted and trunc(wide) to the budget of trunc(narrow), then
/// compares utility at (nearly) equal budgets.
pub fn run_experiment_equal_budget(cfg: &PipelineConfig) -> Result<EqualBudgetExperiment> {
    let six = six_variant_config(cfg)?;
    let (wide, narrow) = (six.ranges[0], six.ranges[1]);
    let keys = [
        VariantKey {
            standard: StandardKind::Weighted,
            range: None,
        },
        VariantKey {
            standard: StandardKind::RangeTruncated,
            range: Some(wide),
        },
        VariantKey {
            standard: StandardKind::RangeTruncated,
            range: Some(narrow),
        },
    ];
    let labels = keys.map(|k| k.label());
    let n = cfg.simulation.n;
    let count = cfg.replicates.max(1);
    let reps = run_replicates(cfg.seed, count, |r, seed| {
        let data = replicate_data(&six, seed, n)?;
        let prep = Prepared::new(&data, &six, seed)?;
        let wide_spec = prep.ranges(wide, 0.0)?;
        let narrow_spec = prep.ranges(narrow, 0.0)?;
        let reference = prep.evaluate(keys[2], Some(&narrow_spec), None, 1.0)?;
        let target = reference.account.epsilon;
        let weighted = prep.calibrate(keys[0], None, None, target)?;
        let trunc_wide = prep.calibrate(keys[1], Some(&wide_spec), None, target)?;
        let mechs = [weighted, trunc_wide, reference];
        let mut variants = Vec::new();
        for (m, l) in mechs.iter().zip(&labels) {
            let syn = prep.synthesize(&m.posterior, l);
            variants.push(metrics(l.clone(), m, Some(prep.utility(&syn)?)));
        }
        let close: Vec<_> = variants
            .iter()
            .map(|v| v.utility.as_ref().expect("set").closeness())
            .collect();
        // Best first: trunc(narrow), then trunc(wide), then weighted.
        let q90_order_holds = close[2].q90 <= close[1].q90 && close[1].q90 <= close[0].q90;
        let stat: [fn(&QuantileStats) -> f64; 3] = [|c| c.mean, |c| c.median, |c| c.q90];
        let closeness_order_holds = stat
            .iter()
            .all(|f| f(&close[2]) <= f(&close[1]) && f(&close[2]) <= f(&close[0]));
        let cals: Vec<_> = mechs[..2]
            .iter()
            .map(|m| m.calibration.clone().expect("calibrated"))
            .collect();
        Ok(EqualBudgetReplicate {
            replicate: r,
            seed,
            target,
            weighted_scale: cals[0].scale,
            trunc_wide_scale: cals[1].scale,
            converged: cals.iter().all(|c| c.converged),
            max_relative_error: cals.iter().map(|c| c.relative_error()).fold(0.0, f64::max),
            closeness_order_holds,
            q90_order_holds,
            row: ReplicateRow {
                replicate: r,
                seed,
                n,
                variants,
            },
        })
    })?;
    let k = reps.len() as f64;
    let frac = |f: &dyn Fn(&EqualBudgetReplicate) -> bool| reps.iter().filter(|r| f(r)).count() as f64 / k;
    Ok(EqualBudgetExperiment {
        labels,
        weighted_scale: Spread::of(&reps.iter().map(|r| r.weighted_scale).collect::<Vec<_>>()),
        trunc_wide_scale: Spread::of(&reps.iter().map(|r| r.trunc_wide_scale).collect::<Vec<_>>()),
        within_tolerance: frac(&|r| r.max_relative_error <= cfg.calibration.tolerance),
        q90_order_fraction: frac(&|r| r.q90_order_holds),
        closeness_order_fraction: frac(&|r| r.closeness_order_holds),
        replicates: reps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailExperiment {
    /// Scenario labels in increasing widened fraction, then weighted.
    pub labels: Vec<String>,
    pub fractions: Vec<f64>,
    /// ε(base) < ε(top…) < … < ε(weighted).
    pub epsilon_chain: ChainFraction,
    /// Fraction of replicates whose max-ECDF is non-decreasing in the fraction.
    pub max_ecdf_monotone: f64,
    pub epsilon: BTreeMap<String, Spread>,
    pub max_ecdf: BTreeMap<String, Spread>,
    pub rows: Vec<ReplicateRow>,
}

fn tail_label(fraction: f64) -> String {
    if fraction == 0.0 {
        "base".into()
    } else {
        format!("top_{}", fraction * 100.0)
    }
}

/// Range-averaged mechanisms with the base range widened for the largest
/// outcomes, compared with the weighted mechanism.
pub fn run_experiment_tail_widening(cfg: &PipelineConfig) -> Result<TailExperiment> {
    let base = *cfg
        .ranges
        .first()
        .ok_or_else(|| Error::Config("tail experiment needs a base range".into()))?;
    let mut fractions = cfg.tail_fractions.clone();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let n = cfg.simulation.n;
    let rows = run_replicates(cfg.seed, cfg.replicates.max(1), |r, seed| {
        let data = replicate_data(cfg, seed, n)?;
        let prep = Prepared::new(&data, cfg, seed)?;
        let mut variants = Vec::new();
        for &f in &fractions {
            let spec = prep.ranges(base, f)?;
            let lambda = prep.lambda(&spec)?;
            let key = VariantKey {
                standard: StandardKind::RangeAveraged,
                range: Some(base),
            };
            let m = prep.evaluate(key, Some(&spec), Some(&lambda), cfg.scale)?;
            let l = tail_label(f);
            let syn = prep.synthesize(&m.posterior, &l);
            variants.push(metrics(l, &m, Some(prep.utility(&syn)?)));
        }
        let key = VariantKey {
            standard: StandardKind::Weighted,
            range: None,
        };
        let m = prep.evaluate(key, None, None, cfg.scale)?;
        let l = key.label();
        let syn = prep.synthesize(&m.posterior, &l);
        variants.push(metrics(l, &m, Some(prep.utility(&syn)?)));
        Ok(ReplicateRow {
            replicate: r,
            seed,
            n,
            variants,
        })
    })?;
    let mut labels: Vec<String> = fractions.iter().map(|&f| tail_label(f)).collect();
    labels.push(label(StandardKind::Weighted, None));
    // The chain helper checks descending order; reverse for ascending.
    let descending: Vec<String> = labels.iter().rev().cloned().collect();
    let mut epsilon_chain = chain_fraction(&rows, &descending, |r, l| r.epsilon(l));
    epsilon_chain.labels = labels.clone();
    epsilon_chain.links.reverse();
    let scenario = &labels[..fractions.len()];
    let max_ecdf = |r: &ReplicateRow, l: &str| {
        r.get(l)
            .and_then(|v| v.utility.as_ref())
            .map_or(f64::NAN, |u| u.max_ecdf)
    };
    let monotone = rows
        .iter()
        .filter(|r| scenario.windows(2).all(|w| max_ecdf(r, &w[0]) <= max_ecdf(r, &w[1])))
        .count() as f64
        / rows.len() as f64;
    Ok(TailExperiment {
        labels,
        fractions,
        epsilon_chain,
        max_ecdf_monotone: monotone,
        epsilon: spreads(&rows, |v| Some(v.epsilon)),
        max_ecdf: spreads(&rows, |v| v.utility.as_ref().map(|u| u.max_ecdf)),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub n: usize,
    /// Δ spread per variant label.
    pub delta: BTreeMap<String, Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGridExperiment {
    pub grid: Vec<GridCell>,
    /// IQR(Δ) at the largest n over IQR(Δ) at the smallest n.
    pub iqr_ratio: BTreeMap<String, f64>,
    /// Whether IQR at the largest n is strictly below IQR at the smallest.
    pub contracts: BTreeMap<String, bool>,
    pub rows: Vec<ReplicateRow>,
}

/// Distribution of Δ for all six variants across sample sizes.
pub fn run_experiment_n_grid(cfg: &PipelineConfig) -> Result<NGridExperiment> {
    if cfg.n_grid.is_empty() {
        return Err(Error::Config("n_grid is empty".into()));
    }
    let six = six_variant_config(cfg)?;
    let mut grid_ns = cfg.n_grid.clone();
    grid_ns.sort_unstable();
    grid_ns.dedup();
    let master = RngContract::new(cfg.seed);
    let mut grid = Vec::new();
    let mut all_rows = Vec::new();
    for &n in &grid_ns {
        let rows = run_replicates(master.child_seed("n", n as u64), cfg.replicates.max(1), |r, seed| {
            let data = replicate_data(&six, seed, n)?;
            let out = execute(&data, &six, seed, Through::Account)?;
            let variants = out
                .variants
                .iter()
                .map(|v| metrics(v.label.clone(), &v.mechanism, None))
                .collect();
            Ok(ReplicateRow {
                replicate: r,
                seed,
                n,
                variants,
            })
        })?;
        grid.push(GridCell {
            n,
            delta: spreads(&rows, |v| Some(v.delta)),
        });
        all_rows.extend(rows);
    }
    let (first, last) = (&grid[0], &grid[grid.len() - 1]);
    let iqr_ratio: BTreeMap<String, f64> = first
        .delta
        .iter()
        .map(|(l, s)| (l.clone(), last.delta[l].iqr / s.iqr))
        .collect();
    let contracts = first
        .delta
        .iter()
        .map(|(l, s)| (l.clone(), last.delta[l].iqr < s.iqr))
        .collect();
    Ok(NGridExperiment {
        grid,
        iqr_ratio,
        contracts,
        rows: all_rows,
    })
}

fn rows_csv(path: &Path, rows: &[ReplicateRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "replicate",
        "seed",
        "n",
        "label",
        "epsilon",
        "delta",
        "scale",
        "max_ecdf",
        "avg_ecdf",
        "mean",
        "median",
        "q90",
    ])?;
    for row in rows {
        for v in &row.variants {
            let u = |f: fn(&UtilityReport) -> f64| v.utility.as_ref().map_or(String::new(), |u| f(u).to_string());
            w.write_record(&[
                row.replicate.to_string(),
                row.seed.to_string(),
                row.n.to_string(),
                v.label.clone(),
                v.epsilon.to_string(),
                v.delta.to_string(),
                v.scale.to_string(),
                u(|u| u.max_ecdf),
                u(|u| u.avg_ecdf),
                u(|u| u.synthetic.mean),
                u(|u| u.synthetic.median),
                u(|u| u.synthetic.q90),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes `experiment_<name>.json` and the long-format
/// `replicates_<name>.csv` to `dir`; returns the manifest of both.
pub fn write_experiment<T: Serialize>(
    dir: impl AsRef<Path>,
    name: &str,
    report: &T,
    rows: &[ReplicateRow],
) -> Result<Vec<Artifact>> {
    let mut w = ArtifactWriter::new(dir.as_ref())?;
    w.write(format!("replicates_{name}.csv"), |p| rows_csv(p, rows))?;
    w.write_json(format!("experiment_{name}.json"), report)?;
    w.manifest()
}
