//! The two-stage pipeline: unweighted fit, risk weights and knowledge
//! probabilities, stage-2 fits, accounting, synthesis and utility.
//!
//! [`Prepared`] holds the stage-1 results for one dataset and evaluates
//! individual mechanisms on demand; [`execute`] runs every configured variant
//! in memory and [`run_pipeline`] adds the on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::{
    account, compare_accounts, AccountSummary, AccountingInputs, OrderingReport, PrivacyAccount, StandardKind,
    VariantKey,
};
use crate::config::{parse_pair, parse_pairs, KeyValues};
use crate::data::{load_csv, simulate, CsvSchema, Dataset, PredictorSpec, SimulationConfig};
use crate::error::{Error, Result, StageContext};
use crate::model::{fit_pseudo_posterior, PosteriorDraws, PriorConfig, ScaleMode};
use crate::range::{
    compose_alpha_star, estimate_lambda, tail_widened_ranges, ComposedWeights, KnowledgeProbs, RangeSpec,
};
use crate::rng::RngContract;
use crate::stats::mean;
use crate::utility::{
    quantile_stats, synthesize, utility_report, QuantileStats, SynthesisMode, SyntheticDataset, UtilityReport,
};
use crate::weights::{
    calibrate_scale, compute_alpha, loglik_matrix, scale_weights, Calibration, CalibrationSettings, RiskWeights,
};

/// Everything a pipeline run or experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub standards: Vec<StandardKind>,
    /// Multiplier pairs `(a, b)` for the range-based standards.
    pub ranges: Vec<(f64, f64)>,
    /// Predictive draws per record for λ.
    pub s_draws: usize,
    /// Posterior draws per fit; Δ is a maximum over these.
    pub m_draws: usize,
    pub seed: u64,
    /// Scale constant applied to α before the stage-2 fits.
    pub scale: f64,
    /// When set, each weighted variant's scale is calibrated to this ε.
    pub target_epsilon: Option<f64>,
    /// Fraction of largest outcomes given `wide_range` instead of the base range.
    pub top_fraction: f64,
    pub wide_range: (f64, f64),
    pub tail_fractions: Vec<f64>,
    pub replicates: usize,
    pub n_grid: Vec<usize>,
    /// CSV input; the simulation is used when absent.
    pub input: Option<PathBuf>,
    pub schema: CsvSchema,
    pub simulation: SimulationConfig,
    pub out: PathBuf,
    pub scale_mode: ScaleMode,
    pub synthesis: SynthesisMode,
    pub synthetic_replicates: usize,
    pub prior: PriorConfig,
    pub calibration: CalibrationSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            standards: vec![
                StandardKind::Unweighted,
                StandardKind::Weighted,
                StandardKind::RangeTruncated,
                StandardKind::RangeAveraged,
            ],
            ranges: vec![(0.4, 1.8), (0.6, 1.2)],
            s_draws: 1000,
            m_draws: 1000,
            seed: 1,
            scale: 1.0,
            target_epsilon: None,
            top_fraction: 0.0,
            wide_range: (0.2, 2.4),
            tail_fractions: vec![0.0, 0.01, 0.05, 0.10],
            replicates: 100,
            n_grid: vec![200, 400, 1600, 6400],
            input: None,
            schema: CsvSchema::default(),
            simulation: SimulationConfig::default(),
            out: PathBuf::from("out"),
            scale_mode: ScaleMode::Normal,
            synthesis: SynthesisMode::PerRecord,
            synthetic_replicates: 1,
            prior: PriorConfig::default(),
            calibration: CalibrationSettings::default(),
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "standards",
    "ranges",
    "s_draws",
    "m_draws",
    "seed",
    "scale",
    "target_epsilon",
    "top_fraction",
    "wide_range",
    "tail_fractions",
    "replicates",
    "n_grid",
    "input",
    "outcome_column",
    "predictors",
    "intercept",
    "n",
    "latent_mean",
    "latent_sd",
    "shift",
    "noise_sd",
    "out",
    "scale_mode",
    "synthesis",
    "synthetic_replicates",
    "prior_mean",
    "prior_precision",
    "prior_shape",
    "prior_rate",
    "calibration_tolerance",
    "calibration_max_iters",
];

impl PipelineConfig {
    /// Builds a config from defaults overridden by `kv`. Unknown keys are
    /// rejected so typos do not pass silently.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        let mut c = Self::default();
        if let Some(v) = kv.get("standards") {
            c.standards = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(StandardKind::parse)
                .collect::<Result<_>>()?;
        }
        if let Some(v) = kv.get("ranges") {
            c.ranges = parse_pairs(v)?;
        }
        if let Some(v) = kv.get("wide_range") {
            c.wide_range = parse_pair(v)?;
        }
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!("s_draws", c.s_draws);
        set!("m_draws", c.m_draws);
        set!("seed", c.seed);
        set!("scale", c.scale);
        set!("top_fraction", c.top_fraction);
        set!("replicates", c.replicates);
        set!("intercept", c.schema.intercept);
        set!("n", c.simulation.n);
        set!("latent_mean", c.simulation.latent_mean);
        set!("latent_sd", c.simulation.latent_sd);
        set!("shift", c.simulation.shift);
        set!("noise_sd", c.simulation.scale);
        set!("synthetic_replicates", c.synthetic_replicates);
        set!("prior_precision", c.prior.precision_scale);
        set!("prior_shape", c.prior.shape);
        set!("prior_rate", c.prior.rate);
        set!("calibration_tolerance", c.calibration.tolerance);
        set!("calibration_max_iters", c.calibration.max_iters);
        if let Some(v) = kv.get("target_epsilon") {
            c.target_epsilon = match v {
                "" | "none" => None,
                _ => Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("target_epsilon: cannot parse {v:?}")))?,
                ),
            };
        }
        if let Some(v) = kv.list("tail_fractions")? {
            c.tail_fractions = v;
        }
        if let Some(v) = kv.list("n_grid")? {
            c.n_grid = v;
        }
        if let Some(v) = kv.list("prior_mean")? {
            c.prior.coef_mean = v;
        }
        if let Some(v) = kv.get("input") {
            c.input = (!v.is_empty()).then(|| PathBuf::from(v));
        }
        if let Some(v) = kv.get("outcome_column") {
            c.schema.outcome = v.to_string();
        }
        if let Some(v) = kv.get("predictors") {
            c.schema.predictors = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(PredictorSpec::parse)
                .collect::<Result<_>>()?;
        }
        if let Some(v) = kv.get("out") {
            c.out = PathBuf::from(v);
        }
        if let Some(v) = kv.get("scale_mode") {
            c.scale_mode = match v {
                "normal" => ScaleMode::Normal,
                "lognormal" => ScaleMode::Lognormal,
                other => return Err(Error::Config(format!("unknown scale_mode {other:?}"))),
            };
        }
        if let Some(v) = kv.get("synthesis") {
            c.synthesis = SynthesisMode::parse(v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.standards.is_empty() {
            return Err(Error::Config("no standards requested".into()));
        }
        if self.standards.iter().any(|s| s.needs_ranges()) && self.ranges.is_empty() {
            return Err(Error::Config("range-based standards need at least one range".into()));
        }
        if self.s_draws == 0 || self.m_draws == 0 || self.synthetic_replicates == 0 {
            return Err(Error::Config(
                "s_draws, m_draws and synthetic_replicates must be at least 1".into(),
            ));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::Config(format!("scale {} outside (0, 1]", self.scale)));
        }
        if let Some(t) = self.target_epsilon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("target_epsilon {t} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.top_fraction) {
            return Err(Error::Config(format!(
                "top_fraction {} outside [0, 1)",
                self.top_fraction
            )));
        }
        if self.tail_fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(Error::Config("tail_fractions must lie in [0, 1)".into()));
        }
        if self.n_grid.iter().any(|&n| n < 2) {
            return Err(Error::Config("n_grid entries must be at least 2".into()));
        }
        for &(a, b) in self.ranges.iter().chain(std::iter::once(&self.wide_range)) {
            crate::range::RecordRange::multiplicative(a, b)?;
        }
        self.simulation.validate()
    }

    /// Variants in configuration order: one per standard, times one per range
    /// for the range-based standards.
    pub fn variants(&self) -> Vec<VariantKey> {
        let mut out = Vec::new();
        for &standard in &self.standards {
            if standard.needs_ranges() {
                out.extend(self.ranges.iter().map(|&r| VariantKey {
                    standard,
                    range: Some(r),
                }));
            } else {
                out.push(VariantKey { standard, range: None });
            }
        }
        out.dedup();
        out
    }

    /// The confidential data: the CSV input if given, otherwise a simulated
    /// population seeded from `seed`.
    pub fn load_data(&self, seed: u64) -> Result<Dataset> {
        match &self.input {
            Some(path) => load_csv(path, &self.schema),
            None => simulate(&self.simulation_for(seed, self.simulation.n)),
        }
    }

    /// The simulation settings with the data seed derived from `seed`.
    pub fn simulation_for(&self, seed: u64, n: usize) -> SimulationConfig {
        SimulationConfig {
            n,
            seed: RngContract::new(seed).child_seed("data", 0),
            ..self.simulation
        }
    }
}

/// Stage-1 results: the unweighted posterior and the risk weights it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOne {
    pub posterior: PosteriorDraws,
    pub alpha: RiskWeights,
}

/// One released mechanism and its account.
#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    pub key: VariantKey,
    pub scale: f64,
    pub calibration: Option<Calibration>,
    pub posterior: PosteriorDraws,
    /// α after scaling.
    pub weights: RiskWeights,
    pub composed: Option<ComposedWeights>,
    pub account: PrivacyAccount,
}

/// Stage-1 state for one dataset, from which mechanisms are evaluated.
///
/// All randomness derives from the seed passed to [`Prepared::new`]:
/// substream `stage1` for the unweighted fit, `lambda` for predictive draws,
/// `stage2` for every stage-2 fit and `synth` for synthesis. Stage-2 fits of
/// different variants therefore share their random numbers.
#[derive(Debug)]
pub struct Prepared<'a> {
    data: &'a Dataset,
    cfg: &'a PipelineConfig,
    contract: RngContract,
    stage_one: StageOne,
}

impl<'a> Prepared<'a> {
    pub fn new(data: &'a Dataset, cfg: &'a PipelineConfig, seed: u64) -> Result<Self> {
        let contract = RngContract::new(seed);
        let unit = vec![1.0; data.n()];
        let posterior = fit_pseudo_posterior(data, &unit, &cfg.prior, cfg.m_draws, contract.child_seed("stage1", 0))
            .stage("stage 1 fit")?;
        let ll = loglik_matrix(&posterior, data, cfg.scale_mode).stage("risk weights")?;
        let alpha = compute_alpha(&ll);
        if alpha.zero_loglik_count > 0 {
            log::warn!(
                "{} records had zero log-likelihood in every draw; their alpha is 1",
                alpha.zero_loglik_count
            );
        }
        Ok(Self {
            data,
            cfg,
            contract,
            stage_one: StageOne { posterior, alpha },
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn stage_one(&self) -> &StageOne {
        &self.stage_one
    }

    pub fn into_stage_one(self) -> StageOne {
        self.stage_one
    }

    /// Per-record ranges for a base multiplier pair, tail-widened when
    /// `top_fraction > 0`.
    pub fn ranges(&self, base: (f64, f64), top_fraction: f64) -> Result<RangeSpec> {
        if top_fraction > 0.0 {
            tail_widened_ranges(self.data, base, self.cfg.wide_range, top_fraction)
        } else {
            RangeSpec::uniform(self.data.n(), base.0, base.1)
        }
    }

    pub fn lambda(&self, ranges: &RangeSpec) -> Result<KnowledgeProbs> {
        estimate_lambda(
            &self.stage_one.posterior,
            self.data,
            ranges,
            self.cfg.s_draws,
            self.contract.child_seed("lambda", 0),
        )
        .stage("lambda")
    }

    /// Fits and accounts one mechanism at scale constant `scale`.
    ///
    /// The unweighted standard reuses the stage-1 posterior and ignores
    /// `scale`.
    pub fn evaluate(
        &self,
        key: VariantKey,
        ranges: Option<&RangeSpec>,
        lambda: Option<&KnowledgeProbs>,
        scale: f64,
    ) -> Result<Mechanism> {
        let kind = key.standard;
        let missing = |what: &str| Error::MissingInput {
            standard: kind.to_string(),
            what: what.into(),
        };
        let (weights, composed, posterior) = match kind {
            StandardKind::Unweighted => (RiskWeights::unit(self.data.n()), None, self.stage_one.posterior.clone()),
            _ => {
                let weights = scale_weights(&self.stage_one.alpha, scale).stage("risk weights")?;
                let composed = match kind {
                    StandardKind::RangeAveraged => {
                        let lambda = lambda.ok_or_else(|| missing("knowledge probabilities (lambda)"))?;
                        Some(compose_alpha_star(&weights, lambda).stage("alpha*")?)
                    }
                    _ => None,
                };
                let fit_weights = composed.as_ref().map_or(&weights.alpha, |c| &c.alpha_star);
                let posterior = fit_pseudo_posterior(
                    self.data,
                    fit_weights,
                    &self.cfg.prior,
                    self.cfg.m_draws,
                    self.contract.child_seed("stage2", 0),
                )
                .stage("stage 2 fit")?;
                (weights, composed, posterior)
            }
        };
        let mut inputs = AccountingInputs::new(&weights).with_mode(self.cfg.scale_mode);
        if let Some(l) = lambda {
            inputs = inputs.with_lambda(l);
        }
        if let Some(r) = ranges {
            inputs = inputs.with_ranges(r);
        }
        let account = account(kind, &posterior, self.data, &inputs).stage("accounting")?;
        let scale = if kind == StandardKind::Unweighted { 1.0 } else { scale };
        Ok(Mechanism {
            key,
            scale,
            calibration: None,
            posterior,
            weights,
            composed,
            account,
        })
    }

    /// Searches the scale constant whose mechanism has budget `target`, then
    /// evaluates the mechanism at that scale.
    pub fn calibrate(
        &self,
        key: VariantKey,
        ranges: Option<&RangeSpec>,
        lambda: Option<&KnowledgeProbs>,
        target: f64,
    ) -> Result<Mechanism> {
        if key.standard == StandardKind::Unweighted {
            return Err(Error::Config(
                "the unweighted mechanism has no scale constant to calibrate".into(),
            ));
        }
        let cal = calibrate_scale(
            |c| Ok(self.evaluate(key, ranges, lambda, c)?.account.epsilon),
            target,
            self.cfg.calibration,
        )
        .stage("calibration")?;
        let mut mech = self.evaluate(key, ranges, lambda, cal.scale)?;
        mech.calibration = Some(cal);
        Ok(mech)
    }

    /// `synthetic_replicates` synthetic datasets from one mechanism. Seeds
    /// depend only on the replicate index, so all mechanisms share them.
    pub fn synthesize(&self, posterior: &PosteriorDraws, label: &str) -> Vec<SyntheticDataset> {
        (0..self.cfg.synthetic_replicates as u64)
            .map(|r| {
                synthesize(
                    posterior,
                    self.data,
                    self.contract.child_seed("synth", r),
                    self.cfg.synthesis,
                )
                .tagged(label)
            })
            .collect()
    }

    pub fn utility(&self, synthetic: &[SyntheticDataset]) -> Result<UtilityReport> {
        utility_report(self.data, synthetic).stage("utility")
    }
}

/// How far [`execute`] and [`run_pipeline`] go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Through {
    Fit,
    Account,
    Synthesize,
    Utility,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRun {
    pub label: String,
    pub mechanism: Mechanism,
    /// Index into [`PipelineOutput::lambdas`] for range-averaged variants.
    pub lambda_index: Option<usize>,
    pub synthetic: Vec<SyntheticDataset>,
    pub utility: Option<UtilityReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub stage_one: StageOne,
    /// λ per base range pair, for the ranges used by range-averaged variants.
    pub lambdas: Vec<((f64, f64), KnowledgeProbs)>,
    pub variants: Vec<VariantRun>,
    pub ordering: OrderingReport,
}

/// Runs every configured variant on `data` in memory.
pub fn execute(data: &Dataset, cfg: &PipelineConfig, seed: u64, through: Through) -> Result<PipelineOutput> {
    cfg.validate()?;
    let prep = Prepared::new(data, cfg, seed)?;
    let variants = cfg.variants();

    let mut range_specs: Vec<((f64, f64), RangeSpec)> = Vec::new();
    for key in &variants {
        if let Some(r) = key.range {
            if !range_specs.iter().any(|(p, _)| *p == r) {
                range_specs.push((r, prep.ranges(r, cfg.top_fraction).stage("ranges")?));
            }
        }
    }
    let mut lambdas: Vec<((f64, f64), KnowledgeProbs)> = Vec::new();
    for key in variants.iter().filter(|k| k.standard == StandardKind::RangeAveraged) {
        let r = key.range.expect("range-based");
        if !lambdas.iter().any(|(p, _)| *p == r) {
            let spec = &range_specs.iter().find(|(p, _)| *p == r).expect("built above").1;
            lambdas.push((r, prep.lambda(spec)?));
        }
    }

    let mut runs = Vec::with_capacity(variants.len());
    for key in variants {
        let spec = key
            .range
            .map(|r| &range_specs.iter().find(|(p, _)| *p == r).expect("built above").1);
        let lambda_index = match key.standard {
            StandardKind::RangeAveraged => lambdas.iter().position(|(p, _)| Some(*p) == key.range),
            _ => None,
        };
        let lambda = lambda_index.map(|i| &lambdas[i].1);
        let mechanism = match cfg.target_epsilon {
            Some(target) if key.standard != StandardKind::Unweighted => prep.calibrate(key, spec, lambda, target)?,
            _ => prep.evaluate(key, spec, lambda, cfg.scale)?,
        };
        let label = key.label();
        let synthetic = if through >= Through::Synthesize {
            prep.synthesize(&mechanism.posterior, &label)
        } else {
            Vec::new()
        };
        let utility = if through >= Through::Utility {
            Some(prep.utility(&synthetic)?)
        } else {
            None
        };
        runs.push(VariantRun {
            label,
            mechanism,
            lambda_index,
            synthetic,
            utility,
        });
    }
    let accounts: Vec<(VariantKey, PrivacyAccount)> = runs
        .iter()
        .map(|r| (r.mechanism.key, r.mechanism.account.clone()))
        .collect();
    Ok(PipelineOutput {
        stage_one: prep.into_stage_one(),
        lambdas,
        variants: runs,
        ordering: compare_accounts(&accounts),
    })
}

/// A file written by a run, with its SHA-256 digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub source: String,
    pub n: usize,
    pub p: usize,
    pub outcome: String,
    pub predictors: Vec<String>,
    pub confidential: QuantileStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min_alpha: f64,
    pub mean_alpha: f64,
    pub zero_loglik_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub range: (f64, f64),
    pub mean_lambda: f64,
    pub max_lambda: f64,
    pub max_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub label: String,
    pub key: VariantKey,
    pub scale: f64,
    pub calibration: Option<Calibration>,
    pub account: AccountSummary,
    pub utility: Option<UtilityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub through: Through,
    pub config: PipelineConfig,
    pub data: DataSummary,
    pub weights: Option<WeightSummary>,
    pub lambdas: Vec<LambdaSummary>,
    pub variants: Vec<VariantReport>,
    pub ordering: OrderingReport,
    /// Files in the output directory, excluding `run_report.json` itself.
    pub artifacts: Vec<Artifact>,
}

pub const REPORT_FILE: &str = "run_report.json";

pub(crate) fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Records written files for the manifest.
pub(crate) struct ArtifactWriter<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> ArtifactWriter<'a> {
    pub(crate) fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir, files: Vec::new() })
    }

    pub(crate) fn write(&mut self, name: String, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        f(&self.dir.join(&name)).stage("write")?;
        self.files.push(name);
        Ok(())
    }

    pub(crate) fn write_json<T: Serialize>(&mut self, name: String, value: &T) -> Result<()> {
        self.write(name, |path| {
            let text = serde_json::to_string_pretty(value)?;
            fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
        })
    }

    pub(crate) fn manifest(&self) -> Result<Vec<Artifact>> {
        self.files
            .iter()
            .map(|file| {
                let (sha256, bytes) = sha256_file(&self.dir.join(file))?;
                Ok(Artifact {
                    file: file.clone(),
                    sha256,
                    bytes,
                })
            })
            .collect()
    }
}

fn lambdas_csv(path: &Path, alpha: &RiskWeights, lambdas: &[((f64, f64), KnowledgeProbs)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["record".to_string(), "alpha".to_string()];
    let composed: Vec<ComposedWeights> = lambdas
        .iter()
        .map(|(_, l)| compose_alpha_star(alpha, l))
        .collect::<Result<_>>()?;
    for ((a, b), _) in lambdas {
        header.push(format!("lambda_{a}_{b}"));
        header.push(format!("se_{a}_{b}"));
        header.push(format!("alpha_star_{a}_{b}"));
    }
    w.write_record(&header)?;
    for i in 0..alpha.n() {
        let mut row = vec![i.to_string(), alpha.alpha[i].to_string()];
        for ((_, l), c) in lambdas.iter().zip(&composed) {
            row.push(l.lambda[i].to_string());
            row.push(l.se[i].to_string());
            row.push(c.alpha_star[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Runs the pipeline on the configured data and writes its artifacts to
/// `cfg.out`.
///
/// Files: `run_report.json`, `weights.csv` (weighted standards only),
/// `lambdas.csv` (range-averaged only), and per variant
/// `posterior_<label>.csv`, `accounts_<label>.csv`, `synthetic_<label>.csv`
/// and `utility_<label>.json`, depending on `through`. The report contains
/// no timestamps, so identical configs give identical reports.
pub fn run_pipeline(cfg: &PipelineConfig, through: Through) -> Result<RunReport> {
    cfg.validate()?;
    let data = cfg.load_data(cfg.seed).stage("load")?;
    let out = execute(&data, cfg, cfg.seed, through)?;
    let mut w = ArtifactWriter::new(&cfg.out)?;

    let weighted = cfg.standards.iter().any(|&s| s != StandardKind::Unweighted);
    if weighted {
        w.write("weights.csv".into(), |p| out.stage_one.alpha.write_csv(p))?;
    }
    if !out.lambdas.is_empty() {
        w.write("lambdas.csv".into(), |p| {
            lambdas_csv(p, &out.stage_one.alpha, &out.lambdas)
        })?;
    }
    for run in &out.variants {
        let label = &run.label;
        w.write(format!("posterior_{label}.csv"), |p| {
            run.mechanism.posterior.write_csv(p)
        })?;
        if through >= Through::Account {
            w.write(format!("accounts_{label}.csv"), |p| run.mechanism.account.write_csv(p))?;
        }
        match run.synthetic.as_slice() {
            [] => {}
            [one] => w.write(format!("synthetic_{label}.csv"), |p| one.write_csv(&data, p))?,
            many => {
                for (k, s) in many.iter().enumerate() {
                    w.write(format!("synthetic_{label}_{k}.csv"), |p| s.write_csv(&data, p))?;
                }
            }
        }
        if let Some(u) = &run.utility {
            w.write_json(format!("utility_{label}.json"), u)?;
        }
    }

    let alpha = &out.stage_one.alpha.alpha;
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        through,
        config: cfg.clone(),
        data: DataSummary {
            source: match &cfg.input {
                Some(p) => p.display().to_string(),
                None => "simulation".into(),
            },
            n: data.n(),
            p: data.p(),
            outcome: data.outcome_label().to_string(),
            predictors: data.predictor_labels().to_vec(),
            confidential: quantile_stats(data.outcomes())?,
        },
        weights: weighted.then(|| WeightSummary {
            min_alpha: alpha.iter().copied().fold(f64::INFINITY, f64::min),
            mean_alpha: mean(alpha),
            zero_loglik_count: out.stage_one.alpha.zero_loglik_count,
        }),
        lambdas: out
            .lambdas
            .iter()
            .map(|(r, l)| LambdaSummary {
                range: *r,
                mean_lambda: mean(&l.lambda),
                max_lambda: l.lambda.iter().copied().fold(0.0, f64::max),
                max_se: l.se.iter().copied().fold(0.0, f64::max),
            })
            .collect(),
        variants: out
            .variants
            .iter()
            .map(|r| VariantReport {
                label: r.label.clone(),
                key: r.mechanism.key,
                scale: r.mechanism.scale,
                calibration: r.mechanism.calibration.clone(),
                account: r.mechanism.account.summary(),
                utility: r.utility.clone(),
            })
            .collect(),
        ordering: out.ordering,
        artifacts: w.manifest()?,
    };
    let path = cfg.out.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(&path, text + "\n")
        .map_err(|e| Error::io(&path, e))
        .stage("write")?;
    Ok(report)
}

/// Checks that every manifest entry exists in `dir` with the recorded digest.
/// Returns the names of missing or altered files.
pub fn verify_artifacts(dir: impl AsRef<Path>, artifacts: &[Artifact]) -> Vec<String> {
    let dir = dir.as_ref();
    artifacts
        .iter()
        .filter(|a| match sha256_file(&dir.join(&a.file)) {
            Ok((sha, bytes)) => sha != a.sha256 || bytes != a.bytes,
            Err(_) => true,
        })
        .map(|a| a.file.clone())
        .collect()
}
