//! Confidential datasets: CSV ingestion, export, and the simulated
//! populations used by the experiments.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngContract;

pub const INTERCEPT_LABEL: &str = "(intercept)";

/// Records with a strictly positive outcome and a predictor row each.
///
/// Predictors are stored row-major, `n × p`. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    outcomes: Vec<f64>,
    predictors: Vec<f64>,
    p: usize,
    intercept: bool,
    outcome_label: String,
    predictor_labels: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking the support and shape invariants.
    ///
    /// `predictors` is row-major with `p` columns. When `intercept` is set the
    /// first column must be all ones and is labelled [`INTERCEPT_LABEL`].
    pub fn new(
        outcomes: Vec<f64>,
        predictors: Vec<f64>,
        p: usize,
        intercept: bool,
        outcome_label: impl Into<String>,
        predictor_labels: Vec<String>,
    ) -> Result<Self> {
        let n = outcomes.len();
        if n < 2 {
            return Err(Error::Schema(format!("need at least 2 records, got {n}")));
        }
        if p == 0 {
            return Err(Error::Schema("need at least one predictor column".into()));
        }
        if predictors.len() != n * p {
            return Err(Error::Dimension(format!(
                "predictor matrix has {} entries, expected {n}×{p}",
                predictors.len()
            )));
        }
        if predictor_labels.len() != p {
            return Err(Error::Dimension(format!(
                "{} predictor labels for {p} columns",
                predictor_labels.len()
            )));
        }
        if let Some(i) = outcomes.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Parse {
                row: i + 1,
                message: format!("outcome {} is not a positive finite number", outcomes[i]),
            });
        }
        if let Some(k) = predictors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: k / p + 1,
                message: "non-finite predictor value".into(),
            });
        }
        if intercept && (0..n).any(|i| predictors[i * p] != 1.0) {
            return Err(Error::Schema("intercept column must be all ones".into()));
        }
        Ok(Self {
            outcomes,
            predictors,
            p,
            intercept,
            outcome_label: outcome_label.into(),
            predictor_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn outcome(&self, i: usize) -> f64 {
        self.outcomes[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.predictors[i * self.p..(i + 1) * self.p]
    }

    pub fn predictors(&self) -> &[f64] {
        &self.predictors
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn outcome_label(&self) -> &str {
        &self.outcome_label
    }

    pub fn predictor_labels(&self) -> &[String] {
        &self.predictor_labels
    }

    /// `log x_i` for every record.
    pub fn log_outcomes(&self) -> Vec<f64> {
        self.outcomes.iter().map(|x| x.ln()).collect()
    }

    /// Same predictors, new outcomes (used for synthetic releases).
    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<Self> {
        if outcomes.len() != self.n() {
            return Err(Error::Dimension(format!(
                "{} outcomes for {} records",
                outcomes.len(),
                self.n()
            )));
        }
        Dataset::new(
            outcomes,
            self.predictors.clone(),
            self.p,
            self.intercept,
            self.outcome_label.clone(),
            self.predictor_labels.clone(),
        )
    }

    /// Writes the dataset as CSV: outcome column, then every non-intercept
    /// predictor column. Floats use the shortest round-trip representation.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let skip = usize::from(self.intercept);
        let mut header = vec![self.outcome_label.clone()];
        header.extend(self.predictor_labels[skip..].iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.outcomes[i].to_string()];
            rec.extend(self.row(i)[skip..].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Schema that reloads a file produced by [`Dataset::write_csv`].
    pub fn identity_schema(&self) -> CsvSchema {
        let skip = usize::from(self.intercept);
        CsvSchema {
            outcome: self.outcome_label.clone(),
            predictors: self.predictor_labels[skip..]
                .iter()
                .map(|c| PredictorSpec::new(c.clone(), Transform::Identity))
                .collect(),
            intercept: self.intercept,
        }
    }
}

/// Transform applied to a predictor column at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Log,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub column: String,
    pub transform: Transform,
}

impl PredictorSpec {
    pub fn new(column: impl Into<String>, transform: Transform) -> Self {
        Self {
            column: column.into(),
            transform,
        }
    }

    /// Parses `name` or `name:log`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once(':') {
            None => Ok(Self::new(s, Transform::Identity)),
            Some((col, "log")) => Ok(Self::new(col.trim(), Transform::Log)),
            Some((col, "identity")) => Ok(Self::new(col.trim(), Transform::Identity)),
            Some((_, t)) => Err(Error::Config(format!("unknown predictor transform {t:?}"))),
        }
    }

    fn label(&self) -> String {
        match self.transform {
            Transform::Identity => self.column.clone(),
            Transform::Log => format!("log({})", self.column),
        }
    }
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub outcome: String,
    pub predictors: Vec<PredictorSpec>,
    pub intercept: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            outcome: "y".into(),
            predictors: Vec::new(),
            intercept: true,
        }
    }
}

/// Loads a dataset from a headered, comma-separated UTF-8 file.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv_from(file, schema)
}

pub fn load_csv_from<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let outcome_col = find(&schema.outcome)?;
    let predictor_cols = schema
        .predictors
        .iter()
        .map(|p| find(&p.column))
        .collect::<Result<Vec<_>>>()?;
    let p = schema.predictors.len() + usize::from(schema.intercept);
    if p == 0 {
        return Err(Error::Schema("schema declares no predictors and no intercept".into()));
    }

    let mut outcomes = Vec::new();
    let mut predictors = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        let field = |col: usize| -> Result<f64> {
            let raw = rec.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("column {:?}: cannot parse {raw:?} as a number", &header[col]),
            })
        };
        let x = field(outcome_col)?;
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::Parse {
                row,
                message: format!("outcome {x} must be strictly positive"),
            });
        }
        outcomes.push(x);
        if schema.intercept {
            predictors.push(1.0);
        }
        for (spec, &col) in schema.predictors.iter().zip(&predictor_cols) {
            let v = field(col)?;
            let v = match spec.transform {
                Transform::Identity => v,
                Transform::Log if v > 0.0 => v.ln(),
                Transform::Log => {
                    return Err(Error::Parse {
                        row,
                        message: format!("column {:?}: log of non-positive value {v}", spec.column),
                    })
                }
            };
            predictors.push(v);
        }
    }

    let mut labels = Vec::with_capacity(p);
    if schema.intercept {
        labels.push(INTERCEPT_LABEL.to_string());
    }
    labels.extend(schema.predictors.iter().map(PredictorSpec::label));
    Dataset::new(
        outcomes,
        predictors,
        p,
        schema.intercept,
        schema.outcome.clone(),
        labels,
    )
}

/// Generating process for the simulated populations:
/// `z ~ Normal(latent_mean, latent_sd)`, `log x ~ Normal(z + shift, scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub seed: u64,
    pub latent_mean: f64,
    pub latent_sd: f64,
    pub shift: f64,
    pub scale: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            seed: 1,
            latent_mean: 2.0,
            latent_sd: 1.0,
            shift: 1.0,
            scale: 1.0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if !(self.latent_sd > 0.0) || !(self.scale > 0.0) {
            return Err(Error::Config("latent_sd and scale must be positive".into()));
        }
        if !self.latent_mean.is_finite() || !self.shift.is_finite() {
            return Err(Error::Config("latent_mean and shift must be finite".into()));
        }
        Ok(())
    }
}

/// Draws a simulated population. Predictors are `[1, z_i]`.
pub fn simulate(config: &SimulationConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = RngContract::new(config.seed).stream("simulate", 0);
    let latent = Normal::new(config.latent_mean, config.latent_sd).expect("validated");
    let noise = Normal::new(0.0, config.scale).expect("validated");
    let mut outcomes = Vec::with_capacity(config.n);
    let mut predictors = Vec::with_capacity(2 * config.n);
    for _ in 0..config.n {
        let z = latent.sample(&mut rng);
        let log_x = z + config.shift + noise.sample(&mut rng);
        outcomes.push(log_x.exp());
        predictors.push(1.0);
        predictors.push(z);
    }
    Dataset::new(
        outcomes,
        predictors,
        2,
        true,
        "y",
        vec![INTERCEPT_LABEL.to_string(), "z".to_string()],
    )
}
