//! Model profiles and the statistical prediction oracle.
//!
//! The oracle replaces real inference: a model answers correctly for class `c`
//! with probability `a[m][c]`, otherwise it emits a wrong label. Every draw is
//! keyed by `(seed, model, query index)` so a replay is bit-identical and
//! removing a model from an ensemble does not move anyone else's draws.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::KeyedRng;

/// Index of a model inside its [`Zoo`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModelId(pub u16);

impl ModelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelProfile {
    pub id: ModelId,
    /// The `model_id` column of the zoo file.
    pub key: String,
    pub name: String,
    /// Parameter count in units of 10k.
    pub param_count: f64,
    pub top1_accuracy: f64,
    pub service_latency_ms: f64,
    /// Concurrent inference slots on the reference (xlarge) instance size.
    pub base_packing_factor: u32,
    /// Slots on a GPU instance, when the model may be served from one.
    pub gpu_packing_factor: Option<u32>,
}

impl ModelProfile {
    fn validate(&self) -> Result<()> {
        let bad = |message: String| {
            Err(Error::InvalidModel {
                model: self.key.clone(),
                message,
            })
        };
        if !(self.top1_accuracy > 0.0 && self.top1_accuracy < 1.0) {
            return bad(format!("top1 accuracy {} outside (0,1)", self.top1_accuracy));
        }
        if !(self.service_latency_ms > 0.0 && self.service_latency_ms.is_finite()) {
            return bad(format!("latency {} ms is not positive", self.service_latency_ms));
        }
        if self.base_packing_factor == 0 {
            return bad("packing factor must be at least 1".into());
        }
        if self.gpu_packing_factor == Some(0) {
            return bad("gpu packing factor must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BundledZoo {
    Imagenet,
    Sentiment,
}

impl BundledZoo {
    pub fn default_num_classes(self) -> usize {
        match self {
            BundledZoo::Imagenet => 1000,
            BundledZoo::Sentiment => 2,
        }
    }

    fn csv(self) -> &'static str {
        match self {
            BundledZoo::Imagenet => include_str!("../data/imagenet_zoo.csv"),
            BundledZoo::Sentiment => include_str!("../data/sentiment_zoo.csv"),
        }
    }

    fn label(self) -> &'static str {
        match self {
            BundledZoo::Imagenet => "<bundled imagenet zoo>",
            BundledZoo::Sentiment => "<bundled sentiment zoo>",
        }
    }
}

/// A validated, immutable collection of model profiles.
#[derive(Clone, Debug, Serialize)]
pub struct Zoo {
    models: Vec<ModelProfile>,
}

impl Zoo {
    pub fn new(models: Vec<ModelProfile>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::EmptyInput("model zoo"));
        }
        if models.len() > usize::from(u16::MAX) {
            return Err(Error::config("zoo", "too many models"));
        }
        let mut seen = HashSet::new();
        for (i, m) in models.iter().enumerate() {
            m.validate()?;
            if m.id.index() != i {
                return Err(Error::InvalidModel {
                    model: m.key.clone(),
                    message: format!("id {} does not match position {i}", m.id),
                });
            }
            if !seen.insert(m.key.as_str()) {
                return Err(Error::InvalidModel {
                    model: m.key.clone(),
                    message: "duplicate model_id".into(),
                });
            }
        }
        Ok(Self { models })
    }

    pub fn bundled(which: BundledZoo) -> Self {
        parse_zoo_csv(which.csv().as_bytes(), Path::new(which.label()))
            .expect("bundled zoo is valid")
    }

    pub fn models(&self) -> &[ModelProfile] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get(&self, id: ModelId) -> &ModelProfile {
        &self.models[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = ModelId> + '_ {
        self.models.iter().map(|m| m.id)
    }

    pub fn by_key(&self, key: &str) -> Option<&ModelProfile> {
        self.models.iter().find(|m| m.key == key)
    }
}

#[derive(Debug, Deserialize)]
struct ZooRow {
    model_id: String,
    name: String,
    params_10k: String,
    top1: String,
    latency_ms: String,
    pf: String,
    #[serde(default)]
    gpu_pf: Option<String>,
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    field: &str,
    raw: &str,
) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::parse(path, line, field, format!("cannot parse `{raw}`")))
}

fn parse_zoo_csv(bytes: &[u8], path: &Path) -> Result<Zoo> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let mut models = Vec::new();
    for (i, row) in reader.deserialize::<ZooRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(path, line, "row", e.to_string()))?;
        let gpu_packing_factor = match row.gpu_pf.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(raw) => Some(parse_field(path, line, "gpu_pf", raw)?),
        };
        let id = ModelId(
            u16::try_from(models.len()).map_err(|_| Error::config("zoo", "too many models"))?,
        );
        let profile = ModelProfile {
            id,
            name: row.name,
            param_count: parse_field(path, line, "params_10k", &row.params_10k.replace(',', ""))?,
            top1_accuracy: parse_field(path, line, "top1", &row.top1)?,
            service_latency_ms: parse_field(path, line, "latency_ms", &row.latency_ms)?,
            base_packing_factor: parse_field(path, line, "pf", &row.pf)?,
            gpu_packing_factor,
            key: row.model_id,
        };
        models.push(profile);
    }
    Zoo::new(models)
}

/// Per-model, per-class probability of a correct answer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccuracyMatrix {
    num_classes: usize,
    entries: Vec<f64>,
}

/// Allowed gap between a row mean and the model's top-1 accuracy.
pub const ROW_MEAN_TOLERANCE: f64 = 0.005;

impl ClassAccuracyMatrix {
    /// Builds and validates a matrix from row-major entries (`rows[m][c]`).
    pub fn new(zoo: &Zoo, num_classes: usize, entries: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidMatrix("need at least 2 classes".into()));
        }
        if entries.len() != zoo.len() * num_classes {
            return Err(Error::InvalidMatrix(format!(
                "expected {} entries, got {}",
                zoo.len() * num_classes,
                entries.len()
            )));
        }
        let matrix = Self {
            num_classes,
            entries,
        };
        for m in zoo.models() {
            let row = matrix.row(m.id);
            if let Some(bad) = row.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
                return Err(Error::InvalidModel {
                    model: m.key.clone(),
                    message: format!("class accuracy {bad} outside (0,1)"),
                });
            }
            let mean = row.iter().sum::<f64>() / num_classes as f64;
            if (mean - m.top1_accuracy).abs() > ROW_MEAN_TOLERANCE + 1e-12 {
                return Err(Error::InvalidModel {
                    model: m.key.clone(),
                    message: format!(
                        "mean class accuracy {mean:.4} differs from top1 {:.4}",
                        m.top1_accuracy
                    ),
                });
            }
        }
        Ok(matrix)
    }

    /// Every class gets the model's top-1 accuracy.
    pub fn homogeneous(zoo: &Zoo, num_classes: usize) -> Result<Self> {
        let entries = zoo
            .models()
            .iter()
            .flat_map(|m| std::iter::repeat_n(m.top1_accuracy, num_classes))
            .collect();
        Self::new(zoo, num_classes, entries)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_models(&self) -> usize {
        self.entries.len() / self.num_classes
    }

    pub fn get(&self, model: ModelId, class: usize) -> f64 {
        self.entries[model.index() * self.num_classes + class]
    }

    pub fn row(&self, model: ModelId) -> &[f64] {
        let start = model.index() * self.num_classes;
        &self.entries[start..start + self.num_classes]
    }

    pub fn row_mean(&self, model: ModelId) -> f64 {
        self.row(model).iter().sum::<f64>() / self.num_classes as f64
    }

    /// Raw row-major entries; bypasses validation (for constructing test fixtures).
    #[doc(hidden)]
    pub fn from_raw(num_classes: usize, entries: Vec<f64>) -> Self {
        Self {
            num_classes,
            entries,
        }
    }
}

/// Load a zoo CSV and, optionally, a per-class accuracy CSV
/// (`model_id,class,accuracy`). Without a matrix file every class gets the
/// model's top-1 accuracy.
pub fn load_zoo(
    profile_file: &Path,
    class_matrix_file: Option<&Path>,
    num_classes: usize,
) -> Result<(Zoo, ClassAccuracyMatrix)> {
    let bytes = std::fs::read(profile_file).map_err(|e| Error::io(profile_file, e))?;
    let zoo = parse_zoo_csv(&bytes, profile_file)?;
    let matrix = match class_matrix_file {
        Some(path) => load_class_matrix(&zoo, path, num_classes)?,
        None => ClassAccuracyMatrix::homogeneous(&zoo, num_classes)?,
    };
    Ok((zoo, matrix))
}

/// Read a per-class accuracy CSV `model_id,class,accuracy` for `zoo`.
pub fn load_class_matrix(zoo: &Zoo, path: &Path, num_classes: usize) -> Result<ClassAccuracyMatrix> {
    #[derive(Deserialize)]
    struct Row {
        model_id: String,
        class: String,
        accuracy: String,
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, 1, "header", e.to_string()))?;
    let mut entries = vec![f64::NAN; zoo.len() * num_classes];
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(path, line, "row", e.to_string()))?;
        let model = zoo
            .by_key(&row.model_id)
            .ok_or_else(|| Error::parse(path, line, "model_id", format!("unknown model `{}`", row.model_id)))?;
        let class: usize = parse_field(path, line, "class", &row.class)?;
        if class >= num_classes {
            return Err(Error::parse(path, line, "class", format!("class {class} >= {num_classes}")));
        }
        let accuracy: f64 = parse_field(path, line, "accuracy", &row.accuracy)?;
        entries[model.id.index() * num_classes + class] = accuracy;
    }
    if let Some(pos) = entries.iter().position(|a| a.is_nan()) {
        let model = &zoo.models()[pos / num_classes];
        return Err(Error::InvalidModel {
            model: model.key.clone(),
            message: format!("missing accuracy for class {}", pos % num_classes),
        });
    }
    ClassAccuracyMatrix::new(zoo, num_classes, entries)
}

const CLAMP_LO: f64 = 0.01;
const CLAMP_HI: f64 = 0.99;

/// Build a class matrix from one shared difficulty vector `d[c]` drawn
/// uniformly in `[-spread, spread]`: `a[m][c] = clamp(top1_m + d[c])`, then each
/// row is shifted back until its mean equals `top1_m`.
pub fn synthesize_class_matrix(
    zoo: &Zoo,
    num_classes: usize,
    difficulty_spread: f64,
    seed: u64,
) -> Result<ClassAccuracyMatrix> {
    if num_classes < 2 {
        return Err(Error::InvalidMatrix("need at least 2 classes".into()));
    }
    if !(0.0..=0.05).contains(&difficulty_spread) {
        return Err(Error::config(
            "difficulty_spread",
            format!("{difficulty_spread} outside [0, 0.05]"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let difficulty: Vec<f64> = (0..num_classes)
        .map(|_| {
            if difficulty_spread == 0.0 {
                0.0
            } else {
                rng.gen_range(-difficulty_spread..=difficulty_spread)
            }
        })
        .collect();

    let mut entries = Vec::with_capacity(zoo.len() * num_classes);
    for m in zoo.models() {
        let top1 = m.top1_accuracy;
        let mut row: Vec<f64> = difficulty
            .iter()
            .map(|d| (top1 + d).clamp(CLAMP_LO, CLAMP_HI))
            .collect();
        for _ in 0..64 {
            let mean = row.iter().sum::<f64>() / num_classes as f64;
            let shift = top1 - mean;
            if shift.abs() < 1e-12 {
                break;
            }
            for a in row.iter_mut() {
                *a = (*a + shift).clamp(CLAMP_LO, CLAMP_HI);
            }
        }
        let mean = row.iter().sum::<f64>() / num_classes as f64;
        if (mean - top1).abs() > ROW_MEAN_TOLERANCE / 10.0 {
            return Err(Error::InfeasibleRenormalization {
                model: m.key.clone(),
                top1,
                spread: difficulty_spread,
            });
        }
        entries.extend(row);
    }
    ClassAccuracyMatrix::new(zoo, num_classes, entries)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WrongLabelDistribution {
    /// Wrong answers are uniform over the `L - 1` other classes.
    #[default]
    UniformOverWrong,
    /// Every model confuses class `c` with the same partner class.
    SharedConfusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionOracleConfig {
    pub rng_seed: u64,
    pub wrong_label_distribution: WrongLabelDistribution,
    /// Weight with which a wrong model follows the per-query shared wrong label.
    pub error_correlation: f64,
}

impl Default for PredictionOracleConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            wrong_label_distribution: WrongLabelDistribution::UniformOverWrong,
            error_correlation: 0.0,
        }
    }
}

impl PredictionOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.error_correlation) {
            return Err(Error::config(
                "zoo.oracle.error_correlation",
                format!("{} outside [0,1)", self.error_correlation),
            ));
        }
        Ok(())
    }
}

const SHARED_STREAM: u64 = u64::MAX;
const PARTNER_STREAM: u64 = u64::MAX - 1;

/// Stateless stand-in for model inference.
#[derive(Clone, Debug)]
pub struct PredictionOracle {
    matrix: ClassAccuracyMatrix,
    config: PredictionOracleConfig,
    rng: KeyedRng,
    confusion_partner: Vec<u32>,
}

impl PredictionOracle {
    pub fn new(matrix: ClassAccuracyMatrix, config: PredictionOracleConfig) -> Result<Self> {
        config.validate()?;
        let rng = KeyedRng::new(config.rng_seed);
        let l = matrix.num_classes() as u64;
        let confusion_partner = (0..l)
            .map(|c| ((c + 1 + rng.below(PARTNER_STREAM, c, 0, l - 1)) % l) as u32)
            .collect();
        Ok(Self {
            matrix,
            config,
            rng,
            confusion_partner,
        })
    }

    pub fn matrix(&self) -> &ClassAccuracyMatrix {
        &self.matrix
    }

    pub fn config(&self) -> &PredictionOracleConfig {
        &self.config
    }

    fn wrong_label(&self, true_class: usize, stream: u64, index: u64, slot: u8) -> usize {
        match self.config.wrong_label_distribution {
            WrongLabelDistribution::SharedConfusion => self.confusion_partner[true_class] as usize,
            WrongLabelDistribution::UniformOverWrong => {
                let l = self.matrix.num_classes() as u64;
                let k = self.rng.below(stream, index, slot, l - 1) as usize;
                if k < true_class {
                    k
                } else {
                    k + 1
                }
            }
        }
    }

    /// The label `model` outputs for the query at `stream_position`.
    pub fn predict(&self, model: ModelId, true_class: usize, stream_position: u64) -> usize {
        let stream = u64::from(model.0);
        let accuracy = self.matrix.get(model, true_class);
        if self.rng.unit(stream, stream_position, 0) < accuracy {
            return true_class;
        }
        let rho = self.config.error_correlation;
        if rho > 0.0 && self.rng.unit(stream, stream_position, 1) < rho {
            self.wrong_label(true_class, SHARED_STREAM, stream_position, 0)
        } else {
            self.wrong_label(true_class, stream, stream_position, 2)
        }
    }
}

/// Resolve a zoo source described by a path or a bundled name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZooSource {
    Bundled { bundled: BundledZoo },
    File { path: PathBuf },
}
