//! TOML experiment manifests.
//!
//! ```toml
//! [run]
//! mode = "spider"        # spider | ditto | fedavg | local-adapt
//! seed = 0
//! rounds = 40
//! eval_every = 10
//! out = "out"
//!
//! [dataset]
//! source = "synthetic"   # or "cifar10:<path>" / "cifar100:<path>"
//! classes = 10
//! per_class = 60
//! image_size = 8
//!
//! [supernet]
//! num_cells = 2
//! init_channels = 4
//!
//! [trainer]
//! lambda = 0.1
//!
//! [search]
//! warmup_rounds = 5
//! tau = 2
//!
//! [partition]
//! clients = 8
//! alpha = 0.2
//! ```
//!
//! Every section and key is optional; unknown keys are rejected. `[splits]` defaults to
//! 50/30/20 for `spider` and 80/0/20 for the baselines.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{
    load_cifar_binary, synth_dataset, CifarFormat, LabeledDataset, PartitionSpec, SplitFractions, SynthConfig,
};
use crate::error::{Error, Result};
use crate::federation::{RunConfig, DEFAULT_EVAL_BATCH};
use crate::searcher::SearchSchedule;
use crate::space::{ArchMask, SupernetSpec};
use crate::trainer::{Mode, TrainerConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Cifar10(PathBuf),
    Cifar100(PathBuf),
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Synthetic => f.write_str("synthetic"),
            DatasetSource::Cifar10(p) => write!(f, "cifar10:{}", p.display()),
            DatasetSource::Cifar100(p) => write!(f, "cifar100:{}", p.display()),
        }
    }
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DatasetSource::Synthetic);
        }
        match s.split_once(':') {
            Some(("cifar10", p)) if !p.is_empty() => Ok(DatasetSource::Cifar10(p.into())),
            Some(("cifar100", p)) if !p.is_empty() => Ok(DatasetSource::Cifar100(p.into())),
            _ => Err(Error::Config(format!(
                "dataset source `{s}` must be `synthetic`, `cifar10:<path>` or `cifar100:<path>`"
            ))),
        }
    }
}

impl Serialize for DatasetSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DatasetSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub seed: u64,
    pub rounds: usize,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub out: PathBuf,
    pub parallel: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            mode: Mode::Spider,
            seed: 0,
            rounds: 40,
            eval_every: 10,
            eval_batch: DEFAULT_EVAL_BATCH,
            out: PathBuf::from("out"),
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// Synthetic only.
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub noise: f32,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DatasetSource::Synthetic,
            classes: 10,
            per_class: 60,
            image_size: 8,
            noise: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupernetSection {
    pub num_cells: usize,
    pub init_channels: usize,
    /// 0-based reduction cell positions; defaults to one and two thirds of the depth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction_cells: Option<Vec<usize>>,
}

impl Default for SupernetSection {
    fn default() -> Self {
        SupernetSection {
            num_cells: 8,
            init_channels: 16,
            reduction_cells: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub eta_w: f32,
    pub eta_v: f32,
    pub lambda: f32,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f32,
    /// JSON mask file fixing the Ditto architecture; the full supernet when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_mask: Option<PathBuf>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        TrainerSection {
            eta_w: t.eta_w,
            eta_v: t.eta_v,
            lambda: t.lambda,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            finetune_epochs: t.finetune_epochs,
            finetune_lr: t.finetune_lr,
            fixed_mask: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub warmup_rounds: usize,
    pub tau: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            warmup_rounds: 5,
            tau: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub clients: usize,
    pub alpha: f64,
    pub min_samples: usize,
    pub max_retries: usize,
    /// Reuse a saved partition instead of drawing one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            clients: 8,
            alpha: 0.2,
            min_samples: 1,
            max_retries: 100,
            manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsSection {
    pub train: f64,
    #[serde(default)]
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentManifest {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub supernet: SupernetSection,
    pub trainer: TrainerSection,
    pub search: SearchSection,
    pub partition: PartitionSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitsSection>,
}

/// 1-based line of `key` inside `[section]`, if the text sets it.
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Violation {
    section: &'static str,
    key: &'static str,
    message: String,
}

fn check(
    cond: bool,
    section: &'static str,
    key: &'static str,
    message: impl Into<String>,
) -> std::result::Result<(), Violation> {
    if cond {
        Ok(())
    } else {
        Err(Violation {
            section,
            key,
            message: message.into(),
        })
    }
}

impl ExperimentManifest {
    pub fn dataset_classes(&self) -> usize {
        match self.dataset.source {
            DatasetSource::Synthetic => self.dataset.classes,
            DatasetSource::Cifar10(_) => 10,
            DatasetSource::Cifar100(_) => 100,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.dataset.source {
            DatasetSource::Synthetic => [3, self.dataset.image_size, self.dataset.image_size],
            _ => [3, 32, 32],
        }
    }

    pub fn fractions(&self) -> SplitFractions {
        match &self.splits {
            Some(s) => SplitFractions {
                train: s.train,
                val: s.val,
                test: s.test,
            },
            None if self.run.mode == Mode::Spider => SplitFractions::SEARCH,
            None => SplitFractions::BASELINE,
        }
    }

    pub fn spec(&self) -> SupernetSpec {
        let mut spec = SupernetSpec::new(
            self.supernet.num_cells,
            self.supernet.init_channels,
            self.dataset_classes(),
            self.input_shape(),
        );
        if let Some(r) = &self.supernet.reduction_cells {
            spec.reduction_cells = r.clone();
        }
        spec
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            eta_w: t.eta_w,
            eta_v: t.eta_v,
            lambda: t.lambda,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            mode: self.run.mode,
            finetune_epochs: t.finetune_epochs,
            finetune_lr: t.finetune_lr,
        }
    }

    /// The simulator configuration. `fixed_mask` is the loaded `trainer.fixed_mask` file.
    pub fn run_config(&self, fixed_mask: Option<ArchMask>) -> RunConfig {
        let p = &self.partition;
        RunConfig {
            spec: self.spec(),
            trainer: self.trainer_config(),
            schedule: SearchSchedule {
                warmup_rounds: self.search.warmup_rounds,
                tau: self.search.tau,
            },
            partition: PartitionSpec {
                clients: p.clients,
                alpha: p.alpha,
                seed: self.run.seed,
                min_samples: p.min_samples,
                max_retries: p.max_retries,
            },
            fractions: self.fractions(),
            seed: self.run.seed,
            rounds: self.run.rounds,
            eval_every: self.run.eval_every,
            eval_batch: self.run.eval_batch,
            fixed_mask,
            parallel: self.run.parallel,
        }
    }

    fn violation(&self) -> Option<Violation> {
        let positive = |v: f32| v > 0.0 && v.is_finite();
        let t = &self.trainer;
        let checks = [
            check(self.run.eval_every >= 1, "run", "eval_every", "must be at least 1"),
            check(self.run.eval_batch >= 1, "run", "eval_batch", "must be at least 1"),
            check(self.dataset.classes >= 1, "dataset", "classes", "must be at least 1"),
            check(
                self.dataset.per_class >= 1,
                "dataset",
                "per_class",
                "must be at least 1",
            ),
            check(
                self.dataset.image_size >= 1,
                "dataset",
                "image_size",
                "must be at least 1",
            ),
            check(
                self.dataset.noise >= 0.0 && self.dataset.noise.is_finite(),
                "dataset",
                "noise",
                "must be >= 0",
            ),
            check(
                self.supernet.num_cells >= 1,
                "supernet",
                "num_cells",
                "must be at least 1",
            ),
            check(
                self.supernet.init_channels >= 1,
                "supernet",
                "init_channels",
                "must be at least 1",
            ),
            check(positive(t.eta_w), "trainer", "eta_w", "must be positive"),
            check(positive(t.eta_v), "trainer", "eta_v", "must be positive"),
            check(
                t.lambda >= 0.0 && t.lambda.is_finite(),
                "trainer",
                "lambda",
                "must be >= 0",
            ),
            check(t.local_epochs >= 1, "trainer", "local_epochs", "must be at least 1"),
            check(t.batch_size >= 1, "trainer", "batch_size", "must be at least 1"),
            check(
                t.finetune_lr >= 0.0 && t.finetune_lr.is_finite(),
                "trainer",
                "finetune_lr",
                "must be >= 0",
            ),
            check(self.search.tau >= 1, "search", "tau", "must be at least 1"),
            check(
                self.partition.clients >= 1,
                "partition",
                "clients",
                "must be at least 1",
            ),
            check(
                self.partition.alpha > 0.0 && self.partition.alpha.is_finite(),
                "partition",
                "alpha",
                "must be positive",
            ),
        ];
        if let Some(v) = checks.into_iter().find_map(|c| c.err()) {
            return Some(v);
        }
        if let Err(e) = self.spec().validate() {
            return Some(Violation {
                section: "supernet",
                key: "reduction_cells",
                message: e.to_string(),
            });
        }
        if let Err(e) = self.fractions().validate() {
            return Some(Violation {
                section: "splits",
                key: "train",
                message: e.to_string(),
            });
        }
        if self.run.mode == Mode::Spider && self.fractions().val <= 0.0 {
            return Some(Violation {
                section: "splits",
                key: "val",
                message: "spider needs a non-empty validation split".into(),
            });
        }
        None
    }

    /// Constraint check; `text` (when given) is searched to report the offending line.
    pub fn validate(&self, text: Option<&str>) -> Result<()> {
        match self.violation() {
            None => Ok(()),
            Some(v) => {
                let line = text
                    .and_then(|t| key_line(t, v.section, v.key))
                    .map(|n| format!(" (line {n})"))
                    .unwrap_or_default();
                Err(Error::Config(format!("{}.{}{line}: {}", v.section, v.key, v.message)))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialization cannot fail")
    }

    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        match &self.dataset.source {
            DatasetSource::Synthetic => synth_dataset(&SynthConfig {
                classes: self.dataset.classes,
                per_class: self.dataset.per_class,
                channels: 3,
                image_size: self.dataset.image_size,
                noise: self.dataset.noise,
                seed: self.run.seed,
            }),
            DatasetSource::Cifar10(p) => load_cifar_binary(p, CifarFormat::Cifar10),
            DatasetSource::Cifar100(p) => load_cifar_binary(p, CifarFormat::Cifar100),
        }
    }
}

/// Parses and validates a manifest, applying documented defaults.
pub fn parse_manifest(text: &str) -> Result<ExperimentManifest> {
    let m: ExperimentManifest =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    m.validate(Some(text))?;
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<ExperimentManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}
