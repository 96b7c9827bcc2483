//! TOML run configurations. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use equinas::autodiff::Optimizer;
use equinas::data::{load_idx, prepare_splits, Augment, Dataset};
use equinas::groups::PointGroup;
use equinas::model::BackboneSpec;
use equinas::nas_diff::DiffConfig;
use equinas::nas_evo::EvoConfig;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

fn d_train() -> usize {
    2000
}
fn d_val() -> usize {
    200
}
fn d_test() -> usize {
    1000
}
fn d_augment() -> Augment {
    Augment::Rot
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// IDX image file, optionally gzipped.
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "d_train")]
    pub n_train: usize,
    #[serde(default = "d_val")]
    pub n_val: usize,
    #[serde(default = "d_test")]
    pub n_test: usize,
    #[serde(default = "d_augment")]
    pub augment: Augment,
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn load(&self, seed: u64) -> Result<Splits> {
        let pool = load_idx(&self.images, &self.labels).with_context(|| {
            format!(
                "loading dataset {} / {} (set [data] images and labels to IDX files)",
                self.images.display(),
                self.labels.display()
            )
        })?;
        let (train, val, test) = prepare_splits(&pool, [self.n_train, self.n_val, self.n_test], self.augment, seed)
            .with_context(|| format!("splitting {} samples", pool.len()))?;
        Ok(Splits { train, val, test })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_sgd")]
    pub optimizer: Optimizer,
    #[serde(default = "d_epochs")]
    pub epochs: f64,
    #[serde(default = "d_recal")]
    pub bn_recalibration: usize,
}

fn d_batch() -> usize {
    64
}
fn d_sgd() -> Optimizer {
    Optimizer::sgd(0.1)
}
fn d_epochs() -> f64 {
    5.0
}
fn d_recal() -> usize {
    1024
}
fn d_out_train() -> PathBuf {
    "runs/train".into()
}
fn d_out_evo() -> PathBuf {
    "runs/evo".into()
}
fn d_out_diff() -> PathBuf {
    "runs/diff".into()
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: d_batch(),
            optimizer: d_sgd(),
            epochs: d_epochs(),
            bn_recalibration: d_recal(),
        }
    }
}

/// Start from an `initial`-equivariant network relaxed to `relaxed_to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub initial: PointGroup,
    pub relaxed_to: PointGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_out_train")]
    pub out: PathBuf,
    /// Checkpoint evaluated by `--eval-only` (defaults to `<out>/model.ckpt`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: BackboneSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvoFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_out_evo")]
    pub out: PathBuf,
    pub data: DataConfig,
    /// Backbone; its mode is replaced by the all-`initial_group` genotype.
    pub model: BackboneSpec,
    #[serde(default)]
    pub evo: EvoConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    RandomZ,
}

fn d_ablation() -> Ablation {
    Ablation::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_out_diff")]
    pub out: PathBuf,
    pub data: DataConfig,
    /// Must use `mode = { kind = "mixed", groups = [...] }`.
    pub model: BackboneSpec,
    #[serde(default)]
    pub diff: DiffConfig,
    #[serde(default = "d_ablation")]
    pub ablation: Ablation,
    /// Retrain fresh weights under the final mixture.
    #[serde(default)]
    pub retrain: bool,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

pub trait RunConfig: Serialize + DeserializeOwned {
    fn apply(&mut self, o: &Overrides);
    fn out(&self) -> &Path;
}

impl RunConfig for TrainFile {
    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
    }
    fn out(&self) -> &Path {
        &self.out
    }
}

impl RunConfig for EvoFile {
    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(w) = o.workers {
            self.evo.workers = w;
        }
        self.evo.seed = self.seed;
    }
    fn out(&self) -> &Path {
        &self.out
    }
}

impl RunConfig for DiffFile {
    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        self.diff.seed = self.seed;
    }
    fn out(&self) -> &Path {
        &self.out
    }
}

pub fn parse<C: RunConfig>(text: &str, o: &Overrides) -> Result<C> {
    let mut c: C = toml::from_str(text)?;
    c.apply(o);
    Ok(c)
}

/// Reads, overrides and writes the resolved config to `<out>/config.resolved.toml`.
pub fn resolve<C: RunConfig>(path: &Path, o: &Overrides) -> Result<C> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let c: C = parse(&text, o).with_context(|| format!("parsing config {}", path.display()))?;
    std::fs::create_dir_all(c.out()).with_context(|| format!("creating {}", c.out().display()))?;
    let resolved = toml::to_string_pretty(&c)?;
    std::fs::write(c.out().join("config.resolved.toml"), resolved)?;
    Ok(c)
}

pub fn require(cond: bool, msg: &str) -> Result<()> {
    if !cond {
        bail!("{msg}");
    }
    Ok(())
}
