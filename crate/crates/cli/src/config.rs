//! Strict JSON run configurations.
//!
//! Every config file carries a `schema_version` and is parsed with
//! `deny_unknown_fields`, so a typo'd key fails loudly before any compute
//! starts. Fields with obvious defaults may be omitted; structural choices
//! (which dataset, which checkpoint) are always explicit.

use crate::run::Failure;
use esmlab_core::dataset::LabeledDataset;
use esmlab_core::denoiser::DenoiserConfig;
use esmlab_core::distill::DistillConfig;
use esmlab_core::schedule::ScheduleParams;
use esmlab_core::tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// Reads and strictly parses a config file: the JSON must carry
/// `schema_version` equal to [`SCHEMA_VERSION`] and contain no unknown keys.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| {
            Failure::Config(format!(
                "config {}: missing schema_version",
                path.display()
            ))
        })?;
    if version != SCHEMA_VERSION as u64 {
        return Err(Failure::Config(format!(
            "config {}: schema_version {version} (this build reads {SCHEMA_VERSION})",
            path.display()
        )));
    }
    serde_json::from_value(value)
        .map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))
}

/// Which toy dataset to build. The dataset defines the image side length and
/// the class count; commands that read a checkpoint verify the sides match.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Procedural disk / cross / ring images.
    Shapes {
        n_per_class: usize,
        side: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Synthetic x0 ~ N(μ, σ_d²·I) with a fixed radial-bump mean image;
    /// pairs with the closed-form optimal noise predictor.
    Gaussian {
        side: usize,
        n: usize,
        sigma_d: f64,
        #[serde(default = "default_mu_peak")]
        mu_peak: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_mu_peak() -> f64 {
    0.6
}

/// The deterministic mean image used by [`DatasetSpec::Gaussian`]: a radial
/// bump of the given peak value centered on the canvas, σ = side/4.
pub fn gaussian_mu(side: usize, peak: f64) -> Tensor<f32> {
    let half = side as f64 / 2.0;
    let two_var = 2.0 * (side as f64 / 4.0).powi(2);
    let mut data = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let dx = col as f64 + 0.5 - half;
            let dy = row as f64 + 0.5 - half;
            data.push((peak * (-(dx * dx + dy * dy) / two_var).exp()) as f32);
        }
    }
    Tensor::new(vec![side * side], data)
}

impl DatasetSpec {
    pub fn side(&self) -> usize {
        match *self {
            DatasetSpec::Shapes { side, .. } | DatasetSpec::Gaussian { side, .. } => side,
        }
    }

    pub fn build(&self) -> Result<LabeledDataset<f32>, Failure> {
        match *self {
            DatasetSpec::Shapes {
                n_per_class,
                side,
                seed,
            } => {
                if n_per_class == 0 || side < 4 {
                    return Err(Failure::Config(format!(
                        "shapes dataset needs n_per_class >= 1 and side >= 4, got {n_per_class} / {side}"
                    )));
                }
                Ok(LabeledDataset::shapes(n_per_class, side, seed))
            }
            DatasetSpec::Gaussian {
                side,
                n,
                sigma_d,
                mu_peak,
                seed,
            } => {
                let mu = gaussian_mu(side, mu_peak);
                LabeledDataset::gaussian(&mu, sigma_d, side, n, seed).map_err(Failure::from)
            }
        }
    }
}

/// Denoiser architecture knobs (side and class count come from the dataset).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_width: 192,
            hidden_layers: 2,
            time_embed_dim: 32,
            class_embed_dim: 16,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn to_config(self, side: usize, num_classes: usize) -> DenoiserConfig {
        DenoiserConfig {
            side,
            num_classes,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            time_embed_dim: self.time_embed_dim,
            class_embed_dim: self.class_embed_dim,
        }
    }
}

/// Mirrors the core training knobs with serde defaults.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub cond_drop_prob: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            steps: 5000,
            lr: 1e-3,
            batch_size: 32,
            cond_drop_prob: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDenoiserConfig {
    pub schema_version: u32,
    #[serde(default = "default_train_name")]
    pub run_name: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
}

fn default_train_name() -> String {
    "train-denoiser".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundtripConfig {
    pub schema_version: u32,
    #[serde(default = "default_roundtrip_name")]
    pub run_name: String,
    pub checkpoint: PathBuf,
    /// Number of random latent states per grid point.
    #[serde(default = "default_states")]
    pub states: usize,
    /// Interval widths δ: each state round-trips s → s+δ → s.
    #[serde(default = "default_delta_grid")]
    pub delta_grid: Vec<usize>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
    /// Arithmetic the round trips run in (the checkpoint itself is f32).
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_roundtrip_name() -> String {
    "roundtrip".into()
}
fn default_states() -> usize {
    100
}
fn default_delta_grid() -> Vec<usize> {
    vec![25, 50, 150, 200]
}
fn default_rho() -> f64 {
    0.93
}
fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    DataFitted,
}

/// Splat-scene construction knobs shared by the distillation commands.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_splats: usize,
    pub init: InitKind,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_splats: 24,
            init: InitKind::Random,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillFileConfig {
    pub schema_version: u32,
    #[serde(default = "default_distill_name")]
    pub run_name: String,
    pub checkpoint: PathBuf,
    /// Dataset the class-mean target (and data-fitted init) comes from; its
    /// side must match the checkpoint's.
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub scene: SceneSpec,
    /// Sample a mildly jittered camera each iteration instead of the
    /// identity view.
    #[serde(default)]
    pub pose_jitter: bool,
    /// Write a resumable scene (and adapter) snapshot every this many
    /// iterations; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub snapshot_every: usize,
}

fn default_distill_name() -> String {
    "distill".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Rho,
    DeltaS,
    DeltaT,
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParameter::Rho => "rho",
            SweepParameter::DeltaS => "delta_s",
            SweepParameter::DeltaT => "delta_t",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFileConfig {
    pub schema_version: u32,
    #[serde(default = "default_sweep_name")]
    pub run_name: String,
    pub checkpoint: PathBuf,
    pub dataset: DatasetSpec,
    /// Per-run template; `parameter` and the seed are overridden per run.
    #[serde(default)]
    pub base: DistillConfig,
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default)]
    pub pose_jitter: bool,
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_sweep_name() -> String {
    "sweep".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitCompareConfig {
    pub schema_version: u32,
    #[serde(default = "default_init_compare_name")]
    pub run_name: String,
    pub checkpoint: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Splat count for both arms; the init mode is what the command varies.
    #[serde(default)]
    pub n_splats: usize,
    #[serde(default)]
    pub pose_jitter: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_init_compare_name() -> String {
    "init-compare".into()
}

impl InitCompareConfig {
    pub fn splats(&self) -> usize {
        if self.n_splats == 0 {
            SceneSpec::default().n_splats
        } else {
            self.n_splats
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "bad.json",
            r#"{"schema_version":1,"dataset":{"kind":"shapes","n_per_class":2,"side":8},"typo_field":3}"#,
        );
        let err = load_config::<TrainDenoiserConfig>(&path).unwrap_err();
        assert!(matches!(err, Failure::Config(_)), "{err}");
        assert!(err.to_string().contains("typo_field"), "{err}");
    }

    #[test]
    fn schema_version_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let missing = write(dir.path(), "missing.json", r#"{"dataset":{"kind":"shapes","n_per_class":2,"side":8}}"#);
        assert!(load_config::<TrainDenoiserConfig>(&missing)
            .unwrap_err()
            .to_string()
            .contains("schema_version"));
        let future = write(
            dir.path(),
            "future.json",
            r#"{"schema_version":9,"dataset":{"kind":"shapes","n_per_class":2,"side":8}}"#,
        );
        assert!(load_config::<TrainDenoiserConfig>(&future)
            .unwrap_err()
            .to_string()
            .contains("schema_version 9"));
    }

    #[test]
    fn defaults_fill_in_everything_optional() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "minimal.json",
            r#"{"schema_version":1,"dataset":{"kind":"shapes","n_per_class":4,"side":8,"seed":3}}"#,
        );
        let cfg: TrainDenoiserConfig = load_config(&path).unwrap();
        assert_eq!(cfg.run_name, "train-denoiser");
        assert_eq!(cfg.train.steps, 5000);
        assert_eq!(cfg.model.hidden_layers, 2);
        assert_eq!(cfg.schedule.t_max, 1000);
    }

    #[test]
    fn gaussian_mu_is_a_centered_bump() {
        let side = 8;
        let mu = gaussian_mu(side, 0.5);
        assert_eq!(mu.len(), side * side);
        let center = mu.data()[3 * side + 3].max(mu.data()[4 * side + 4]);
        let corner = mu.data()[0];
        assert!(center > 0.45, "center {center}");
        assert!(corner < center / 2.0, "corner {corner} vs center {center}");
    }

    #[test]
    fn dataset_spec_builds_and_validates() {
        let shapes = DatasetSpec::Shapes {
            n_per_class: 2,
            side: 8,
            seed: 0,
        };
        assert_eq!(shapes.build().unwrap().num_classes(), 3);
        let broken = DatasetSpec::Shapes {
            n_per_class: 0,
            side: 8,
            seed: 0,
        };
        assert!(broken.build().is_err());
        let gauss = DatasetSpec::Gaussian {
            side: 8,
            n: 5,
            sigma_d: 0.4,
            mu_peak: 0.6,
            seed: 1,
        };
        assert_eq!(gauss.build().unwrap().len(), 5);
    }
}
