//! Command implementations behind the `esmlab` binary.
//!
//! Each command validates its configuration *before* creating a run
//! directory, so a bad config leaves no artifacts behind. All of them are
//! deterministic: the same config file and seed produce byte-identical CSVs.

pub mod distill;
pub mod init_compare;
pub mod roundtrip;
pub mod sweep;
pub mod train;
pub mod verify;

use crate::config::{InitKind, SceneSpec};
use crate::output::{sharpness, write_csv, write_json, write_png};
use esmlab_core::checkpoint::{load_denoiser, load_store, save_store};
use esmlab_core::dataset::LabeledDataset;
use esmlab_core::denoiser::{DenoiserConfig, DenoiserModel};
use esmlab_core::distill::{
    distill_loop_with, render_mse, DistillConfig, DistillRun, IterRecord, LossKind,
};
use esmlab_core::lora::{LoraAdapter, LoraConfig};
use esmlab_core::schedule::{NoiseSchedule, ScheduleParams};
use esmlab_core::splat::{
    init_scene, render, sample_pose, CameraPose, InitMode, SplatScene,
};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Why a command failed; carries the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Unusable configuration, missing or malformed inputs, I/O trouble.
    /// Exit code 1.
    Config(String),
    /// The computation itself produced non-finite numbers. Exit code 2.
    Numeric(String),
    /// The invariant suite reported a violation. Exit code 3.
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numeric(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(msg) => write!(f, "config: {msg}"),
            Failure::Numeric(msg) => write!(f, "numeric: {msg}"),
            Failure::Verification(msg) => write!(f, "verification: {msg}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<esmlab_core::Error> for Failure {
    fn from(e: esmlab_core::Error) -> Self {
        match e {
            esmlab_core::Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

/// Loads a denoiser checkpoint together with the noise schedule it was
/// trained under.
pub fn load_model(
    path: &Path,
) -> Result<(DenoiserModel<f32>, NoiseSchedule, ScheduleParams), Failure> {
    let (model, params) = load_denoiser(path)
        .map_err(|e| Failure::Config(format!("checkpoint {}: {e}", path.display())))?;
    let sched = params.build()?;
    Ok((model, sched, params))
}

/// Identity-pose render of a single-channel scene as a flat pixel vector.
pub fn render_flat(scene: &SplatScene<f32>, side: usize) -> Result<Vec<f32>, Failure> {
    if scene.channels() != 1 {
        return Err(Failure::Config(format!(
            "expected a single-channel scene, got {} channels",
            scene.channels()
        )));
    }
    let out = render(scene, &CameraPose::identity(), side)?;
    Ok(out.image.data().to_vec())
}

/// Directory-name-friendly rendering of a swept value: whole numbers drop
/// the fractional part ("200", not "200.0").
pub fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Creates (if needed) and returns `parent/name`.
pub fn subdir(parent: &Path, name: &str) -> Result<PathBuf, Failure> {
    let dir = parent.join(name);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Config(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Metadata stored in a scene checkpoint; enough to resume the run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneMeta {
    /// Iteration index a resumed loop should start at (one past the last
    /// completed iteration).
    pub next_iteration: usize,
    pub side: usize,
    pub n_splats: usize,
    pub label: usize,
    pub seed: u64,
}

pub fn save_scene(
    path: &Path,
    scene: &SplatScene<f32>,
    meta: SceneMeta,
) -> esmlab_core::Result<()> {
    let meta = serde_json::to_value(meta)
        .map_err(|e| esmlab_core::Error::Checkpoint(format!("scene meta encode: {e}")))?;
    save_store(path, "scene", meta, &scene.params)
}

pub fn load_scene(path: &Path) -> Result<(SplatScene<f32>, SceneMeta), Failure> {
    let (manifest, store) = load_store(path)
        .map_err(|e| Failure::Config(format!("scene checkpoint {}: {e}", path.display())))?;
    if manifest.kind != "scene" {
        return Err(Failure::Config(format!(
            "{}: kind '{}' is not a scene checkpoint",
            path.display(),
            manifest.kind
        )));
    }
    let meta: SceneMeta = serde_json::from_value(manifest.meta)
        .map_err(|e| Failure::Config(format!("{}: scene meta: {e}", path.display())))?;
    let scene = SplatScene::new(store)?;
    Ok((scene, meta))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct AdapterMeta {
    rank: usize,
    scale: f64,
}

pub fn save_adapter(path: &Path, adapter: &LoraAdapter<f32>) -> esmlab_core::Result<()> {
    let cfg = adapter.config();
    let meta = serde_json::to_value(AdapterMeta {
        rank: cfg.rank,
        scale: cfg.scale,
    })
    .map_err(|e| esmlab_core::Error::Checkpoint(format!("adapter meta encode: {e}")))?;
    save_store(path, "adapter", meta, &adapter.params)
}

pub fn load_adapter(path: &Path, base: &DenoiserConfig) -> Result<LoraAdapter<f32>, Failure> {
    let (manifest, store) = load_store(path)
        .map_err(|e| Failure::Config(format!("adapter checkpoint {}: {e}", path.display())))?;
    if manifest.kind != "adapter" {
        return Err(Failure::Config(format!(
            "{}: kind '{}' is not an adapter checkpoint",
            path.display(),
            manifest.kind
        )));
    }
    let meta: AdapterMeta = serde_json::from_value(manifest.meta)
        .map_err(|e| Failure::Config(format!("{}: adapter meta: {e}", path.display())))?;
    let cfg = LoraConfig {
        rank: meta.rank,
        scale: meta.scale,
    };
    LoraAdapter::from_parts(base, cfg, store).map_err(Failure::from)
}

/// State carried into a resumed distillation run.
pub struct ResumeState {
    pub scene: SplatScene<f32>,
    pub adapter: Option<LoraAdapter<f32>>,
    pub start_iteration: usize,
}

/// One distillation run, fully specified. `cfg.iterations` counts the
/// iterations *this* run performs; on resume that is the remainder.
pub struct DistillJob<'a> {
    pub model: &'a DenoiserModel<f32>,
    pub sched: &'a NoiseSchedule,
    pub dataset: &'a LabeledDataset<f32>,
    pub cfg: DistillConfig,
    pub scene_spec: SceneSpec,
    pub pose_jitter: bool,
    /// Write a resumable snapshot every this many iterations (0 = only the
    /// final checkpoint).
    pub snapshot_every: usize,
    pub resume: Option<ResumeState>,
}

/// What a completed run reports back to its command.
pub struct DistillOutcome {
    pub start_iteration: usize,
    pub iterations_run: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub sharpness: f64,
    pub mean_eps_ism: f64,
    pub mean_eps_esm: f64,
    /// Final identity-pose render, flat, for contact sheets.
    pub final_render: Vec<f32>,
    pub records: Vec<IterRecord>,
}

/// The per-run summary written to `summary.json`.
#[derive(Serialize)]
struct DistillSummary {
    loss: LossKind,
    label: usize,
    seed: u64,
    rho: f64,
    delta_s: usize,
    delta_t: usize,
    guidance: f64,
    n_splats: usize,
    pose_jitter: bool,
    start_iteration: usize,
    iterations_run: usize,
    iterations_total: usize,
    initial_mse: f64,
    final_mse: f64,
    /// (initial − final) / initial; the improvement fraction.
    mse_drop_frac: f64,
    sharpness: f64,
    mean_eps_ism: f64,
    mean_eps_esm: f64,
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Runs one distillation (fresh or resumed) and writes the full artifact set
/// into `dir`: initial/final renders, the iteration log, scene and adapter
/// checkpoints, optional periodic snapshots, and `summary.json`.
pub fn run_distill_once(dir: &Path, job: DistillJob<'_>) -> Result<DistillOutcome, Failure> {
    let side = job.dataset.side();
    let cfg = &job.cfg;
    let target = job.dataset.class_mean(cfg.label)?;

    let start_iteration = job.resume.as_ref().map_or(0, |r| r.start_iteration);
    let (scene, mut adapter) = match job.resume {
        Some(resume) => (resume.scene, resume.adapter),
        None => {
            let mode = match job.scene_spec.init {
                InitKind::Random => InitMode::Random,
                InitKind::DataFitted => InitMode::DataFitted { target: &target },
            };
            (
                init_scene(mode, job.scene_spec.n_splats, side, cfg.seed)?,
                None,
            )
        }
    };
    if cfg.loss == LossKind::Esm && adapter.is_none() {
        adapter = Some(LoraAdapter::init(
            job.model.config(),
            LoraConfig::default(),
            cfg.seed,
        )?);
    }

    let initial_render = render_flat(&scene, side)?;
    write_png(&dir.join("render_initial.png"), &initial_render, side)?;
    let initial_mse = render_mse(&scene, &target)?;

    let snapshots = if job.snapshot_every > 0 {
        Some(subdir(dir, "snapshots")?)
    } else {
        None
    };
    let snapshot_every = job.snapshot_every;
    let n_splats = scene.n_splats();
    let (label, seed) = (cfg.label, cfg.seed);
    let mut hook = |iteration: usize,
                    scene: &SplatScene<f32>,
                    adapter: Option<&LoraAdapter<f32>>|
     -> esmlab_core::Result<()> {
        let done = iteration + 1;
        if done % snapshot_every != 0 {
            return Ok(());
        }
        let dir = snapshots.as_ref().expect("hook only installed with a dir");
        let meta = SceneMeta {
            next_iteration: done,
            side,
            n_splats,
            label,
            seed,
        };
        save_scene(&dir.join(format!("scene_{done:06}.ckpt")), scene, meta)?;
        if let Some(ad) = adapter {
            save_adapter(&dir.join(format!("adapter_{done:06}.ckpt")), ad)?;
        }
        Ok(())
    };

    let mut pose_sampler: Box<dyn FnMut(&mut ChaCha8Rng) -> CameraPose> = if job.pose_jitter {
        Box::new(move |r| sample_pose(r, side))
    } else {
        Box::new(|_| CameraPose::identity())
    };

    let run: DistillRun<f32> = distill_loop_with(
        scene,
        &mut pose_sampler,
        job.model,
        adapter.as_mut(),
        job.sched,
        cfg,
        start_iteration,
        if snapshots.is_some() {
            Some(&mut hook)
        } else {
            None
        },
    )?;

    write_csv(&dir.join("iters.csv"), &run.records)?;

    let final_render = render_flat(&run.scene, side)?;
    write_png(&dir.join("render_final.png"), &final_render, side)?;
    let final_mse = render_mse(&run.scene, &target)?;
    let sharp = sharpness(&final_render, side);

    let meta = SceneMeta {
        next_iteration: start_iteration + cfg.iterations,
        side,
        n_splats,
        label,
        seed,
    };
    save_scene(&dir.join("scene_final.ckpt"), &run.scene, meta)?;
    if let Some(ad) = &adapter {
        save_adapter(&dir.join("adapter_final.ckpt"), ad)?;
    }

    let mean_eps_ism = finite_mean(run.records.iter().map(|r| r.eps_ism));
    let mean_eps_esm = finite_mean(run.records.iter().map(|r| r.eps_esm));
    let outcome = DistillOutcome {
        start_iteration,
        iterations_run: cfg.iterations,
        initial_mse,
        final_mse,
        sharpness: sharp,
        mean_eps_ism,
        mean_eps_esm,
        final_render,
        records: run.records,
    };
    write_json(
        &dir.join("summary.json"),
        &DistillSummary {
            loss: cfg.loss,
            label: cfg.label,
            seed: cfg.seed,
            rho: cfg.rho,
            delta_s: cfg.delta_s,
            delta_t: cfg.delta_t,
            guidance: cfg.guidance,
            n_splats,
            pose_jitter: job.pose_jitter,
            start_iteration,
            iterations_run: outcome.iterations_run,
            iterations_total: start_iteration + cfg.iterations,
            initial_mse,
            final_mse,
            mse_drop_frac: (initial_mse - final_mse) / initial_mse,
            sharpness: sharp,
            mean_eps_ism,
            mean_eps_esm,
        },
    )?;
    Ok(outcome)
}

/// Shared pre-flight checks for the distillation-style commands. Returns the
/// canvas side length.
pub fn check_distill_inputs(
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    dataset: &LabeledDataset<f32>,
    cfg: &DistillConfig,
    n_splats: usize,
) -> Result<usize, Failure> {
    let side = dataset.side();
    if model.config().side != side {
        return Err(Failure::Config(format!(
            "dataset side {side} does not match checkpoint side {}",
            model.config().side
        )));
    }
    if cfg.label >= dataset.num_classes() {
        return Err(Failure::Config(format!(
            "label {} out of range: dataset has {} classes",
            cfg.label,
            dataset.num_classes()
        )));
    }
    if n_splats == 0 {
        return Err(Failure::Config("scene needs at least one splat".into()));
    }
    cfg.validate(sched)?;
    Ok(side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_exit_codes_and_display() {
        let c = Failure::Config("bad key".into());
        let n = Failure::Numeric("NaN".into());
        let v = Failure::Verification("2 failed".into());
        assert_eq!(c.exit_code(), 1);
        assert_eq!(n.exit_code(), 2);
        assert_eq!(v.exit_code(), 3);
        assert!(c.to_string().starts_with("config:"));
        assert!(n.to_string().starts_with("numeric:"));
        assert!(v.to_string().starts_with("verification:"));
    }

    #[test]
    fn core_errors_map_onto_exit_codes() {
        let nf = esmlab_core::Error::NonFinite {
            context: "test".into(),
        };
        assert_eq!(Failure::from(nf).exit_code(), 2);
        let cfg = esmlab_core::Error::Config("bad".into());
        assert_eq!(Failure::from(cfg).exit_code(), 1);
    }

    #[test]
    fn fmt_value_drops_trailing_zero_fraction() {
        assert_eq!(fmt_value(200.0), "200");
        assert_eq!(fmt_value(0.93), "0.93");
        assert_eq!(fmt_value(0.5), "0.5");
    }

    #[test]
    fn scene_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = init_scene::<f32>(InitMode::Random, 5, 8, 7).unwrap();
        let meta = SceneMeta {
            next_iteration: 42,
            side: 8,
            n_splats: 5,
            label: 1,
            seed: 7,
        };
        let path = dir.path().join("scene_000042.ckpt");
        save_scene(&path, &scene, meta).unwrap();
        let (back, meta_back) = load_scene(&path).unwrap();
        assert_eq!(meta_back.next_iteration, 42);
        assert_eq!(back.n_splats(), 5);
        assert_eq!(
            back.params.value("centers").unwrap().data(),
            scene.params.value("centers").unwrap().data()
        );
    }

    #[test]
    fn adapter_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = DenoiserConfig::new(8, 3);
        let adapter = LoraAdapter::<f32>::init(&base, LoraConfig::default(), 3).unwrap();
        let path = dir.path().join("adapter_final.ckpt");
        save_adapter(&path, &adapter).unwrap();
        let back = load_adapter(&path, &base).unwrap();
        assert_eq!(back.config().rank, 4);
        assert_eq!(
            back.params.value("lora.fc0.a").unwrap().data(),
            adapter.params.value("lora.fc0.a").unwrap().data()
        );
        // A scene checkpoint is not an adapter checkpoint.
        let scene = init_scene::<f32>(InitMode::Random, 3, 8, 0).unwrap();
        let scene_path = dir.path().join("scene.ckpt");
        save_scene(
            &scene_path,
            &scene,
            SceneMeta {
                next_iteration: 0,
                side: 8,
                n_splats: 3,
                label: 0,
                seed: 0,
            },
        )
        .unwrap();
        assert!(load_adapter(&scene_path, &base).is_err());
    }
}
