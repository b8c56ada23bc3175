//! Run configuration, output manifests and the operations behind each CLI
//! subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{self, DatasetHeader};
use crate::detector::{self, Arm, DetectorParams, LossRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{self, AblationReport, AblationSpec, EvalResult};
use crate::numerics::seed_for;
use crate::synth_data::{self, default_world, SceneSample, WorldSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A named fixture or an inline world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldChoice {
    Named(String),
    Inline(Box<WorldSpec>),
}

impl Default for WorldChoice {
    fn default() -> Self {
        WorldChoice::Named("default".into())
    }
}

impl WorldChoice {
    pub fn resolve(&self) -> Result<WorldSpec> {
        let world = match self {
            WorldChoice::Named(n) if n == "default" || n == "default_world" => default_world(),
            WorldChoice::Named(n) => return Err(Error::Config(format!("unknown world fixture `{n}`"))),
            WorldChoice::Inline(w) => (**w).clone(),
        };
        world.validate()?;
        Ok(world)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub split_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub score_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split_seed: 1,
            n_train: 2000,
            n_test: 500,
            score_thresh: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub world: WorldChoice,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_run_arm")]
    pub arm: Arm,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_run_arm() -> Arm {
    Arm::Sin
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldChoice::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            arm: default_run_arm(),
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.n_train == 0 || self.eval.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.eval.score_thresh) {
            return Err(Error::Config(format!("score_thresh must be in [0, 1), got {}", self.eval.score_thresh)));
        }
        self.train_config().validate()
    }

    /// The training config with the run's arm applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            arm: self.arm,
            ..self.train.clone()
        }
    }

    pub fn ablation_spec(&self, sweep: bool) -> AblationSpec {
        AblationSpec {
            base: self.train.clone(),
            n_train: self.eval.n_train,
            n_test: self.eval.n_test,
            split_seed: self.eval.split_seed,
            score_thresh: self.eval.score_thresh,
            sweep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Input files with their role, e.g. `("checkpoint", path)`.
    #[serde(default)]
    pub inputs: Vec<(String, PathBuf)>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Manifest {
            command: command.into(),
            version: VERSION.into(),
            seed: config.train.seed,
            config: config.clone(),
            inputs: Vec::new(),
        }
    }

    pub fn with_input(mut self, role: &str, path: &Path) -> Self {
        self.inputs.push((role.into(), path.to_path_buf()));
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("manifest.json"), &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn train_samples(world: &WorldSpec, cfg: &RunConfig) -> Result<Vec<SceneSample>> {
    synth_data::generate(world, seed_for(cfg.train.seed, "data/train"), cfg.eval.n_train)
}

pub fn test_samples(world: &WorldSpec, cfg: &RunConfig) -> Result<Vec<SceneSample>> {
    synth_data::generate(world, seed_for(cfg.eval.split_seed, "data/test"), cfg.eval.n_test)
}

/// Loads scenes from a dataset file, enforcing the header check.
pub fn samples_from_file(path: &Path, world: &WorldSpec, allow_mismatch: bool) -> Result<(Vec<SceneSample>, Option<String>)> {
    let (header, samples): (DatasetHeader, _) = dataset::load_dataset(path)?;
    let warning = dataset::check_header(&header, world, allow_mismatch)?;
    Ok((samples, warning))
}

pub fn loss_csv(losses: &[LossRecord]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("iter,lr,cls,reg,objectness,decay,total\n");
    for r in losses {
        let p = &r.parts;
        let _ = writeln!(out, "{},{},{},{},{},{},{}", r.iter, r.lr, p.cls, p.reg, p.objectness, p.decay, p.total());
    }
    out
}

pub struct TrainArtifacts {
    pub params: DetectorParams,
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
}

/// Trains one arm and writes `model.ckpt`, `losses.csv` and the manifest.
pub fn run_train(cfg: &RunConfig, samples: &[SceneSample], world: &WorldSpec, manifest: Manifest) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let outcome = detector::train_on(samples, world, &cfg.train_config())?;
    let dir = &cfg.output_dir;
    let checkpoint = dir.join("model.ckpt");
    let losses = dir.join("losses.csv");
    write_file(&losses, &loss_csv(&outcome.losses))?;
    checkpoint::save_params(&checkpoint, &outcome.params)?;
    manifest.write(dir)?;
    Ok(TrainArtifacts {
        params: outcome.params,
        checkpoint,
        losses,
    })
}

/// Writes `metrics.csv`, `pr.csv` and `breakdown.csv` for the given runs.
pub fn write_eval_csvs(dir: &Path, runs: &[(&str, Option<&EvalResult>)], world: &WorldSpec) -> Result<()> {
    write_file(&dir.join("metrics.csv"), &eval::metrics_csv(runs, world))?;
    write_file(&dir.join("pr.csv"), &eval::pr_csv(runs))?;
    write_file(&dir.join("breakdown.csv"), &eval::breakdown_csv(runs))
}

pub fn run_eval(cfg: &RunConfig, params: &DetectorParams, samples: &[SceneSample], world: &WorldSpec, manifest: Manifest) -> Result<EvalResult> {
    cfg.validate()?;
    check_params(params, world, &cfg.train_config())?;
    let result = eval::evaluate(params, samples, world, &cfg.train_config(), cfg.eval.score_thresh, eval::num_workers()?)?;
    write_eval_csvs(&cfg.output_dir, &[(cfg.arm.name(), Some(&result))], world)?;
    manifest.write(&cfg.output_dir)?;
    Ok(result)
}

pub fn run_ablate(cfg: &RunConfig, world: &WorldSpec, sweep: bool, manifest: Manifest, progress: impl FnMut(&eval::ArmRun)) -> Result<AblationReport> {
    cfg.validate()?;
    let report = eval::run_ablation(world, &cfg.ablation_spec(sweep), eval::num_workers()?, progress)?;
    write_eval_csvs(&cfg.output_dir, &report.csv_rows(), world)?;
    manifest.write(&cfg.output_dir)?;
    Ok(report)
}

pub fn run_relations(cfg: &RunConfig, params: &DetectorParams, samples: &[SceneSample], world: &WorldSpec, manifest: Manifest) -> Result<PathBuf> {
    cfg.validate()?;
    check_params(params, world, &cfg.train_config())?;
    let rows = eval::relation_rows(params, samples, &cfg.train_config(), cfg.eval.score_thresh, eval::num_workers()?)?;
    let path = cfg.output_dir.join("relations.csv");
    write_file(&path, &eval::relations_csv(&rows))?;
    manifest.write(&cfg.output_dir)?;
    Ok(path)
}

/// Rejects a checkpoint whose shapes disagree with the world or config.
fn check_params(p: &DetectorParams, world: &WorldSpec, cfg: &TrainConfig) -> Result<()> {
    let want = (cfg.hidden_dim, world.channels, world.num_categories(), cfg.needs_concat());
    let got = (p.dim(), p.channels(), p.num_categories(), p.sin.w_a.is_some());
    if want != got {
        return Err(Error::Shape(format!(
            "checkpoint has (d, channels, categories, concat) = {got:?}, config expects {want:?}"
        )));
    }
    Ok(())
}
