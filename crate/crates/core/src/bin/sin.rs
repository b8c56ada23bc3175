use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sin_core::checkpoint;
use sin_core::dataset;
use sin_core::detector::{run_gradcheck, Arm, GradCheckSetup};
use sin_core::harness::{self, Manifest, RunConfig};
use sin_core::structure_inference::Pooling;
use sin_core::synth_data::{self, SceneSample, WorldSpec};
use sin_core::{Error, Result};

/// Gradient checks must land below this relative error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "sin", version, about = "Structure inference detector on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and write them as JSON Lines.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(short, long)]
        out: PathBuf,
        /// Run config whose world is used; the default world otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one arm; writes model.ckpt, losses.csv, manifest.json.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Training scenes; generated from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics.csv, pr.csv, breakdown.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test scenes; generated from the split seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every arm on shared data.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Also run max/concat pooling and T=1/T=3.
        #[arg(long)]
        sweep: bool,
    },
    /// Finite-difference check of the full detector loss.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        t: usize,
        #[arg(long, default_value = "mean")]
        pooling: Pooling,
        #[arg(long, default_value = "sin")]
        arm: Arm,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Strongest incoming edge per detection; writes relations.csv.
    Relations {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// RunConfig JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arm: Option<Arm>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Accept a dataset whose world hash differs from the config.
    #[arg(long)]
    allow_world_mismatch: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<(RunConfig, WorldSpec)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(a) = self.arm {
            cfg.arm = a;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(i) = self.iters {
            cfg.train.iters = i;
        }
        if let Some(n) = self.n_train {
            cfg.eval.n_train = n;
        }
        if let Some(n) = self.n_test {
            cfg.eval.n_test = n;
        }
        if let Some(d) = &self.out_dir {
            cfg.output_dir = d.clone();
        }
        cfg.validate()?;
        let world = cfg.world.resolve()?;
        Ok((cfg, world))
    }

    fn manifest(&self, command: &str, cfg: &RunConfig) -> Manifest {
        match &self.config {
            Some(p) => Manifest::new(command, cfg).with_input("config", p),
            None => Manifest::new(command, cfg),
        }
    }

    fn samples(
        &self,
        data: &Option<PathBuf>,
        world: &WorldSpec,
        generate: impl FnOnce() -> Result<Vec<SceneSample>>,
    ) -> Result<Vec<SceneSample>> {
        match data {
            Some(path) => {
                let (samples, warning) = harness::samples_from_file(path, world, self.allow_world_mismatch)?;
                if let Some(w) = warning {
                    eprintln!("warning: {w}");
                }
                Ok(samples)
            }
            None => generate(),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, n, out, config } => {
            let world = match &config {
                Some(p) => RunConfig::load(p)?.world.resolve()?,
                None => synth_data::default_world(),
            };
            let samples = synth_data::generate(&world, seed, n)?;
            dataset::save_dataset(&out, &world, &samples)?;
            println!("wrote {} scenes to {}", samples.len(), out.display());
        }
        Command::Train { run, data } => {
            let (cfg, world) = run.resolve()?;
            let samples = run.samples(&data, &world, || harness::train_samples(&world, &cfg))?;
            let mut manifest = run.manifest("train", &cfg);
            if let Some(p) = &data {
                manifest = manifest.with_input("data", p);
            }
            let out = harness::run_train(&cfg, &samples, &world, manifest)?;
            println!("wrote {} and {}", out.checkpoint.display(), out.losses.display());
        }
        Command::Eval { run, checkpoint: ckpt, data } => {
            let (cfg, world) = run.resolve()?;
            let params = checkpoint::load_params(&ckpt)?;
            let samples = run.samples(&data, &world, || harness::test_samples(&world, &cfg))?;
            let manifest = run.manifest("eval", &cfg).with_input("checkpoint", &ckpt);
            let result = harness::run_eval(&cfg, &params, &samples, &world, manifest)?;
            println!("{} mAP@0.5 {:.4} mAP@0.5:0.95 {:.4}", cfg.arm, result.map, result.map_coco);
        }
        Command::Ablate { run, sweep } => {
            let (cfg, world) = run.resolve()?;
            let manifest = run.manifest("ablate", &cfg);
            let report = harness::run_ablate(&cfg, &world, sweep, manifest, |r| match &r.result {
                Ok(res) => eprintln!("{}: mAP@0.5 {:.4}", r.name, res.map),
                Err(e) => eprintln!("{}: failed: {e}", r.name),
            })?;
            let failed: Vec<String> = report.runs.iter().filter(|r| r.result.is_err()).map(|r| r.name.clone()).collect();
            if !failed.is_empty() {
                return Err(Error::ArmsFailed(failed));
            }
            println!("wrote metrics to {}", cfg.output_dir.display());
        }
        Command::Gradcheck { seed, d, n, t, pooling, arm, eps } => {
            let setup = GradCheckSetup {
                seed,
                dim: d,
                nodes: n,
                steps: t,
                pooling,
                arm,
                eps,
            };
            let report = run_gradcheck(&synth_data::default_world(), &setup)?;
            println!("max_rel_err {:e}", report.max_rel_err);
            println!("worst_entry {}", report.worst_entry);
            println!("entries_checked {}", report.entries_checked);
            if !(report.max_rel_err < GRADCHECK_TOL) {
                return Err(Error::GradCheckFailed {
                    max_rel_err: report.max_rel_err,
                    tol: GRADCHECK_TOL,
                });
            }
        }
        Command::Relations { run, checkpoint: ckpt, data } => {
            let (cfg, world) = run.resolve()?;
            let params = checkpoint::load_params(&ckpt)?;
            let samples = run.samples(&data, &world, || harness::test_samples(&world, &cfg))?;
            let manifest = run.manifest("relations", &cfg).with_input("checkpoint", &ckpt);
            let path = harness::run_relations(&cfg, &params, &samples, &world, manifest)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
