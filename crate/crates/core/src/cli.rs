//! Config-driven front end with the `generate`, `run` and `export-transfer` subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datasets::write_partitioned;
use crate::error::{Error, Result};
use crate::harness::{
    resolve, run_experiment, scalability_sweep, write_outputs, write_scalability_csv, write_transfer_csv, DataSource,
    ExperimentConfig, ModelDump, ScalabilityConfig,
};
use crate::synthetic::{generate, write_ground_truth, SyntheticSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Experiment,
    Scalability,
}

/// The single JSON file a run is described by. Relative paths resolve against its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub mode: Mode,
    /// Output directory; `--out` wins.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub scalability: Option<ScalabilityConfig>,
    /// What `generate` writes; falls back to a synthetic experiment source.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads the file and resolves relative paths against it before applying any seed override.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.out = cfg.out.map(|o| resolve(&base, &o));
        if let Some(exp) = &mut cfg.experiment {
            if let DataSource::Manifest { paths, .. } = &mut exp.data {
                for p in paths.iter_mut() {
                    *p = resolve(&base, p);
                }
            }
        }
        if let Some(seed) = seed {
            cfg.override_seed(seed);
        }
        Ok(cfg)
    }

    pub fn override_seed(&mut self, seed: u64) {
        if let Some(exp) = &mut self.experiment {
            exp.seed = seed;
            if let DataSource::Synthetic(s) = &mut exp.data {
                s.seed = seed;
            }
        }
        if let Some(sc) = &mut self.scalability {
            sc.seed = seed;
            sc.synthetic.seed = seed;
        }
        if let Some(s) = &mut self.synthetic {
            s.seed = seed;
        }
    }

    fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        if let Some(s) = &self.synthetic {
            return Ok(s.clone());
        }
        match self.experiment.as_ref().map(|e| &e.data) {
            Some(DataSource::Synthetic(s)) => Ok(s.clone()),
            _ => Err(Error::config("synthetic", "generate needs a synthetic block")),
        }
    }

    fn experiment(&self) -> Result<&ExperimentConfig> {
        self.experiment
            .as_ref()
            .ok_or_else(|| Error::config("experiment", "missing experiment block"))
    }

    fn scalability(&self) -> Result<&ScalabilityConfig> {
        self.scalability
            .as_ref()
            .ok_or_else(|| Error::config("scalability", "missing scalability block"))
    }

    fn out_dir(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.out.clone())
            .ok_or_else(|| Error::config("out", "no output directory (set `out` or pass --out)"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "amtfl", version, about = "Asymmetric multi-task feature learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic splits as manifests next to the ground truth.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the configured experiment or scalability sweep.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Validate the config and print the resolved grid without training.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the task-to-task transfer matrix of a model dump as CSV.
    ExportTransfer {
        /// A `model.json` written by `run`.
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write absolute values.
        #[arg(long)]
        abs: bool,
    },
}

pub fn cmd_generate(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = CliConfig::load(config, seed)?;
    let spec = cfg.synthetic_spec()?;
    spec.validate()?;
    let out = cfg.out_dir(out)?;
    let mut truth_written = false;
    for s in 0..spec.n_splits {
        let (truth, split) = generate(&spec, s)?;
        if !truth_written {
            write_ground_truth(&truth, &out)?;
            truth_written = true;
        }
        write_partitioned(&split, out.join(format!("split{s}")))?;
    }
    println!(
        "wrote {} splits to {}: T={}, d={}, easy {:?}, hard {:?} (train/val/test)",
        spec.n_splits,
        out.display(),
        spec_tasks(&spec),
        spec.d,
        spec.n_easy,
        spec.n_hard
    );
    Ok(())
}

fn spec_tasks(spec: &SyntheticSpec) -> usize {
    let c = |n: usize| crate::synthetic::combinations(&(0..n).collect::<Vec<_>>(), spec.bases_per_task).len();
    2 * c(spec.easy_pool.len()).min(c(spec.hard_pool.len()))
}

/// Returns whether every split of every model succeeded.
pub fn cmd_run(config: &Path, out: Option<PathBuf>, workers: usize, dry_run: bool, seed: Option<u64>) -> Result<bool> {
    let cfg = CliConfig::load(config, seed)?;
    if workers == 0 {
        return Err(Error::config("workers", "must be >= 1"));
    }
    match cfg.mode {
        Mode::Experiment => {
            let exp = cfg.experiment()?;
            exp.validate()?;
            if dry_run {
                println!("{}", serde_json::to_string_pretty(&exp.resolved_grid())?);
                return Ok(true);
            }
            let out = cfg.out_dir(out)?;
            let output = with_pool(workers, || run_experiment(exp))?;
            write_outputs(&output, &out)?;
            for m in &output.report.models {
                let groups: Vec<String> =
                    m.groups.iter().map(|g| format!("{} {:.4}", g.group, g.summary.mean)).collect();
                println!(
                    "{:<12} {:.4} ± {:.4}  {}  coverage {:.2}",
                    m.name,
                    m.overall.mean,
                    m.overall.ci95,
                    groups.join("  "),
                    m.coverage
                );
            }
            Ok(!output.report.failed())
        }
        Mode::Scalability => {
            let sc = cfg.scalability()?;
            sc.validate()?;
            if dry_run {
                println!("{}", serde_json::to_string_pretty(sc)?);
                return Ok(true);
            }
            let out = cfg.out_dir(out)?;
            let rows = with_pool(workers, || scalability_sweep(sc))?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_scalability_csv(&rows, &out.join("scalability.csv"))?;
            for r in &rows {
                println!(
                    "T={:<4} {:<8} params {:<6} metric {:.4}  {:.3e} s/step",
                    r.tasks, r.model, r.parameter_count, r.test_metric, r.seconds_per_step
                );
            }
            Ok(true)
        }
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(f)
}

pub fn cmd_export_transfer(dump: &Path, out: &Path, absolute: bool) -> Result<()> {
    let text = fs::read_to_string(dump).map_err(|e| Error::io(dump, e))?;
    let dump_v: ModelDump = serde_json::from_str(&text).map_err(|e| Error::Load {
        file: dump.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let m = dump_v.params.transfer_matrix().ok_or_else(|| Error::Load {
        file: dump.to_path_buf(),
        line: 0,
        msg: format!("{} parameters carry no transfer matrix", dump_v.objective),
    })?;
    write_transfer_csv(&m, &dump_v.task_ids, absolute, out)
}

/// Parses `args` and runs; the return value is the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(&config, out, seed).map(|_| true),
        Command::Run {
            config,
            out,
            workers,
            dry_run,
            seed,
        } => cmd_run(&config, out, workers, dry_run, seed),
        Command::ExportTransfer { dump, out, abs } => cmd_export_transfer(&dump, &out, abs).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: some splits failed; see report.json");
            4
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
