use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use edgehml::data::{load_feature_dataset, split_tasks, synth_stream, FeatureDataset, SynthSpec};
use edgehml::disk_pool;
use edgehml::trainer::{RunReport, CSV_COLUMNS, CSV_VERSION};
use edgehml::{run_stream_with_model, Hyperparams, TaskStream, Variant};

#[derive(Parser)]
#[command(version, about = "Semi-supervised continual learning experiments over a two-tier replay pool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train each variant on each seed and record the results
    Run(Common),
    /// Repeat `run` over every value of one axis
    Sweep {
        #[command(flatten)]
        common: Common,
        /// NAME=V1,V2,... where NAME is a config or stream key, or
        /// `capacity` with MEM+DISK pairs
        #[arg(long)]
        axis: String,
    },
    /// Print a pool file's header and class histogram
    InspectPool { path: PathBuf },
}

#[derive(Args)]
struct Common {
    /// Flat TOML file of training hyperparameters
    #[arg(long)]
    config: Option<PathBuf>,
    /// sft, labeled-replay or edgehml; repeatable
    #[arg(long = "variant")]
    variants: Vec<Variant>,
    /// Seed for both training and stream construction; repeatable
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// KEY=VALUE for a hyperparameter or stream setting; repeatable
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Feature dataset to split into tasks instead of a synthetic stream
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Runs executed in parallel
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Everything one run is configured by.
#[derive(Debug, Clone)]
struct Settings {
    h: Hyperparams,
    spec: SynthSpec,
    test_fraction: f64,
}

impl Settings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if Hyperparams::has_key(key) {
            self.h.apply_override(key, value)?;
        } else if SynthSpec::has_key(key) {
            self.spec.apply_override(key, value)?;
        } else if key == "test_fraction" {
            let f: f64 = value.parse().with_context(|| format!("test_fraction {value:?}"))?;
            ensure!(f > 0.0 && f < 1.0, "test_fraction {f} outside (0, 1)");
            self.test_fraction = f;
        } else {
            bail!("unknown setting {key:?}");
        }
        Ok(())
    }

    fn set_axis(&mut self, axis: &str, value: &str) -> Result<()> {
        match axis {
            "capacity" => {
                let (mem, disk) = value
                    .split_once('+')
                    .with_context(|| format!("capacity value {value:?} is not MEM+DISK"))?;
                self.set("mem_capacity", mem)?;
                self.set("disk_capacity", disk)
            }
            "v1_frac" => {
                // shift the whole ramp so it keeps its width
                let width = self.h.v2_frac - self.h.v1_frac;
                self.set("v1_frac", value)?;
                self.h.v2_frac = (self.h.v1_frac + width).min(1.0);
                Ok(())
            }
            _ => self.set(axis, value),
        }
    }
}

struct Job {
    variant: Variant,
    settings: Settings,
    axis: Option<(String, String)>,
}

impl Job {
    fn stem(&self) -> String {
        let mut stem = format!("{}-seed{}", self.variant, self.settings.h.seed);
        if let Some((name, value)) = &self.axis {
            let clean: String = value
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || "+.-".contains(c) { c } else { '_' })
                .collect();
            stem.push_str(&format!("-{name}{clean}"));
        }
        stem
    }

    fn stream(&self, dataset: Option<&FeatureDataset>) -> Result<TaskStream> {
        let s = &self.settings;
        let stream = match dataset {
            Some(ds) => split_tasks(
                ds,
                s.spec.tasks,
                s.spec.classes_per_task,
                s.spec.labels_per_class,
                s.test_fraction,
                s.spec.seed,
            )?,
            None => synth_stream(&s.spec)?,
        };
        Ok(stream)
    }

    fn execute(&self, dataset: Option<&FeatureDataset>, out: &Path) -> Result<RunReport> {
        let stem = self.stem();
        let stream = self.stream(dataset)?;
        let pool = out.join("pools").join(format!("{stem}.pool"));
        let (report, model) = run_stream_with_model(&stream, &self.settings.h, self.variant, &pool)
            .with_context(|| format!("run {stem}"))?;
        report.write_json(&out.join(format!("{stem}.json")))?;
        model.save(&out.join("models").join(format!("{stem}.model")))?;
        log::info!("{stem}: average accuracy {:.4}", report.average_accuracy);
        Ok(report)
    }

    fn csv_row(&self, report: &RunReport) -> String {
        let (name, value) = self.axis.clone().unwrap_or_default();
        format!("{name},{value},{}", report.csv_row())
    }
}

fn csv_header() -> [String; 2] {
    [format!("# edgehml results v{CSV_VERSION}"), format!("axis,value,{CSV_COLUMNS}")]
}

/// Opens the results file for appending, writing the versioned header on
/// creation and refusing a file written by another version.
fn open_csv(path: &Path) -> Result<fs::File> {
    let header = csv_header();
    if path.exists() {
        let first = BufReader::new(fs::File::open(path)?).lines().next().transpose()?;
        if first.as_deref() != Some(header[0].as_str()) {
            bail!("{} was not written with header {:?}", path.display(), header[0]);
        }
        return Ok(OpenOptions::new().append(true).open(path)?);
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}\n{}", header[0], header[1])?;
    Ok(f)
}

fn base_settings(common: &Common) -> Result<Settings> {
    let h = match &common.config {
        Some(path) => Hyperparams::from_file(path).with_context(|| format!("config {}", path.display()))?,
        None => Hyperparams::default(),
    };
    let mut settings = Settings {
        h,
        spec: SynthSpec::default(),
        test_fraction: 0.2,
    };
    for kv in &common.overrides {
        let (key, value) = kv
            .split_once('=')
            .with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
        settings.set(key.trim(), value.trim())?;
    }
    Ok(settings)
}

fn jobs_for(common: &Common, base: &Settings, axis: Option<(&str, &[&str])>) -> Result<Vec<Job>> {
    let variants = if common.variants.is_empty() {
        vec![Variant::EdgeHml]
    } else {
        common.variants.clone()
    };
    let seeds = if common.seeds.is_empty() {
        vec![base.h.seed]
    } else {
        common.seeds.clone()
    };
    let points: Vec<Option<&str>> = match axis {
        Some((_, values)) => values.iter().map(|v| Some(*v)).collect(),
        None => vec![None],
    };
    let mut jobs = Vec::new();
    for point in points {
        for &seed in &seeds {
            for &variant in &variants {
                let mut settings = base.clone();
                settings.h.seed = seed;
                settings.spec.seed = seed;
                let axis = match (axis, point) {
                    (Some((name, _)), Some(value)) => {
                        settings
                            .set_axis(name, value)
                            .with_context(|| format!("axis {name}={value}"))?;
                        Some((name.to_string(), value.to_string()))
                    }
                    _ => None,
                };
                jobs.push(Job {
                    variant,
                    settings,
                    axis,
                });
            }
        }
    }
    Ok(jobs)
}

/// Runs every job on `workers` threads; rows reach the CSV in job order
/// through this thread alone.
fn execute_all(jobs: &[Job], common: &Common, csv_name: &str) -> Result<()> {
    if jobs.is_empty() {
        log::warn!("nothing to run");
        return Ok(());
    }
    let out = &common.out;
    fs::create_dir_all(out.join("pools"))?;
    fs::create_dir_all(out.join("models"))?;
    let dataset = match &common.dataset {
        Some(path) => Some(load_feature_dataset(path).with_context(|| format!("dataset {}", path.display()))?),
        None => None,
    };
    let mut csv = open_csv(&out.join(csv_name))?;

    let next = AtomicUsize::new(0);
    let workers = common.jobs.clamp(1, jobs.len());
    let (tx, rx) = mpsc::channel();
    let mut first_error = None;
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, dataset) = (&next, dataset.as_ref());
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                if tx.send((i, job.execute(dataset, out))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut cursor = 0;
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&cursor) {
                match result {
                    Ok(report) => writeln!(csv, "{}", jobs[cursor].csv_row(&report))?,
                    Err(e) => {
                        log::error!("{}: {e:#}", jobs[cursor].stem());
                        first_error.get_or_insert(e);
                    }
                }
                cursor += 1;
            }
        }
        Ok(())
    })?;
    csv.flush()?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn parse_axis(axis: &str) -> Result<(&str, Vec<&str>)> {
    let (name, values) = axis
        .split_once('=')
        .with_context(|| format!("axis {axis:?} is not NAME=V1,V2,..."))?;
    let name = name.trim();
    let known = matches!(name, "capacity" | "test_fraction")
        || Hyperparams::has_key(name)
        || SynthSpec::has_key(name);
    ensure!(known, "unknown axis {name:?}");
    let values = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    Ok((name, values))
}

fn inspect_pool(path: &Path) -> Result<()> {
    let summary = disk_pool::inspect(path)?;
    println!("path          {}", path.display());
    println!("version       {}", summary.version);
    println!("dim           {}", summary.dim);
    println!("capacity      {}", summary.capacity);
    println!("count         {}", summary.count);
    println!("write_cursor  {}", summary.write_cursor);
    println!("class  records");
    for (class, n) in summary.histogram.iter().enumerate() {
        println!("{class:>5}  {n}");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EDGEHML_LOG", "warn")).init();
    match Cli::parse().command {
        Command::Run(common) => {
            let base = base_settings(&common)?;
            let jobs = jobs_for(&common, &base, None)?;
            execute_all(&jobs, &common, "results.csv")
        }
        Command::Sweep { common, axis } => {
            let base = base_settings(&common)?;
            let (name, values) = parse_axis(&axis)?;
            let jobs = jobs_for(&common, &base, Some((name, &values)))?;
            execute_all(&jobs, &common, "sweep.csv")
        }
        Command::InspectPool { path } => inspect_pool(&path),
    }
}
