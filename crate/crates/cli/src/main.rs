use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use diode_core::detector::DetectorConfig;
use diode_core::dilation::{count_added_params, count_added_params_with_base, StepGrowth};
use diode_core::runner::{
    continue_protocol, continue_with_backoff, emit_report, lambda_search, train_base, write_report, BaseState, ExperimentConfig,
    ExperimentProbe, LambdaSearch, Method, RunRecord,
};
use diode_core::scenario::{ProtocolSpec, TaskProtocol};

#[derive(Parser)]
#[command(name = "diode", version, about = "Continual object detection on synthetic shape scenes")]
struct Cli {
    /// Overrides the seed of the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a task protocol to a directory of PNG images and annotations.
    GenData {
        spec: PathBuf,
        #[arg(long, short, default_value = "data")]
        out: PathBuf,
    },
    /// Train every step of the configured method for each seed.
    Run {
        experiment: PathBuf,
        /// Overrides the configured method.
        #[arg(long)]
        method: Option<Method>,
        /// Overrides the configured output directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Replace the configured λ by the result of a λ search on the first seed.
        #[arg(long)]
        search_lambda: bool,
    },
    /// Find the largest stable penalty coefficient on the first incremental step.
    LambdaSearch {
        experiment: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Aggregate `run-*.json` records of one directory into tables.
    Report {
        runs_dir: PathBuf,
        /// Defaults to `<runs-dir>/report`.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Tabulate parameters added by task-specific adapters per step.
    ParamTable {
        config: PathBuf,
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out, cli.seed),
        Command::Run { experiment, method, out, search_lambda } => {
            let cfg = load_experiment(&experiment, cli.seed, method, out)?;
            run(cfg, search_lambda)
        }
        Command::LambdaSearch { experiment, method, out } => {
            let cfg = load_experiment(&experiment, cli.seed, method, out)?;
            let protocol = cfg.materialize()?;
            let result = search(&cfg, &protocol)?;
            write_lambda(&cfg.output_dir, &result.search, &result)
        }
        Command::Report { runs_dir, out } => report(&runs_dir, &out.unwrap_or_else(|| runs_dir.join("report"))),
        Command::ParamTable { config, out } => param_table(&config, &out),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn load_experiment(path: &Path, seed: Option<u64>, method: Option<Method>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_json(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct SplitRow {
    split: String,
    images: usize,
    boxes: usize,
    classes: String,
}

fn gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: ProtocolSpec = read_json(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let protocol = TaskProtocol::build(&spec)?;
    protocol.save(out)?;
    let mut rows = Vec::new();
    let splits = protocol.train.iter().chain(std::iter::once(&protocol.test));
    for split in splits {
        let mut classes: Vec<usize> = split.samples.iter().flat_map(|s| s.boxes.iter().map(|b| b.class_id)).collect();
        classes.sort_unstable();
        classes.dedup();
        rows.push(SplitRow {
            split: split.role.dir_name(),
            images: split.samples.len(),
            boxes: split.samples.iter().map(|s| s.boxes.len()).sum(),
            classes: classes.iter().map(|c| protocol.class_names[*c].as_str()).collect::<Vec<_>>().join(" "),
        });
    }
    write_csv(&out.join("splits.csv"), &rows)?;
    println!("wrote {} splits to {}", rows.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct StepRow<'a> {
    method: &'a str,
    seed: u64,
    lambda: f64,
    step: usize,
    map50_seen: f64,
    map_range: f64,
    map50_old: Option<f64>,
    map50_new: f64,
    forgetting: Option<f64>,
    param_count: usize,
    pseudo_boxes: usize,
    final_loss: f64,
    wall_ms: u128,
}

fn step_rows(r: &RunRecord) -> Vec<StepRow<'_>> {
    r.steps
        .iter()
        .map(|s| StepRow {
            method: &r.method,
            seed: r.seed,
            lambda: r.lambda,
            step: s.step,
            map50_seen: s.map50_seen,
            map_range: s.eval.map_range,
            map50_old: s.map50_old,
            map50_new: s.map50_new,
            forgetting: s.forgetting,
            param_count: s.param_count,
            pseudo_boxes: s.pseudo_boxes,
            final_loss: s.final_loss,
            wall_ms: s.wall_ms,
        })
        .collect()
}

fn run(cfg: ExperimentConfig, search_lambda: bool) -> Result<()> {
    let protocol = cfg.materialize()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut bases: Vec<BaseState> = Vec::with_capacity(cfg.seeds.len());
    let mut search = None;
    if search_lambda {
        let base = train_base(&cfg, &protocol, cfg.seeds[0])?;
        let result = lambda_search(&cfg.lambda_grid, &mut ExperimentProbe::new(&cfg, &protocol, &base)?)?;
        write_lambda(&cfg.output_dir, &result, &result)?;
        search = Some(result);
        bases.push(base);
    }
    let remaining = cfg.seeds[bases.len()..].to_vec();
    // seeds are independent runs
    let trained: Vec<Result<BaseState>> = std::thread::scope(|s| {
        let handles: Vec<_> = remaining
            .iter()
            .map(|&seed| {
                let (cfg, protocol) = (&cfg, &protocol);
                s.spawn(move || train_base(cfg, protocol, seed).map_err(anyhow::Error::from))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    for b in trained {
        bases.push(b?);
    }
    let records: Vec<Result<RunRecord>> = std::thread::scope(|s| {
        let handles: Vec<_> = bases
            .into_iter()
            .map(|base| {
                let (cfg, protocol, search) = (&cfg, &protocol, &search);
                s.spawn(move || {
                    let seed = base.seed;
                    match search {
                        Some(found) => continue_with_backoff(cfg, protocol, &base, found),
                        None => continue_protocol(cfg, protocol, base),
                    }
                    .with_context(|| format!("{} seed {seed}", cfg.method))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    for r in records {
        let r = r?;
        let stem = format!("run-{}-seed{}", r.method, r.seed);
        write_json(&cfg.output_dir.join(format!("{stem}.json")), &r)?;
        write_csv(&cfg.output_dir.join(format!("{stem}.csv")), &step_rows(&r))?;
        for e in &r.explosions {
            eprintln!("warning: {stem}: abandoned {e}");
        }
        println!("{stem}: lambda {} final mAP@0.5 {:.4} ({:.1} s)", r.lambda, r.final_map50(), r.wall_time_s);
    }
    Ok(())
}

#[derive(Serialize)]
struct LambdaRow {
    lambda: f64,
    exploded: bool,
    detail: String,
}

/// Searches at the configured probe length and at twice that length; the
/// second result reports how sensitive λ* is to the probe.
#[derive(Serialize)]
struct LambdaReport {
    method: Method,
    seed: u64,
    probe_iterations: usize,
    search: LambdaSearch,
    doubled_probe_iterations: usize,
    doubled_probe_lambda: f64,
}

fn search(cfg: &ExperimentConfig, protocol: &TaskProtocol) -> Result<LambdaReport> {
    let seed = cfg.seeds[0];
    let base = train_base(cfg, protocol, seed)?;
    let mut probe = ExperimentProbe::new(cfg, protocol, &base)?;
    let result = lambda_search(&cfg.lambda_grid, &mut probe)?;
    let mut doubled_cfg = cfg.clone();
    doubled_cfg.probe_fraction = (cfg.probe_fraction * 2.0).min(1.0);
    let mut doubled = ExperimentProbe::new(&doubled_cfg, protocol, &base)?;
    let doubled_result = lambda_search(&cfg.lambda_grid, &mut doubled)?;
    Ok(LambdaReport {
        method: cfg.method,
        seed,
        probe_iterations: probe.iterations(),
        search: result,
        doubled_probe_iterations: doubled.iterations(),
        doubled_probe_lambda: doubled_result.lambda,
    })
}

fn write_lambda(dir: &Path, s: &LambdaSearch, full: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("lambda.json"), full)?;
    let rows: Vec<LambdaRow> = s
        .grid
        .iter()
        .zip(&s.explosions)
        .map(|(l, e)| LambdaRow { lambda: *l, exploded: e.is_some(), detail: e.clone().unwrap_or_default() })
        .collect();
    write_csv(&dir.join("lambda.csv"), &rows)?;
    if let Some(w) = &s.warning {
        eprintln!("warning: {w}");
    }
    println!("lambda* = {}", s.lambda);
    Ok(())
}

fn report(runs_dir: &Path, out: &Path) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(runs_dir)
        .with_context(|| format!("reading {}", runs_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("run-") && name.ends_with(".json")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no run-*.json records in {}", runs_dir.display());
    }
    let records: Vec<RunRecord> = paths.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let rep = emit_report(&records)?;
    write_report(&rep, &records, out)?;
    println!("reported {} runs of {} methods to {}", records.len(), rep.methods.len(), out.display());
    Ok(())
}

/// Either a detector to count exactly, or a closed-form model given by its
/// width, level count and base parameter count.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ParamTableConfig {
    detector: DetectorConfig,
    step_sizes: Vec<usize>,
    channels: Option<usize>,
    levels: Option<usize>,
    base_params: Option<usize>,
}

impl Default for ParamTableConfig {
    fn default() -> Self {
        ParamTableConfig {
            detector: DetectorConfig::default(),
            step_sizes: vec![4, 2, 2],
            channels: None,
            levels: None,
            base_params: None,
        }
    }
}

#[derive(Serialize)]
struct GrowthRow {
    step: usize,
    classes: usize,
    added: usize,
    cumulative: usize,
    cumulative_ratio: f64,
}

fn param_table(path: &Path, out: &Path) -> Result<()> {
    let cfg: ParamTableConfig = read_json(path)?;
    let growth: Vec<StepGrowth> = match (cfg.channels, cfg.levels, cfg.base_params) {
        (Some(c), Some(l), Some(b)) => count_added_params_with_base(c, l, &cfg.step_sizes, b)?,
        (None, None, None) => {
            cfg.detector.validate()?;
            count_added_params(&cfg.detector, &cfg.step_sizes)?
        }
        _ => bail!("channels, levels and base_params must be given together"),
    };
    let rows: Vec<GrowthRow> = growth
        .iter()
        .zip(&cfg.step_sizes)
        .enumerate()
        .map(|(step, (g, &classes))| GrowthRow {
            step,
            classes,
            added: g.added,
            cumulative: g.cumulative,
            cumulative_ratio: g.cumulative_ratio,
        })
        .collect();
    fs::create_dir_all(out)?;
    write_json(&out.join("param_table.json"), &rows)?;
    write_csv(&out.join("param_table.csv"), &rows)?;
    for r in &rows {
        println!("step {}: +{} params ({:.4}% cumulative)", r.step, r.added, 100.0 * r.cumulative_ratio);
    }
    Ok(())
}
