use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use stssdl::anchor::retrieve_anchor;
use stssdl::config::RunConfig;
use stssdl::data::{load_dataset_dir, make_windows, split_dataset, write_dataset, DeviationLevel, GenConfig, SeriesTensor, WindowSet};
use stssdl::experiment::{prepare, prepare_from_config, run_training, Prepared, Split};
use stssdl::inspect::{assignments, latent_projection, prototype_physical_patterns, PointKind};
use stssdl::model::{Model, Variant};
use stssdl::par::Execution;
use stssdl::trainer::gradcheck::{random_sample, standalone_model};
use stssdl::trainer::{evaluate, evaluate_hi, grad_check, load_checkpoint, save_checkpoint, GradCheckConfig, MetricsReport, TrainOutcome};

use crate::Command;

pub const RUN_CONF: &str = "run.conf";
pub const HISTORY: &str = "history.csv";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(stssdl::Error),
}

impl From<stssdl::Error> for CliError {
    fn from(e: stssdl::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn parse_arg<T: std::str::FromStr<Err = stssdl::Error>>(raw: &str) -> Result<T> {
    raw.parse().map_err(|e: stssdl::Error| CliError::Usage(e.to_string()))
}

pub fn run(cmd: Command) -> std::result::Result<ExitCode, String> {
    let result = match cmd {
        Command::GenData { out, nodes, weeks, deviation, seed, steps_per_day } => {
            gen_data(&out, nodes, weeks, &deviation, seed, steps_per_day)
        }
        Command::Train { config, out } => train(&config, &out),
        Command::Eval { checkpoint, data, split, out } => eval(&checkpoint, &data, &split, out),
        Command::Forecast { checkpoint, data, window_start, out } => forecast(&checkpoint, &data, window_start, out),
        Command::Inspect { checkpoint, data, mode, split, sample, top_k, seed, out } => {
            inspect(&checkpoint, &data, &mode, &split, sample, top_k, seed, out)
        }
        Command::Gradcheck { config, probes, tolerance } => gradcheck(&config, probes, tolerance),
        Command::Ablate { config, variant, out } => ablate(&config, variant.as_deref(), out),
    };
    match result {
        Ok(code) => Ok(code),
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            Ok(ExitCode::from(2))
        }
        Err(CliError::Runtime(e)) => Err(e.to_string()),
    }
}

fn gen_data(out: &Path, nodes: usize, weeks: usize, deviation: &str, seed: u64, spd: usize) -> Result<ExitCode> {
    let level: DeviationLevel = parse_arg(deviation)?;
    let mut cfg = GenConfig::new(nodes, weeks, level, seed);
    cfg.steps_per_day = spd;
    let syn = stssdl::data::synth_generate(&cfg)?;
    let (series, meta) = write_dataset(out, &syn.series)?;
    let mut events = String::from("node,start,duration,amplitude\n");
    for e in &syn.events {
        writeln!(events, "{},{},{},{}", e.node, e.start, e.duration, e.amplitude).expect("write to string");
    }
    fs::write(out.join("events.txt"), events)?;
    eprintln!("wrote {} and {} ({} steps, {} nodes)", series.display(), meta.display(), syn.series.len(), nodes);
    Ok(ExitCode::SUCCESS)
}

fn report_start(prep: &Prepared, model: &Model) {
    eprintln!(
        "{} parameters; {} train / {} val / {} test windows",
        model.params.scalar_count(),
        prep.train.len(),
        prep.val.len(),
        prep.test.len()
    );
}

fn train_into(prep: &Prepared, run: &RunConfig, out: &Path, label: &str) -> Result<(Model, TrainOutcome)> {
    report_start(prep, &prep.fresh_model(run.seed)?);
    let (model, outcome) = run_training(prep, run, |r| {
        eprintln!(
            "[{label}] epoch {:>4}  mae {:.5}  con {:.5}  dev {:.5}  total {:.5}  val_mae {:.5}",
            r.epoch, r.losses.l_mae, r.losses.l_con, r.losses.l_dev, r.losses.total, r.val_mae
        );
    })?;
    save_checkpoint(out, &model, &prep.series.meta)?;
    fs::write(out.join(HISTORY), outcome.history.to_csv())?;
    let mut resolved = run.clone();
    resolved.model = model.cfg.clone();
    resolved.variant = Variant::Full;
    fs::write(out.join(RUN_CONF), resolved.to_text())?;
    eprintln!("[{label}] best epoch {} (val MAE {:.5}); checkpoint in {}", outcome.best_epoch, outcome.best_val_mae, out.display());
    Ok((model, outcome))
}

fn train(config: &Path, out: &Path) -> Result<ExitCode> {
    let run = RunConfig::load(config)?;
    let prep = prepare_from_config(&run)?;
    train_into(&prep, &run, out, "train")?;
    Ok(ExitCode::SUCCESS)
}

/// Run configuration stored next to a checkpoint, or defaults.
fn checkpoint_run(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(RUN_CONF);
    if path.exists() {
        Ok(RunConfig::parse(&fs::read_to_string(path)?)?)
    } else {
        Ok(RunConfig::default())
    }
}

/// Loads a checkpoint and windows of `data` made with the checkpoint's normalizer.
fn checkpoint_windows(checkpoint: &Path, data: &Path, split: Split) -> Result<(Model, SeriesTensor, WindowSet, RunConfig)> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let run = checkpoint_run(checkpoint)?;
    let series = load_dataset_dir(data)?;
    check_compatible(&model, &series)?;
    let cfg = &model.cfg;
    let splits = split_dataset(&series, (run.train_ratio, run.val_ratio, run.test_ratio), cfg.input_len + cfg.horizon)?;
    let part = match split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
        Split::Test => &splits.test,
    };
    let windows = make_windows(part, cfg.input_len, cfg.horizon, &model.normalizer)?;
    Ok((model, series, windows, run))
}

fn check_compatible(model: &Model, series: &SeriesTensor) -> Result<()> {
    let c = &model.cfg;
    if c.nodes != series.nodes() || c.channels != series.channels() || c.steps_per_day != series.meta.steps_per_day {
        return Err(CliError::Runtime(stssdl::Error::Contract(format!(
            "checkpoint expects {} nodes, {} channels, {} steps per day; dataset has {}, {}, {}",
            c.nodes,
            c.channels,
            c.steps_per_day,
            series.nodes(),
            series.channels(),
            series.meta.steps_per_day
        ))));
    }
    Ok(())
}

fn execution(run: &RunConfig) -> Execution {
    if run.parallel {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

fn metrics_table(model: &MetricsReport, hi: &MetricsReport) -> String {
    format!("{}\n{}{}", MetricsReport::CSV_HEADER, model.to_csv_rows("model"), hi.to_csv_rows("hi"))
}

fn eval(checkpoint: &Path, data: &Path, split: &str, out: Option<PathBuf>) -> Result<ExitCode> {
    let split: Split = parse_arg(split)?;
    let (model, _, windows, run) = checkpoint_windows(checkpoint, data, split)?;
    let report = evaluate(&model, &windows.windows, execution(&run))?;
    let hi = evaluate_hi(&windows.windows, &model.normalizer)?;
    let table = metrics_table(&report, &hi);
    let dir = out.unwrap_or_else(|| checkpoint.to_path_buf());
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("metrics_{}.csv", split.name()));
    fs::write(&path, &table)?;
    print!("{table}");
    eprintln!("{} windows; wrote {}", report.windows, path.display());
    Ok(ExitCode::SUCCESS)
}

fn forecast(checkpoint: &Path, data: &Path, start: usize, out: Option<PathBuf>) -> Result<ExitCode> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let series = load_dataset_dir(data)?;
    check_compatible(&model, &series)?;
    let (t, h) = (model.cfg.input_len, model.cfg.horizon);
    let first = series.start;
    if start < first || start + t + h > first + series.len() {
        return Err(CliError::Usage(format!(
            "window [{start}, {}) is outside the dataset's timesteps [{first}, {})",
            start + t + h,
            first + series.len()
        )));
    }
    let local = start - first;
    let slice = series.slice(local, local + t + h);
    let window = make_windows(&slice, t, h, &model.normalizer)?.windows.remove(0);
    let output = model.predict(&model.sample(&window))?;
    let anchor = model.anchors.as_ref().map(|a| retrieve_anchor(a, start, t + h));

    let (n, c) = (series.nodes(), series.channels());
    let mut csv = String::from("t,node,channel,phase,observed,anchor,prediction\n");
    for step in 0..t + h {
        for node in 0..n {
            for ch in 0..c {
                let observed = slice.get(step, node, ch);
                let a = anchor.as_ref().map(|a| a.data()[(step * n + node) * c + ch].to_string()).unwrap_or_default();
                let (phase, pred) = if step < t {
                    ("input", String::new())
                } else {
                    ("forecast", output.prediction.data()[((step - t) * n + node) * c + ch].to_string())
                };
                writeln!(csv, "{},{node},{ch},{phase},{observed},{a},{pred}", start + step).expect("write to string");
            }
        }
    }
    let dir = out.unwrap_or_else(|| checkpoint.to_path_buf());
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("forecast_{start}.csv"));
    fs::write(&path, csv)?;
    eprintln!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn inspect(
    checkpoint: &Path,
    data: &Path,
    mode: &str,
    split: &str,
    sample: usize,
    top_k: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let split: Split = parse_arg(split)?;
    if !matches!(mode, "patterns" | "pca" | "assignments") {
        return Err(CliError::Usage(format!("unknown mode `{mode}` (patterns|pca|assignments)")));
    }
    let (model, _, windows, run) = checkpoint_windows(checkpoint, data, split)?;
    let exec = execution(&run);
    let mut csv = String::new();
    match mode {
        "patterns" => {
            csv.push_str("prototype,count,offset,mean,std\n");
            for p in prototype_physical_patterns(&model, &windows.windows, exec)? {
                if p.count == 0 {
                    writeln!(csv, "{},0,,,", p.prototype).expect("write to string");
                }
                for (i, (m, s)) in p.mean.iter().zip(&p.std).enumerate() {
                    writeln!(csv, "{},{},{i},{m},{s}", p.prototype, p.count).expect("write to string");
                }
            }
        }
        "pca" => {
            csv.push_str("kind,x,y,assigned\n");
            for r in latent_projection(&model, &windows.windows, sample, top_k, seed, exec)? {
                let kind = if r.kind == PointKind::Prototype { "prototype" } else { "query" };
                writeln!(csv, "{kind},{},{},{}", r.x, r.y, r.assigned).expect("write to string");
            }
        }
        _ => {
            csv.push_str("window_start,node,pos_c,neg_c,pos_a,neg_a,d_q,d_p\n");
            for a in assignments(&model, &windows.windows, exec)? {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    a.window_start, a.node, a.pos_c, a.neg_c, a.pos_a, a.neg_a, a.d_q, a.d_p
                )
                .expect("write to string");
            }
        }
    }
    let dir = out.unwrap_or_else(|| checkpoint.to_path_buf());
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("inspect_{mode}_{}.csv", split.name()));
    fs::write(&path, csv)?;
    eprintln!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(config: &Path, probes: usize, tolerance: f64) -> Result<ExitCode> {
    let run = RunConfig::load(config)?;
    let (model, sample) = if run.model.nodes == 0 || run.model.steps_per_day == 0 {
        let prep = prepare_from_config(&run)?;
        let model = standalone_model(&prep.model_cfg, run.seed)?;
        let model = Model { normalizer: prep.normalizer, anchors: Some(prep.anchors.clone()), ..model };
        let sample = model.sample(&prep.train.windows[0]);
        (model, sample)
    } else {
        let cfg = run.model_standalone()?;
        (standalone_model(&cfg, run.seed)?, random_sample(&cfg, run.seed.wrapping_add(1)))
    };
    let report = grad_check(&model, &sample, &GradCheckConfig { probes, tolerance, seed: run.seed, ..Default::default() })?;
    eprintln!(
        "{} parameters, {} probes ({} redrawn at selection boundaries)",
        report.param_count,
        report.probes.len(),
        report.redrawn
    );
    if let Some(w) = &report.worst {
        eprintln!(
            "max relative error {:.3e} at {}[{}]: analytic {:.6e}, numeric {:.6e}",
            report.max_rel_err, w.tensor, w.index, w.analytic, w.numeric
        );
    }
    if report.passed() {
        eprintln!("gradcheck passed (tolerance {tolerance:e})");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck FAILED (tolerance {tolerance:e})");
        Ok(ExitCode::from(1))
    }
}

fn ablate(config: &Path, variant: Option<&str>, out: Option<PathBuf>) -> Result<ExitCode> {
    let base = RunConfig::load(config)?;
    let variants: Vec<Variant> = match variant {
        Some(v) => vec![parse_arg(v)?],
        None => Variant::ALL.to_vec(),
    };
    let out = out
        .or_else(|| base.out_dir.clone())
        .ok_or_else(|| CliError::Usage("ablate needs --out or `out_dir` in the configuration".into()))?;
    let series = load_dataset_dir(
        base.data.as_ref().ok_or_else(|| CliError::Usage("the configuration does not name a dataset".into()))?,
    )?;
    let mut summary = String::from("variant,test_mae,test_rmse,test_mape,best_epoch\n");
    for v in variants {
        let run = RunConfig { variant: v, ..base.clone() };
        let prep = prepare(series.clone(), &run)?;
        let dir = out.join(v.name());
        let (model, outcome) = train_into(&prep, &run, &dir, v.name())?;
        let report = evaluate(&model, &prep.test.windows, execution(&run))?;
        let hi = evaluate_hi(&prep.test.windows, &model.normalizer)?;
        fs::write(dir.join("metrics_test.csv"), metrics_table(&report, &hi))?;
        let a = report.average;
        writeln!(summary, "{},{},{},{},{}", v.name(), a.mae, a.rmse, a.mape, outcome.best_epoch).expect("write to string");
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join("ablation.csv"), &summary)?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}
