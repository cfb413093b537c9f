use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metalab::lab::{
    self, emit_plotdata, nonstationarity_sweep, richness_ablation, run_jobs, run_to_file, AblationMode, Execution,
    ExperimentConfig, FreqSpec, LabError, PlotKind, SweepSpec,
};

#[derive(Parser)]
#[command(name = "metalab", version, about = "Meta-gradient RL experiments in non-stationary gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment, sweep or frequency-sweep file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Log every n-th outer iteration (overrides the config).
    #[arg(long)]
    log_stride: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// One lifetime per seed, one metrics CSV each.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run seed; defaults to the config's.
        #[arg(long)]
        seed: Option<u64>,
        /// Run seeds 0..n instead of a single seed.
        #[arg(long)]
        seeds: Option<usize>,
        /// One row per inner update.
        #[arg(long)]
        per_inner: bool,
    },
    /// Grid sweep with best-configuration selection.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Seeds 0..n per cell; defaults to the file's.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Method against baseline across change periods.
    FreqSweep {
        #[command(flatten)]
        common: Common,
        /// Seeds 0..n per cell; defaults to the file's.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Context richness ablation.
    AblateContext {
        #[command(flatten)]
        common: Common,
        /// Seeds 0..n per context set.
        #[arg(long)]
        seeds: Option<usize>,
        /// Grow the feature set family by family, or try each family alone.
        #[arg(long, value_enum, default_value_t = Mode::Prefix)]
        mode: Mode,
        /// History length H of every context set.
        #[arg(long, default_value_t = 4)]
        history: usize,
    },
    /// Contextual run with probe tracking.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Run seed; defaults to the config's.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate metrics files into plot data.
    Plotdata {
        /// Meta-parameter schedules, probe traces or period trends.
        #[arg(long, value_enum)]
        kind: Kind,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Prefix,
    Individual,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Schedule,
    Probes,
    Freq,
}

fn create(path: &Path) -> Result<BufWriter<File>, LabError> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned())
}

fn run(common: &Common, seed: Option<u64>, seeds: Option<usize>, per_inner: bool, probe: bool) -> Result<(), LabError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.log_stride {
        cfg.logging.stride = s;
    }
    if per_inner {
        cfg.logging.per_inner = true;
    }
    if probe {
        if cfg.context.is_none() {
            return Err(LabError::Config("probe needs a contextual config ([context] section)".into()));
        }
        cfg.logging.probes = Some(true);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out.clone());
    let name = stem(&common.config);
    let seeds: Vec<u64> = match seeds {
        Some(0) => return Err(LabError::Config("--seeds must be positive".into())),
        Some(n) => (0..n as u64).collect(),
        None => vec![cfg.seed],
    };
    if probe {
        let path = out.join(format!("{name}_seed{}.csv", cfg.seed));
        let summary = run_to_file(&cfg, &path)?;
        let probes = summary.final_probes.expect("contextual run has probes");
        let ppath = out.join(format!("{name}_seed{}_probes.csv", cfg.seed));
        let mut w = lab::csv_writer(create(&ppath)?);
        w.write_record(["probe", "value"])?;
        for (n, v) in metalab::context::PROBE_NAMES.iter().zip(probes) {
            w.write_record([n.to_string(), v.to_string()])?;
        }
        w.flush()?;
        println!("{}\ttotal_return={}\t{}", path.display(), summary.total_return, ppath.display());
        return Ok(());
    }
    let jobs: Vec<_> = seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            (c, Some(out.join(format!("{name}_seed{s}.csv"))))
        })
        .collect();
    let results = run_jobs(&jobs, common.workers)?;
    let mut failed = None;
    for ((c, p), r) in jobs.iter().zip(results) {
        match r {
            Ok(t) => println!("{}\tseed={}\ttotal_return={t}", p.as_ref().expect("path").display(), c.seed),
            Err(e) => {
                eprintln!("seed {} failed: {e}", c.seed);
                failed = Some(e);
            }
        }
    }
    match failed {
        Some(e) => Err(LabError::Run(e)),
        None => Ok(()),
    }
}

fn exec(common: &Common, default_out: &Path) -> Execution {
    let out = common.out.clone().unwrap_or_else(|| default_out.to_path_buf());
    Execution { workers: common.workers, out: Some(out.join("runs")), log_stride: common.log_stride }
}

fn dispatch(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Run { common, seed, seeds, per_inner } => run(&common, seed, seeds, per_inner, false),
        Command::Probe { common, seed } => run(&common, seed, None, false, true),
        Command::Sweep { common, seeds } => {
            let mut spec = SweepSpec::load(&common.config)?;
            if let Some(n) = seeds {
                spec.seeds = n;
            }
            let first_out = spec.variants.first().map(|v| v.base.out.clone()).unwrap_or_else(|| "runs".into());
            let ex = exec(&common, &first_out);
            let out = ex.out.as_ref().and_then(|p| p.parent()).expect("out dir").to_path_buf();
            let reports = lab::sweep(&spec, &ex)?;
            lab::write_sweep_summary(&reports, create(&out.join("summary.csv"))?)?;
            lab::write_best_configs(&reports, &out)?;
            if reports.len() > 1 {
                lab::write_comparison(&reports, create(&out.join("comparison.csv"))?)?;
            }
            for r in &reports {
                match r.best_cell() {
                    Some(c) => println!("{}\tbest={}\tmean={}\tstd={}", r.name, c.label, c.mean, c.std),
                    None => println!("{}\tno cell completed", r.name),
                }
            }
            Ok(())
        }
        Command::FreqSweep { common, seeds } => {
            let mut spec = FreqSpec::load(&common.config)?;
            if let Some(n) = seeds {
                spec.seeds = n;
            }
            let ex = exec(&common, &spec.baseline.out.clone());
            let out = ex.out.as_ref().and_then(|p| p.parent()).expect("out dir").to_path_buf();
            let rows = nonstationarity_sweep(&spec, &ex)?;
            lab::write_freq(&rows, create(&out.join("freq_summary.csv"))?, create(&out.join("freq_per_seed.csv"))?)?;
            for r in &rows {
                let rel = r.improvement.as_ref().map_or(String::new(), |i| format!("\trelative={:.2}%", i.percent));
                println!("period={}\t{}\tmean={}{rel}", r.period, r.method, r.mean);
            }
            Ok(())
        }
        Command::AblateContext { common, seeds, mode, history } => {
            let base = ExperimentConfig::load(&common.config)?;
            let ex = exec(&common, &base.out.clone());
            let out = ex.out.as_ref().and_then(|p| p.parent()).expect("out dir").to_path_buf();
            let mode = match mode {
                Mode::Prefix => AblationMode::Prefix,
                Mode::Individual => AblationMode::Individual,
            };
            let rows = richness_ablation(&base, mode, history, seeds.unwrap_or(lab::DEFAULT_SEEDS), &ex)?;
            lab::write_ablation(&rows, create(&out.join("ablation.csv"))?)?;
            for r in &rows {
                println!("{}\tdim={}\tmean={}\tstd={}", r.label, r.input_dim, r.mean, r.std);
            }
            Ok(())
        }
        Command::Plotdata { kind, out, files } => {
            let (kind, name) = match kind {
                Kind::Schedule => (PlotKind::Schedule, "schedule"),
                Kind::Probes => (PlotKind::Probes, "probes"),
                Kind::Freq => (PlotKind::Freq, "freq"),
            };
            let path = out.join(format!("plot_{name}.csv"));
            // aggregate into memory first so a failure leaves no partial file
            let mut buf = Vec::new();
            emit_plotdata(&files, kind, &mut buf)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(&path, buf)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
