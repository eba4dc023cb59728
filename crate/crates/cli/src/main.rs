//! `holmes`: run, evaluate, compare, serve and export explorations.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use holmes_core::evaluate::{evaluate_diversity, leaf_similarity, BcSelector, ClassFilter};
use holmes_core::imgep::{
    reference_space, Event, ExplorationConfig, ExplorationSink, Explorer, FeedbackSource, GuidanceMode, NoFeedback, Record,
    SimulatedUser,
};
use holmes_core::metrics::PatternClass;
use holmes_core::store::{eval_writer, export_png, load_run, resume_run, RunWriter};
use holmes_core::Grid;

#[derive(Parser)]
#[command(name = "holmes", version, about = "Goal exploration with a growing hierarchy of learned behavioral spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs an exploration into a new run directory, or continues one.
    Explore {
        /// JSON exploration config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Ask for interest scores after each split.
        #[arg(long)]
        guided: bool,
        /// Answer feedback requests with a simulated user preferring this class.
        #[arg(long, value_name = "slp|tlp")]
        simulate: Option<String>,
        /// Continue the run already in `--out` from its last committed stage.
        #[arg(long)]
        resume: bool,
    },
    /// Writes the cumulative binning diversity of a run as CSV.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// spectrum, elliptical, statistics or leaf:<id>
        #[arg(long)]
        bc: String,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// all, slp or tlp
        #[arg(long, default_value = "all")]
        class: String,
        /// Defaults to `<run>/eval/diversity.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the leaf-pairwise CKA matrix of a run as CSV.
    Rsa {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/eval/rsa.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serves a run over HTTP and WebSocket.
    Serve {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Continue the exploration in-process and accept feedback.
        #[arg(long)]
        attach_live: bool,
        /// Creates the run from this config when the directory is empty.
        #[arg(long, requires = "attach_live")]
        config: Option<PathBuf>,
    },
    /// Exports final patterns as 8-bit grayscale PNG.
    ExportPng {
        #[arg(long)]
        run: PathBuf,
        /// A single run index; every stored pattern when omitted.
        #[arg(long)]
        index: Option<usize>,
        /// Output file for `--index`, otherwise an output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Explore { config, out, seed, guided, simulate, resume } => explore(config, &out, seed, guided, simulate, resume),
        Command::Evaluate { run, bc, bins, class, out } => evaluate(&run, &bc, bins, &class, out),
        Command::Rsa { run, out } => rsa(&run, out),
        Command::Serve { run, port, host, attach_live, config } => serve(&run, &host, port, attach_live, config),
        Command::ExportPng { run, index, out } => export(&run, index, &out),
    }
}

fn read_config(path: Option<&Path>) -> Result<ExplorationConfig> {
    let Some(path) = path else { return Ok(ExplorationConfig::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Creates a run directory, fitting the analytic goal space when needed.
fn create_run(dir: &Path, config: ExplorationConfig) -> Result<(Explorer, RunWriter)> {
    config.validate()?;
    let analytic = match config.goal_space.feature_kind() {
        Some(kind) => {
            eprintln!("fitting the {kind} goal space on {} reference rollouts", config.reference_size);
            Some(reference_space(&config, kind)?)
        }
        None => None,
    };
    let writer = RunWriter::create(dir, &config, analytic.as_ref())?;
    Ok((Explorer::new(config, analytic)?, writer))
}

/// Reports progress on stderr.
struct Progress {
    total: usize,
}

impl ExplorationSink for Progress {
    fn on_run(&mut self, record: &Record, _o: &Grid) -> holmes_core::Result<()> {
        let done = record.run + 1;
        if done % 100 == 0 || done == self.total {
            eprintln!("runs {done}/{}", self.total);
        }
        Ok(())
    }

    fn on_event(&mut self, event: &Event) -> holmes_core::Result<()> {
        match event {
            Event::StageTrained { stage, runs_done, reconstruction } if !reconstruction.is_empty() => {
                let losses: Vec<String> = reconstruction.iter().map(|(id, l)| format!("{id}={l:.1}")).collect();
                eprintln!("stage {stage} trained at run {runs_done}: {}", losses.join(" "));
            }
            Event::SplitOccurred { parent, left, right, populations, .. } => {
                eprintln!("split {parent} -> {left} ({}) / {right} ({})", populations[0], populations[1]);
            }
            Event::FeedbackResolved { scores, timed_out, .. } => {
                eprintln!("interest scores {scores:?}{}", if *timed_out { " (kept)" } else { "" });
            }
            _ => {}
        }
        Ok(())
    }
}

fn explore(config: Option<PathBuf>, out: &Path, seed: Option<u64>, guided: bool, simulate: Option<String>, resume: bool) -> Result<()> {
    let (mut explorer, mut writer) = if resume {
        if config.is_some() || seed.is_some() || guided {
            bail!("--resume continues the stored config; drop --config, --seed and --guided");
        }
        resume_run(out).with_context(|| format!("resuming {}", out.display()))?
    } else {
        let mut cfg = read_config(config.as_deref())?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if guided {
            cfg.guidance = GuidanceMode::Guided;
        }
        create_run(out, cfg)?
    };
    let mut feedback: Box<dyn FeedbackSource> = match simulate.as_deref() {
        None => Box::new(NoFeedback),
        Some(s) => match PatternClass::parse(s) {
            Some(pref @ (PatternClass::Slp | PatternClass::Tlp)) => Box::new(SimulatedUser::new(pref)),
            _ => bail!("--simulate expects slp or tlp, got {s:?}"),
        },
    };
    let total = explorer.config().n_total;
    let mut sink = (&mut writer, Progress { total });
    explorer.run(&mut sink, feedback.as_mut())?;
    let splits = explorer.representation().tree().map_or(0, |t| t.splits());
    println!(
        "{}: {} runs, {} stages, {} splits, {} leaves, digest {}",
        out.display(),
        explorer.runs_done(),
        explorer.stage(),
        splits,
        explorer.representation().leaves().len(),
        explorer.history().digest()
    );
    Ok(())
}

fn output(run: &Path, out: Option<PathBuf>, name: &str) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(std::io::BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?)),
        None => Box::new(eval_writer(run, name)?),
    })
}

fn evaluate(run: &Path, bc: &str, bins: usize, class: &str, out: Option<PathBuf>) -> Result<()> {
    let selector: BcSelector = bc.parse()?;
    let filter: ClassFilter = class.parse()?;
    let curve = evaluate_diversity(run, &selector, bins, filter)?;
    let mut w = output(run, out, "diversity.csv")?;
    writeln!(w, "run_index,occupied_bins")?;
    for (i, bins) in &curve {
        writeln!(w, "{i},{bins}")?;
    }
    w.flush()?;
    println!("{selector} ({class}, {bins} bins): {} occupied after {} runs", curve.last().map_or(0, |c| c.1), curve.len());
    Ok(())
}

fn rsa(run: &Path, out: Option<PathBuf>) -> Result<()> {
    let m = leaf_similarity(run)?;
    let mut w = output(run, out, "rsa.csv")?;
    writeln!(w, "leaf,{}", m.leaves.join(","))?;
    for (leaf, row) in m.leaves.iter().zip(&m.values) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{leaf},{}", cells.join(","))?;
    }
    w.flush()?;
    println!("CKA between {} leaves written", m.leaves.len());
    Ok(())
}

fn serve(run: &Path, host: &str, port: u16, attach_live: bool, config: Option<PathBuf>) -> Result<()> {
    let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
    let runtime = tokio::runtime::Runtime::new()?;
    let (state, engine) = if attach_live {
        if !run.join("config.json").exists() {
            let cfg = read_config(config.as_deref())?;
            drop(create_run(run, cfg)?);
        }
        let (state, engine) = holmes_service::attach_live(run)?;
        (state, Some(engine))
    } else {
        (holmes_service::ServiceState::open(run)?, None)
    };
    let status = state.status();
    eprintln!("serving {} at http://{addr} (stage {}, {} runs)", run.display(), status.stage, status.runs_done);
    let _engine = engine.map(|e| e.spawn());
    runtime.block_on(holmes_service::serve(state, addr))?;
    Ok(())
}

fn export(run: &Path, index: Option<usize>, out: &Path) -> Result<()> {
    match index {
        Some(i) => export_png(run, i, out)?,
        None => {
            let loaded = load_run(run)?;
            fs::create_dir_all(out)?;
            for r in &loaded.records {
                export_png(run, r.run, &out.join(format!("{:06}.png", r.run)))?;
            }
            println!("{} patterns exported to {}", loaded.records.len(), out.display());
        }
    }
    Ok(())
}
