use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use genni_cli::bench::{bench_csv, bench_sampler};
use genni_cli::config::{load_config, MAX_SWEEP_RUNS};
use genni_cli::inspect::{inspect_negatives, InspectRequest, ModelSource};
use genni_cli::plots::export_plots;
use genni_cli::runner::{default_out_dir, rerun_manifest, run_experiment, Manifest, RunOptions};
use genni_cli::synth::write_synthetic;
use genni_cli::{CliError, CliResult};
use genni_core::synthetic::{SyntheticSpec, Transition};

#[derive(Debug, Parser)]
#[command(name = "genni", version, about = "Sequential recommendation experiments with GenNi negative sampling")]
struct Cli {
    /// Random seed (run seed, generator seed or benchmark seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output path: a directory for `run`, a file elsewhere (stdout if omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate every cell of a config's sweep.
    Run {
        /// TOML experiment config.
        #[arg(required_unless_present = "manifest")]
        config: Option<PathBuf>,
        /// Repeat the experiment recorded in a manifest instead.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        /// Allow sweeps of more than 10,000 runs.
        #[arg(long)]
        allow_large_sweep: bool,
        /// Suppress per-epoch progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Write a synthetic interaction log as TSV.
    GenSynthetic {
        /// TOML file holding a synthetic spec; overrides the flags below.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 20.0)]
        mean_len: f64,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Plant a confounding item pair.
        #[arg(long)]
        planted: bool,
        /// Fraction of users held out from the planted transition.
        #[arg(long, default_value_t = 0.1)]
        held_out: f64,
    },
    /// Measure per-position GenNi sampling latency.
    BenchSampler {
        #[arg(long, value_delimiter = ',', default_values_t = [10_000usize, 100_000])]
        items: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01f64, 0.1, 1.0])]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
    /// Gather metrics CSVs under a directory into plot-ready JSON.
    ExportPlots { dir: PathBuf },
    /// List the most probable negatives for users' test contexts.
    InspectNegatives {
        /// Manifest of a finished run.
        #[arg(long, required_unless_present = "checkpoint")]
        manifest: Option<PathBuf>,
        /// Run name within the manifest (default: the first run).
        #[arg(long, requires = "manifest")]
        run: Option<String>,
        /// Config describing the data, used with --checkpoint.
        #[arg(long, requires = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "manifest", requires = "config")]
        checkpoint: Option<PathBuf>,
        /// User id to inspect; repeatable.
        #[arg(long = "user")]
        users: Vec<String>,
        /// Number of test users when no --user is given.
        #[arg(long, default_value_t = 3)]
        count: usize,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
    },
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            std::fs::write(path, text).map_err(|e| CliError::io(path, e))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Run {
            config,
            manifest,
            allow_large_sweep,
            quiet,
        } => {
            let opts = RunOptions {
                threads,
                allow_large_sweep,
                verbose: !quiet,
            };
            let (result, out) = if let Some(m) = manifest {
                if cli.seed.is_some() {
                    return Err(CliError::Config("--seed cannot override a manifest's seeds".into()));
                }
                let out = cli.out.unwrap_or_else(default_out_dir);
                (rerun_manifest(&m, &out, &opts), out)
            } else {
                let path = config.expect("clap requires a config");
                let mut cfg = load_config(&path)?;
                if let Some(seed) = cli.seed {
                    cfg.train.seed = seed;
                    cfg.sweep.seed.clear();
                }
                let size = cfg.sweep.size();
                eprintln!("sweep: {size} run(s)");
                if size > MAX_SWEEP_RUNS && !allow_large_sweep {
                    return Err(CliError::Config(format!(
                        "sweep has {size} runs, more than {MAX_SWEEP_RUNS}; pass --allow-large-sweep to run it anyway"
                    )));
                }
                let out = cli.out.or(cfg.out.clone()).unwrap_or_else(default_out_dir);
                (run_experiment(&cfg, &out, &opts), out)
            };
            let manifest = match result {
                Ok(m) => m,
                Err(CliError::Core(genni_core::Error::Diverged { epoch, batch, loss, dump })) => {
                    let path = out.join("diverged.json");
                    let _ = std::fs::create_dir_all(&out).and_then(|_| std::fs::write(&path, dump));
                    eprintln!("batch dump written to {}", path.display());
                    return Err(genni_core::Error::Diverged {
                        epoch,
                        batch,
                        loss,
                        dump: String::new(),
                    }
                    .into());
                }
                Err(e) => return Err(e),
            };
            summarize(&manifest, &out);
        }
        Command::GenSynthetic {
            spec,
            users,
            items,
            mean_len,
            order,
            temperature,
            planted,
            held_out,
        } => {
            let mut spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                    toml::from_str::<SyntheticSpec>(&text)
                        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                }
                None => {
                    let mut s = SyntheticSpec::markov(users, items, mean_len, 0);
                    s.transition = if planted {
                        Transition::PlantedConfounder { temperature, held_out }
                    } else {
                        Transition::Markov { order, temperature }
                    };
                    s
                }
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("synthetic.tsv"));
            let generated = write_synthetic(&spec, &out)?;
            eprintln!("wrote {} interactions to {}", generated.interactions, out.display());
            if let Some(p) = generated.planted {
                eprintln!("planted pair written to {}", p.display());
            }
        }
        Command::BenchSampler { items, betas, reps, dim } => {
            let rows = bench_sampler(&items, &betas, reps, dim, cli.seed.unwrap_or(0))?;
            emit(cli.out.as_deref(), &bench_csv(&rows))?;
        }
        Command::ExportPlots { dir } => {
            let data = export_plots(&dir)?;
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
            let json = serde_json::to_string_pretty(&data).expect("plot data serializes");
            emit(cli.out.as_deref(), &(json + "\n"))?;
        }
        Command::InspectNegatives {
            manifest,
            run,
            config,
            checkpoint,
            users,
            count,
            alpha,
            top_n,
        } => {
            let source = match (manifest, config, checkpoint) {
                (Some(path), _, _) => ModelSource::Manifest { path, run },
                (None, Some(config), Some(checkpoint)) => ModelSource::Checkpoint { config, checkpoint },
                _ => return Err(CliError::Config("give --manifest, or --config with --checkpoint".into())),
            };
            let lines = inspect_negatives(&InspectRequest {
                source,
                users,
                count,
                alpha,
                top_n,
            })?;
            let mut text = String::new();
            for l in &lines {
                text.push_str(&serde_json::to_string(l).expect("line serializes"));
                text.push('\n');
            }
            emit(cli.out.as_deref(), &text)?;
        }
    }
    Ok(())
}

fn summarize(manifest: &Manifest, out: &Path) {
    for r in &manifest.runs {
        eprintln!(
            "{}: best epoch {:?}, test ndcg@10 {:.4}, hr@10 {:.4}",
            r.name, r.best_epoch, r.test.ndcg10, r.test.hr10
        );
    }
    eprintln!(
        "{} run(s) in {:.1}s; manifest at {}",
        manifest.runs.len(),
        manifest.wall_clock_seconds,
        out.join(genni_cli::runner::MANIFEST_FILE).display()
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
