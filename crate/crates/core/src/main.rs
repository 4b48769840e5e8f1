use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hetspec::packer::{build_indicator, naive_padding, pack};
use hetspec::runner::experiment::write_atomic;
use hetspec::runner::{
    ablation_ladder, compare_policies, policy_variants, preset, run_experiment, sweep_microbatch,
    write_report, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "hetspec",
    version,
    about = "Heterogeneous speculative decoding simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Source {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Base seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeded repetitions, overriding the config.
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output directory (defaults to the config's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare policies. With one config, compares LBSS, epsilon-greedy
    /// and prompt-length greedy on its workload.
    Compare {
        /// Config files sharing one workload.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Goodput for micro-batch counts 1..=max-b.
    SweepMicrobatch {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 8)]
        max_b: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Goodput as optimizations are enabled one by one.
    Ablation {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the packed layout for a list of KV lengths.
    PackDemo {
        /// Comma-separated KV lengths.
        #[arg(long, value_delimiter = ',', required = true)]
        lens: Vec<usize>,
        /// Tensor rows; defaults to the number of requests.
        #[arg(long)]
        width: Option<usize>,
    },
    /// Print a built-in preset as TOML.
    Preset { name: String },
}

enum Failure {
    Config(String),
    Io(String),
}

impl From<hetspec::Error> for Failure {
    fn from(e: hetspec::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn load(path: &Path) -> CliResult<ExperimentConfig> {
    let parsed = ExperimentConfig::load(path)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    parsed.map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn resolve(source: &Source) -> CliResult<ExperimentConfig> {
    let mut config = match (&source.config, &source.preset) {
        (Some(path), _) => load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            return Err(Failure::Config(
                "pass --config <file> or --preset <name>".into(),
            ))
        }
    };
    if let Some(seed) = source.seed {
        config.workload.seed = seed;
    }
    if let Some(r) = source.repetitions {
        config.repetitions = r;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(out: &Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    out.clone().unwrap_or_else(|| config.output.dir.clone())
}

fn write_json<T: serde::Serialize>(dir: &Path, file: &str, value: &T) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(file);
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::from)?;
    bytes.push(b'\n');
    write_atomic(&path, &bytes)?;
    Ok(path)
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Run { source, out } => {
            let config = resolve(&source)?;
            let (report, traces) = run_experiment(&config)?;
            let dir = out_dir(&out, &config);
            for path in write_report(&config, &report, &traces, &dir)? {
                println!("wrote {}", path.display());
            }
            let s = &report.summary;
            println!(
                "{} [{}]: goodput {:.3} ± {:.3} tok/s, idle {:.3}, regret {:.1}",
                report.name,
                report.policy,
                s.goodput.mean,
                s.goodput.std,
                s.idle_fraction.mean,
                s.regret.mean
            );
        }
        Command::Compare {
            configs,
            preset: name,
            seed,
            out,
        } => {
            let mut list = configs
                .iter()
                .map(|p| load(p))
                .collect::<CliResult<Vec<_>>>()?;
            if let Some(name) = name {
                list.push(preset(&name)?);
            }
            if list.len() == 1 {
                list = policy_variants(&list[0]);
            }
            if let Some(seed) = seed {
                for c in &mut list {
                    c.workload.seed = seed;
                }
            }
            let table = compare_policies(&list)?;
            print!("{}", table.render());
            if let Some(dir) = out {
                println!(
                    "wrote {}",
                    write_json(&dir, "comparison.json", &table)?.display()
                );
            }
        }
        Command::SweepMicrobatch { source, max_b, out } => {
            let config = resolve(&source)?;
            let counts: Vec<usize> = (1..=max_b.max(1)).collect();
            let points = sweep_microbatch(&config, &counts)?;
            let mut csv =
                String::from("micro_batches,goodput_mean,goodput_std,idle_fraction_mean\n");
            for p in &points {
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    p.micro_batches, p.goodput.mean, p.goodput.std, p.idle_fraction.mean
                );
            }
            print!("{csv}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let path = dir.join(format!("{}.sweep.csv", config.name));
                write_atomic(&path, csv.as_bytes())?;
                println!("wrote {}", path.display());
            }
        }
        Command::Ablation { source, out } => {
            let config = resolve(&source)?;
            let steps = ablation_ladder(&config)?;
            for s in &steps {
                println!(
                    "{:<22} {:<20} {:>10.3} ± {:.3}",
                    s.label,
                    s.report.policy,
                    s.report.summary.goodput.mean,
                    s.report.summary.goodput.std
                );
            }
            if let Some(dir) = out {
                let file = format!("{}.ablation.json", config.name);
                println!("wrote {}", write_json(&dir, &file, &steps)?.display());
            }
        }
        Command::PackDemo { lens, width } => {
            let width = width.unwrap_or(lens.len());
            let layout = pack(&lens, width)?;
            let mask = build_indicator(&layout)?;
            println!(
                "B = {}, L = {}, padding = {} (naive {}), extra query rows = {}",
                layout.width,
                layout.length,
                layout.padding_tokens,
                naive_padding(&lens)?,
                layout.extra_query_rows()
            );
            for row in 0..mask.width {
                let cells: Vec<String> = (0..mask.length)
                    .map(|c| mask.get(row, c).map_or(".".to_string(), |r| r.to_string()))
                    .collect();
                println!("row {row}: {}", cells.join(" "));
            }
        }
        Command::Preset { name } => print!("{}", preset(&name)?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("i/o error: {msg}");
            ExitCode::from(3)
        }
    }
}
