use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moe_spec_offload::drafting::build_affinity_table;
use moe_spec_offload::harness::{
    analyze_trace, emit_results, ingest_trace, run_experiment, run_selftest, write_heatmap,
    write_results, ExperimentConfig,
};
use moe_spec_offload::model::build_model;
use moe_spec_offload::Result;

#[derive(Parser)]
#[command(version, about = "Speculative decoding for offloaded MoE models, simulated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a parameter sweep and write the results table.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// csv or json
        #[arg(long)]
        format: Option<String>,
        /// Comma-separated systems, e.g. `hot_temporal,caching`.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        batch: Option<String>,
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        n_draft: Option<String>,
        /// A seed, a list, or a range such as `0..20`.
        #[arg(long)]
        seed: Option<String>,
    },
    /// Expert affinity tables.
    Affinity {
        #[command(subcommand)]
        command: AffinityCommand,
    },
    /// Routing traces.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Run the invariant suite.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AffinityCommand {
    /// Compute the pairwise expert distance table of the configured model.
    Build {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Hotness summary on stdout and a per-expert heatmap table at `--out`.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hottest experts listed per layer.
        #[arg(long, default_value_t = 4)]
        top: usize,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::parse_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Run {
            config,
            out,
            format,
            policy,
            batch,
            gamma,
            n_draft,
            seed,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            let overrides = [
                ("format", format),
                ("policy", policy),
                ("batch", batch),
                ("gamma", gamma),
                ("n_draft", n_draft),
                ("seeds", seed),
            ];
            for (key, value) in overrides {
                if let Some(v) = value {
                    cfg.set(key, &v)?;
                }
            }
            if out.is_some() {
                cfg.out = out;
            }
            cfg.validate()?;
            let rows = run_experiment(&cfg)?;
            match &cfg.out {
                Some(path) => write_results(&rows, cfg.format, path)?,
                None => emit_results(&rows, cfg.format, std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Command::Affinity {
            command: AffinityCommand::Build { config, out },
        } => {
            let cfg = load_config(config.as_ref())?;
            build_affinity_table(&build_model(&cfg.model)?).save(&out)?;
            Ok(true)
        }
        Command::Trace {
            command: TraceCommand::Analyze { input, out, top },
        } => {
            let report = analyze_trace(&ingest_trace(&input)?, top)?;
            write_heatmap(std::fs::File::create(&out)?, &report)?;
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &report)?;
            writeln!(stdout)?;
            Ok(true)
        }
        Command::Selftest { out } => {
            let report = run_selftest();
            let text = report.render();
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(path, &text)?;
            }
            Ok(report.all_passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
