use argus_bench::commands;
use argus_bench::sweep::run_sweep;
use argus_bench::{BenchError, Overrides, RunConfig};
use clap::{Parser, ValueEnum};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Synth,
    Curate,
    Split,
    Preprocess,
    Tokenize,
    Pretrain,
    Gradcheck,
    Evaluate,
    Sweep,
}

/// Desk-scale driver for the CT report generation pipeline.
#[derive(Debug, Parser)]
#[command(name = "argus-bench", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// normal | high
    #[arg(long)]
    profile: Option<String>,
    /// pixel_shuffle | avg_pool | perceiver
    #[arg(long)]
    compression: Option<String>,
    /// 1 | 2
    #[arg(long)]
    connector: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> Result<(), BenchError> {
    let Ok(raw) = std::env::var("ARGUS_BENCH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| BenchError::Validation(format!("ARGUS_BENCH_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| BenchError::Validation(e.to_string()))
}

/// Appends one line to `run.log`, the only file that carries wall-clock time
/// and host details.
fn log_run(out: &Path, line: &str) {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let host = std::env::var("HOSTNAME")
        .ok()
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok())
        .map(|h| h.trim().to_string())
        .unwrap_or_default();
    let _ = std::fs::create_dir_all(out);
    let written = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("run.log"))
        .and_then(|mut f| writeln!(f, "{secs} host={host} {line}"));
    if let Err(e) = written {
        log::warn!("could not append to run.log: {e}");
    }
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<String, BenchError> {
    Ok(match cli.command {
        Command::Synth => format!("synth: {} samples", commands::synth(cfg)?),
        Command::Curate => {
            let s = commands::curate(cfg)?;
            format!(
                "curate: kept {}, dropped {}, removed {} sentences",
                s.kept, s.dropped, s.removed_sentences
            )
        }
        Command::Split => {
            let m = commands::split(cfg)?;
            let mut lines = vec!["split: source train val test".to_string()];
            for (source, c) in &m.counts {
                lines.push(format!("  {source} {} {} {}", c.train, c.val, c.test));
            }
            lines.join("\n")
        }
        Command::Preprocess => format!("preprocess: {} volumes at {}", commands::preprocess(cfg)?, cfg.profile),
        Command::Tokenize => {
            let rows = commands::tokenize(cfg)?;
            let mut counts: Vec<(usize, usize)> = rows.iter().map(|r| (r.raw_tokens, r.compressed_tokens)).collect();
            counts.sort_unstable();
            counts.dedup();
            let ledger: Vec<String> = counts.iter().map(|(a, b)| format!("{a} → {b}")).collect();
            format!(
                "tokenize: {} grids, token ledger ({}, {}): {}",
                rows.len(),
                cfg.profile,
                cfg.compression,
                ledger.join(", ")
            )
        }
        Command::Pretrain => {
            let s = commands::pretrain(cfg)?;
            let violations: usize = s.audit.iter().map(|a| a.violations.len()).sum();
            format!(
                "pretrain: {} samples, {} pretrain + {} alignment steps, loss {:.5} -> {:.5} (align {:.5}), audit violations {violations}",
                s.n_train, s.pretrain_steps, s.align_steps, s.first_loss, s.final_pretrain_loss, s.final_align_loss
            )
        }
        Command::Gradcheck => {
            let g = commands::gradcheck(cfg)?;
            format!(
                "gradcheck: mae {:.3e} flip {:.3e} align {:.3e} over {} coordinates",
                g.mae, g.flip, g.align, g.coordinates
            )
        }
        Command::Evaluate => {
            let mut lines = vec!["evaluate: dataset n avg_nlp bleu4 meteor rouge_l cider".to_string()];
            for r in commands::evaluate(cfg)? {
                lines.push(format!(
                    "  {} {} {:.3} {:.4} {:.4} {:.4} {:.4}",
                    r.dataset, r.n, r.avg_nlp, r.scores.bleu4, r.scores.meteor, r.scores.rouge_l, r.scores.cider
                ));
            }
            lines.join("\n")
        }
        Command::Sweep => {
            let o = run_sweep(cfg)?;
            format!(
                "sweep: {} cells ({} run, {} resumed, {} duplicates ignored)",
                o.rows.len(),
                o.ran.len(),
                o.skipped.len(),
                o.duplicates.len()
            )
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let overrides = Overrides {
        seed: cli.seed,
        profile: cli.profile.clone(),
        compression: cli.compression.clone(),
        connector: cli.connector,
        out: cli.out.clone(),
    };
    let cfg = match init_threads().and_then(|_| RunConfig::load(&cli.config)?.apply(&overrides)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let name = format!("{:?}", cli.command).to_lowercase();
    let start = Instant::now();
    match run(&cli, &cfg) {
        Ok(summary) => {
            println!("{summary}");
            log_run(&cfg.paths.out, &format!("{name} seed={} ok {:.2}s", cfg.seed, start.elapsed().as_secs_f64()));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            log_run(&cfg.paths.out, &format!("{name} seed={} failed: {e}", cfg.seed));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
