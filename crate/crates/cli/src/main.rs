use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use adaptrial_core::sim::{fpr_study, run_replication_traced, run_study, SimulationScenario};
use adaptrial_core::stats::{analyze, AnalysisReport};
use adaptrial_core::store::{self, export_table, read_log_file, ExportRow, Snapshot, Verification};
use adaptrial_core::{ExperimentState, PolicyKind};
use adaptrial_server::ServerConfig;

#[derive(Parser)]
#[command(name = "adaptrial", version, about = "Adaptive experiments with Beta-Bernoulli Thompson Sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    JsonLines,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        /// TOML config file; ADAPTRIAL_* variables and these flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        token: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a Monte-Carlo study from a scenario file or a bundled scenario name.
    Simulate {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replications: Option<u64>,
        /// Directory for replications.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the event logs of the first N replications under <out>/logs.
        #[arg(long, default_value_t = 0, requires = "out")]
        logs: u64,
        /// Measure the Type-I error rate at this level instead (equal means only).
        #[arg(long)]
        fpr: Option<f64>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Per-policy summaries, Wald tests and allocation from a log (.jsonl) or export (.csv).
    Analyze {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Rebuild state from a log, optionally checking it against a snapshot.
    Replay {
        log: PathBuf,
        #[arg(long)]
        verify_against: Option<PathBuf>,
        #[arg(long)]
        write_snapshot: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Flatten a log into one row per assignment.
    Export {
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Serve {
            config,
            listen,
            data_dir,
            token,
            seed,
        } => serve(config, listen, data_dir, token, seed),
        Command::Simulate {
            scenario,
            seed,
            replications,
            out,
            logs,
            fpr,
            format,
        } => simulate(&scenario, seed, replications, out.as_deref(), logs, fpr, format),
        Command::Analyze { file, format } => {
            let rows = load_rows(&file)?;
            emit_analysis(&analyze(&rows), format)
        }
        Command::Replay {
            log,
            verify_against,
            write_snapshot,
            format,
        } => replay(&log, verify_against.as_deref(), write_snapshot.as_deref(), format),
        Command::Export { log, out, format } => export(&log, out.as_deref(), format),
    }
}

fn serve(
    config: Option<PathBuf>,
    listen: Option<String>,
    data_dir: Option<PathBuf>,
    token: Option<String>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(path) => ServerConfig::from_file(&path)?,
        None => ServerConfig::default(),
    }
    .with_env()?;
    if let Some(v) = listen {
        cfg.listen = v;
    }
    if let Some(v) = data_dir {
        cfg.data_dir = Some(v);
    }
    if let Some(v) = token {
        cfg.token = Some(v).filter(|t| !t.is_empty());
    }
    if seed.is_some() {
        cfg.seed = seed;
    }
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(adaptrial_server::serve(cfg, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn load_scenario(arg: &str) -> Result<SimulationScenario> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(s) = SimulationScenario::builtin(arg) {
            return Ok(s);
        }
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
    SimulationScenario::from_toml_str(&text).with_context(|| format!("scenario {}", path.display()))
}

fn simulate(
    arg: &str,
    seed: Option<u64>,
    replications: Option<u64>,
    out: Option<&Path>,
    logs: u64,
    fpr: Option<f64>,
    format: Format,
) -> Result<ExitCode> {
    let mut scenario = load_scenario(arg)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    if let Some(r) = replications {
        scenario.replications = r;
    }
    let stdout = io::stdout();
    let mut w = stdout.lock();

    if let Some(alpha) = fpr {
        let report = fpr_study(&scenario, alpha)?;
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("fpr.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        }
        match format {
            Format::JsonLines => writeln!(w, "{}", serde_json::to_string(&report)?)?,
            Format::Csv => {
                writeln!(w, "policy,alpha,replications,rejections,undefined,rate,ci_low,ci_high")?;
                for p in &report.policies {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{}",
                        p.policy, report.alpha, report.replications, p.rejections, p.undefined, p.rate, p.ci_low, p.ci_high
                    )?;
                }
            }
            Format::Table => {
                writeln!(
                    w,
                    "type-I error at alpha={} over {} replications",
                    report.alpha, report.replications
                )?;
                for p in &report.policies {
                    writeln!(
                        w,
                        "  {:<4} rejections={:<6} rate={:.4}  95% CI [{:.4}, {:.4}]  undefined={}",
                        p.policy.name(),
                        p.rejections,
                        p.rate,
                        p.ci_low,
                        p.ci_high,
                        p.undefined
                    )?;
                }
            }
        }
        return Ok(ExitCode::SUCCESS);
    }

    let report = run_study(&scenario)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        report.write_csv(fs::File::create(dir.join("replications.csv"))?)?;
        fs::write(dir.join("summary.json"), report.summary_json() + "\n")?;
        if logs > 0 {
            let log_dir = dir.join("logs");
            fs::create_dir_all(&log_dir)?;
            for rec in report.replications.iter().take(logs as usize) {
                let events = run_replication_traced(&scenario, rec.seed)?.events;
                let f = fs::File::create(log_dir.join(format!("replication-{}.jsonl", rec.replication)))?;
                store::write_log(io::BufWriter::new(f), &events)?;
            }
        }
    }
    match format {
        Format::Table => write!(w, "{}", report.render_summary())?,
        Format::Csv => report.write_csv(&mut w)?,
        Format::JsonLines => {
            for rec in &report.replications {
                writeln!(w, "{}", serde_json::to_string(rec)?)?;
            }
            writeln!(
                w,
                "{}",
                serde_json::to_string(&serde_json::json!({ "aggregate": report.aggregate }))?
            )?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Rows from an export CSV, or from a JSONL log (corruption is an integrity error).
fn load_rows(path: &Path) -> Result<Vec<ExportRow>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Vec::new());
    }
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return Ok(store::read_csv(bytes.as_slice())?);
    }
    let events = store::parse_log(bytes.as_slice())?;
    // Replay validates the log beyond sequence density.
    ExperimentState::replay(&events)?;
    Ok(export_table(&events))
}

fn emit_analysis(report: &AnalysisReport, format: Format) -> Result<ExitCode> {
    let stdout = io::stdout();
    let mut w = stdout.lock();
    match format {
        Format::Table => write!(w, "{}", report.render())?,
        Format::JsonLines => writeln!(w, "{}", serde_json::to_string(report)?)?,
        Format::Csv => {
            writeln!(
                w,
                "policy,arm,assigned,rewarded,successes,mean,sem,z_vs_arm0,p_vs_arm0"
            )?;
            for p in &report.policies {
                let alloc = report.allocation.policy(p.policy).expect("analysed policies have allocations");
                for (arm, summary) in p.arms.iter().enumerate() {
                    let cmp = p.comparisons.iter().find(|c| c.arm == arm).and_then(|c| c.wald);
                    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{},{}",
                        p.policy,
                        arm,
                        alloc.assigned.counts[arm],
                        alloc.rewarded.counts[arm],
                        summary.as_ref().map_or(0, |s| s.successes),
                        opt(summary.as_ref().map(|s| s.mean)),
                        opt(summary.as_ref().map(|s| s.sem)),
                        opt(cmp.map(|c| c.z)),
                        opt(cmp.map(|c| c.two_sided_p)),
                    )?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn replay(log: &Path, snapshot: Option<&Path>, write_snapshot: Option<&Path>, format: Format) -> Result<ExitCode> {
    let events = read_log_file(log)?;
    let state = ExperimentState::replay(&events)?;
    if let Some(path) = write_snapshot {
        Snapshot::of(&state).write_to(path)?;
    }
    match snapshot {
        Some(path) if path.exists() => {
            let snap = Snapshot::read_from(path)?;
            match snap.verify(&events)? {
                Verification::Match => {
                    println!(
                        "match: snapshot of `{}` at sequence {} equals the replayed state",
                        snap.experiment_id, snap.as_of_sequence
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Verification::Mismatch { field, detail } => {
                    eprintln!(
                        "mismatch: snapshot of `{}` at sequence {} first diverges in `{field}`: {detail}",
                        snap.experiment_id, snap.as_of_sequence
                    );
                    Ok(ExitCode::from(1))
                }
            }
        }
        other => {
            if let Some(path) = other {
                eprintln!("snapshot {} not found; printing the reconstructed state", path.display());
            }
            print_state(&state, format)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_state(state: &ExperimentState, format: Format) -> Result<()> {
    let stdout = io::stdout();
    let mut w = stdout.lock();
    match format {
        Format::JsonLines => writeln!(w, "{}", serde_json::to_string(state)?)?,
        Format::Csv => {
            writeln!(w, "arm,label,alpha,beta,expected_value,successes,failures,paused")?;
            for (arm, p) in state.arms.iter().zip(&state.committed) {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    arm.index,
                    arm.label,
                    p.alpha(),
                    p.beta(),
                    p.expected_value(),
                    p.successes,
                    p.failures,
                    state.paused.contains(&arm.index)
                )?;
            }
        }
        Format::Table => {
            writeln!(
                w,
                "experiment {} ({}) status={:?} last_sequence={}",
                state.experiment_id,
                state.config.name,
                state.status(),
                state.last_sequence
            )?;
            writeln!(
                w,
                "assignments={} (UR {}, TSBB {}) rewards={} pending={} flushes={} split_to_uniform={}",
                state.assignments.len(),
                state.served.get(PolicyKind::UniformRandom),
                state.served.get(PolicyKind::ThompsonBB),
                state.rewards_recorded,
                state.pending.len(),
                state.flushes,
                state.split_to_uniform
            )?;
            for (arm, p) in state.arms.iter().zip(&state.committed) {
                writeln!(
                    w,
                    "  arm {} {:<16} alpha={:<8} beta={:<8} EV={:.3}{}",
                    arm.index,
                    arm.label,
                    p.alpha(),
                    p.beta(),
                    p.expected_value(),
                    if state.paused.contains(&arm.index) { "  [paused]" } else { "" }
                )?;
            }
        }
    }
    Ok(())
}

fn export(log: &Path, out: Option<&Path>, format: Format) -> Result<ExitCode> {
    let events = read_log_file(log)?;
    ExperimentState::replay(&events)?;
    let rows = export_table(&events);
    let mut buf = Vec::new();
    match format {
        Format::Csv => store::write_csv(&mut buf, &rows)?,
        Format::JsonLines => {
            for r in &rows {
                writeln!(buf, "{}", serde_json::to_string(r)?)?;
            }
        }
        Format::Table => bail!("export supports --format csv or json-lines"),
    }
    match out {
        Some(path) => fs::write(path, buf)?,
        None => io::stdout().lock().write_all(&buf)?,
    }
    Ok(ExitCode::SUCCESS)
}
