use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;

use retsan::fuzz::{fuzz_parallel, FuzzConfig};
use retsan::pages::run_pages;
use retsan::runtime::RuntimeConfig;
use retsan::stats::years_table;
use retsan::trace::suite::run_suite;
use retsan::trace::{execute_trace, ExecConfig, TraceProgram};
use retsan::Mode;

const EXIT_EXPECTATION: u8 = 1;
const EXIT_ERROR: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "retsan", version, about = "Randomized embedded token sanitizer model")]
struct Cli {
    /// Checking mode: fine, lite, shadow or native.
    #[arg(long, global = true, default_value = "fine")]
    mode: Mode,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Nonce width (default 61 in fine mode, 64 in lite mode).
    #[arg(long, global = true)]
    token_bits: Option<u32>,
    /// Redzone words after each object: 1, 2 or 4.
    #[arg(long, global = true, default_value_t = 1)]
    redzone_tokens: usize,
    /// Quarantine capacity in freed objects.
    #[arg(long, global = true, default_value_t = retsan::runtime::DEFAULT_QUARANTINE)]
    quarantine: usize,
    /// Keep executing after a violation.
    #[arg(long = "continue", global = true)]
    continue_on_violation: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    json: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute one trace file.
    Run { file: PathBuf },
    /// Run the generated CWE-analog suite under every mode.
    Suite,
    /// Run a fuzzing campaign.
    Fuzz {
        #[arg(long, default_value_t = 1000)]
        executions: u64,
        /// Independent campaigns (seeds seed, seed+1, ...) folded together.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 24)]
        max_instructions: usize,
    },
    /// Compare dirty pages across modes on two fixed workloads.
    Pages,
    /// Expected years between false detections.
    Stats,
}

impl Cli {
    fn runtime(&self) -> RuntimeConfig {
        RuntimeConfig {
            redzone_tokens: self.redzone_tokens,
            quarantine: self.quarantine,
        }
    }

    fn exec_config(&self) -> ExecConfig {
        ExecConfig {
            token_bits: self.token_bits,
            runtime: self.runtime(),
            continue_on_violation: self.continue_on_violation,
            ..ExecConfig::new(self.mode, self.seed)
        }
    }
}

/// Prints the report to stdout, or writes it to `path` and prints `summary`.
fn emit<T: Serialize>(report: &T, path: Option<&Path>, summary: impl FnOnce() -> String) -> Result<(), String> {
    let json = serde_json::to_string_pretty(report).map_err(|e| e.to_string())?;
    match path {
        Some(p) => {
            fs::write(p, json + "\n").map_err(|e| format!("{}: {e}", p.display()))?;
            println!("{}", summary());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn run_trace(cli: &Cli, file: &Path) -> Result<u8, String> {
    let text = fs::read_to_string(file).map_err(|e| format!("{}: {e}", file.display()))?;
    let program = TraceProgram::parse(&text).map_err(|e| format!("{}: {e}", file.display()))?;
    let report = execute_trace(&program, &cli.exec_config()).map_err(|e| e.to_string())?;
    emit(&report, cli.json.as_deref(), || {
        format!(
            "{}: {} instructions, {} violations, expectations {} passed / {} failed, {} dirty pages",
            report.mode,
            report.instructions.len(),
            report.violations.len(),
            report.expectations.passed,
            report.expectations.failed.len(),
            report.metrics.dirty_pages
        )
    })?;
    if let Some(i) = report.instructions.iter().find(|i| i.error.is_some()) {
        eprintln!("error: instruction {}: {}", i.index, i.error.as_deref().unwrap_or_default());
        return Ok(EXIT_ERROR);
    }
    Ok(if report.expectations.failed.is_empty() { 0 } else { EXIT_EXPECTATION })
}

fn suite(cli: &Cli) -> Result<u8, String> {
    let (report, _) = run_suite(&Mode::ALL, cli.seed, cli.token_bits, cli.runtime()).map_err(|e| e.to_string())?;
    emit(&report, cli.json.as_deref(), || {
        let mut out = String::new();
        for (mode, m) in &report.modes {
            out.push_str(&format!(
                "{mode:>6}: bad {}/{} detected ({:.2}%), good {}/{} clean ({:.2}%)\n",
                m.bad.detected,
                m.bad.total,
                m.bad_detection_rate,
                m.good.total - m.good.detected,
                m.good.total,
                m.good_pass_rate
            ));
        }
        out.push_str(&format!(
            "lite misses: {} (pad-confined: {}, equal: {})",
            report.lite_misses.len(),
            report.pad_confined.len(),
            report.lite_misses_equal_pad_confined
        ));
        out
    })?;
    let failed: usize = report.modes.values().map(|m| m.expectations_failed).sum();
    Ok(if failed == 0 { 0 } else { EXIT_EXPECTATION })
}

fn fuzz(cli: &Cli, executions: u64, jobs: usize, max_instructions: usize) -> Result<u8, String> {
    let mut cfg = FuzzConfig::new(cli.mode, cli.seed, executions);
    cfg.token_bits = cli.token_bits;
    cfg.runtime = cli.runtime();
    cfg.params.max_instructions = max_instructions;
    let metrics = fuzz_parallel(&cfg, jobs).map_err(|e| e.to_string())?;
    emit(&metrics, cli.json.as_deref(), || {
        format!(
            "{} executions, {} violations, {} confirmed, {} suspected collisions, mean dirty pages {:.2}",
            metrics.executions,
            metrics.violations.total,
            metrics.confirmed,
            metrics.suspected_collisions,
            metrics.dirty_pages.mean
        )
    })?;
    Ok(0)
}

fn pages(cli: &Cli) -> Result<u8, String> {
    let report = run_pages(cli.seed, cli.token_bits, cli.runtime()).map_err(|e| e.to_string())?;
    emit(&report, cli.json.as_deref(), || {
        report
            .workloads
            .iter()
            .map(|(name, w)| {
                let modes: Vec<String> = w.modes.iter().map(|(m, c)| format!("{m}={}", c.dirty_pages)).collect();
                format!("{name}: {} shadow/ret extra ratio {:.2}", modes.join(" "), w.ratio)
            })
            .collect::<Vec<_>>()
            .join("\n")
    })?;
    Ok(0)
}

#[derive(Serialize)]
struct StatsReport {
    rows: Vec<retsan::stats::YearsRow>,
}

fn stats(cli: &Cli) -> Result<u8, String> {
    let report = StatsReport {
        rows: years_table(&[64, 61], 1e9),
    };
    emit(&report, cli.json.as_deref(), || {
        report
            .rows
            .iter()
            .map(|r| format!("{} bits at {:e} writes/s: {:.1} years", r.bits, r.rate, r.years))
            .collect::<Vec<_>>()
            .join("\n")
    })?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let result = match &cli.command {
        Command::Run { file } => run_trace(&cli, file),
        Command::Suite => suite(&cli),
        Command::Fuzz {
            executions,
            jobs,
            max_instructions,
        } => fuzz(&cli, *executions, *jobs, *max_instructions),
        Command::Pages => pages(&cli),
        Command::Stats => stats(&cli),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
