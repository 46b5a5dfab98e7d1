//! Command line driver: run simulations, verify the statistical claims,
//! print the recurrence oracle, and re-render saved reports.

use clap::{Parser, Subcommand};
use dyhypes::analysis::{appendix_recurrence, verify_theorem, AppendixLevel, CampaignSpec, VerifyName};
use dyhypes::harness::{congest_audit, metrics_to_csv, run, Algo, RunConfig, Workload};
use dyhypes::state::snapshot_json;
use dyhypes::workset::parse_trace_jsonl;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dyhypes", about = "Self-adjusting hypercubic network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write per-request metrics plus a summary.
    Run {
        /// Algorithm: dyhypes | ss
        #[arg(long, default_value = "dyhypes")]
        algo: String,
        /// Hypercube dimension N (2..=20).
        #[arg(long)]
        dim: u8,
        /// Workload spec: uniform | zipf:<s> | repeating:<k> | adversarial[:<c>]
        #[arg(long, default_value = "uniform")]
        workload: String,
        /// Number of requests.
        #[arg(long)]
        m: usize,
        /// Run seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV output path; the summary JSON lands alongside.
        #[arg(long)]
        out: PathBuf,
        /// Drive the run from a JSONL trace instead of a generator.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Dump plans and audit the synthesized communication schedules.
        #[arg(long)]
        audit: bool,
        /// Run the deep structural audits after every request.
        #[arg(long)]
        deep_checks: bool,
        /// Fixed server node for the single-server algorithm.
        #[arg(long, default_value_t = 0)]
        server: u32,
        /// Export the final per-node state snapshot to this path.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Message width budget for the audit, in O(log n) words.
        #[arg(long, default_value_t = 4)]
        audit_words: u32,
    },
    /// Run a named statistical verification campaign.
    Verify {
        /// routing_thm | ss_thm | ts_lemma | ss_time_lemma | ws_property | msg_complexity
        name: String,
        #[arg(long, value_delimiter = ',')]
        dim: Option<Vec<u8>>,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        slack: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        workloads: Option<Vec<String>>,
        /// Write the report JSON here in addition to printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Output format: md | json | csv
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Print the expectation recurrences for a level near the leaves.
    Appendix {
        /// Offset below the leaf level: 1, 2 or 3 (for N-1, N-2, N-3).
        #[arg(long, default_value_t = 2)]
        level: u8,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Re-render a saved verification report.
    Report {
        /// Path to a report JSON produced by `verify --out`.
        #[arg(long)]
        input: PathBuf,
        /// Output format: json | csv | md
        #[arg(long, default_value = "md")]
        format: String,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode, Box<dyn std::error::Error>> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            algo,
            dim,
            workload,
            m,
            seed,
            out,
            trace,
            audit,
            deep_checks,
            server,
            snapshot,
            audit_words,
        } => {
            let algo: Algo = algo.parse()?;
            let workload = match trace {
                Some(path) => {
                    let text = fs::read_to_string(path)?;
                    Workload::Trace(parse_trace_jsonl(&text)?)
                }
                None => workload.parse::<Workload>()?,
            };
            let mut config = RunConfig::new(dim, algo, workload, m, seed);
            config.deep_checks = deep_checks;
            config.dump_plans = audit;
            config.server = server;
            let result = run(&config)?;
            fs::write(&out, metrics_to_csv(&result.metrics))?;
            let summary_path = out.with_extension("summary.json");
            fs::write(&summary_path, serde_json::to_string_pretty(&result.summary)?)?;
            println!(
                "wrote {} requests to {} (summary: {})",
                result.metrics.len(),
                out.display(),
                summary_path.display()
            );
            if audit {
                let violations = congest_audit(dim, &result.plans, audit_words);
                if violations.is_empty() {
                    println!("audit: no violations across {} plans", result.plans.len());
                } else {
                    for v in &violations {
                        println!(
                            "audit violation at round {}: {} -> {}: {}",
                            v.round, v.from, v.to, v.reason
                        );
                    }
                    return Ok(ExitCode::FAILURE);
                }
            }
            if let Some(path) = snapshot {
                // Runs are deterministic; replaying reproduces the final
                // placement and state exactly.
                let (_, net, states) = dyhypes::harness::run_with_state(&config)?;
                fs::write(&path, snapshot_json(&states, &net)?)?;
                println!("state snapshot: {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { name, dim, seeds, m, slack, workloads, out, format } => {
            let name: VerifyName = name.parse()?;
            let mut spec = CampaignSpec::defaults_for(name);
            if let Some(d) = dim {
                spec.dims = d;
            }
            if let Some(s) = seeds {
                spec.seeds = s;
            }
            if let Some(m) = m {
                spec.m = m;
            }
            if let Some(s) = slack {
                spec.slack = s;
            }
            if let Some(w) = workloads {
                spec.workloads = w;
            }
            let report = verify_theorem(name, &spec)?;
            match format.as_str() {
                "json" => println!("{}", report.to_json()),
                "csv" => print!("{}", report.to_csv()),
                _ => print!("{}", report.to_markdown()),
            }
            if let Some(path) = out {
                fs::write(&path, report.to_json())?;
            }
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Appendix { level, steps } => {
            let table = appendix_recurrence(AppendixLevel::from_offset(level)?, steps);
            println!("t, expectation{}", if table.complementary.is_empty() { "" } else { ", complementary" });
            for (i, s) in table.expectations.iter().enumerate() {
                if let Some(e) = table.complementary.get(i) {
                    println!("t{}, {s:.2}, {e:.2}", table.start_t as usize + i);
                } else {
                    println!("t{}, {s:.2}", table.start_t as usize + i);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { input, format } => {
            let text = fs::read_to_string(input)?;
            let report: dyhypes::analysis::Report = serde_json::from_str(&text)?;
            match format.as_str() {
                "json" => println!("{}", report.to_json()),
                "csv" => print!("{}", report.to_csv()),
                _ => print!("{}", report.to_markdown()),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

