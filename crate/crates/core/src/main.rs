use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use bonuslab::config::{parse_config, InstanceSource, NeedleParams, RunConfig};
use bonuslab::tabular::Instance;
use bonuslab::trainer::{
    kappa_sweep, policy_entropy, run_experiment, win_rate_exact, RunRecord, INSTANCE_FILE,
    SUMMARY_FILE, VERSION,
};
use bonuslab::verify::{run_suite, stream_rng, AuditReport, Suite};

/// Tabular laboratory for exploratory bonuses in preference optimization.
#[derive(Parser)]
#[command(name = "bonuslab", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the iterative loop and write metrics.
    Run(Common),
    /// One run per target bonus ratio, each in its own subdirectory.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated target ratios.
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
    },
    /// Run numerical audits and write audit_report.json.
    Verify {
        /// all, optimism, collapse, equivalence, gradients or divergence.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "verify-out")]
        out: PathBuf,
    },
    /// Generate a needle instance and write it as JSON.
    GenInstance {
        /// Optional configuration whose needle parameters are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "instance-out")]
        out: PathBuf,
    },
    /// Print a summary of an instance file or a run directory.
    Inspect {
        /// Instance JSON or run output directory.
        path: PathBuf,
    },
}

/// Exit status for configuration errors.
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| {
                c.downcast_ref::<bonuslab::error::Error>()
                    .is_some_and(|e| e.is_config())
            });
            if config_error {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

/// `Ok(false)` means the command ran but something it checks failed.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Run(common) => {
            let config = load(&common, "run")?;
            let record = run_experiment(&config)?;
            report_run(&record);
            Ok(true)
        }
        Command::Sweep { common, ratios } => {
            let config = load(&common, "sweep")?;
            let mut ok = true;
            for (ratio, result) in kappa_sweep(&config, &ratios)? {
                match result {
                    Ok(record) => {
                        let m = record.final_metrics();
                        println!(
                            "ratio {ratio:e}: kappa {:e}, final win rate {:.4}",
                            record.kappa,
                            m.map_or(f64::NAN, |m| m.win_rate)
                        );
                    }
                    Err(e) => {
                        ok = false;
                        eprintln!("ratio {ratio:e}: {e}");
                    }
                }
            }
            Ok(ok)
        }
        Command::Verify { suite, seed, out } => {
            let suite: Suite = suite.parse()?;
            let reports = run_suite(suite, seed)?;
            let pass = reports.iter().all(|r| r.pass);
            for r in &reports {
                println!(
                    "{} {} (worst {:.3e})",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.claim,
                    r.worst
                );
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let doc = AuditDoc {
                version: VERSION,
                suite,
                seed,
                pass,
                reports: &reports,
            };
            let path = out.join("audit_report.json");
            fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            info!("wrote {}", path.display());
            Ok(pass)
        }
        Command::GenInstance { config, seed, out } => {
            let (params, cfg_seed) = match config {
                Some(path) => {
                    let c = parse_config(&path)?;
                    match c.instance {
                        InstanceSource::Needle(p) => (p, c.seed),
                        InstanceSource::File { .. } => bail!(bonuslab::error::Error::Config(
                            "gen-instance needs a needle instance section, not a file".into()
                        )),
                    }
                }
                None => (NeedleParams::default(), 0),
            };
            let instance = params.generate(&mut stream_rng(seed.unwrap_or(cfg_seed), 0))?;
            fs::create_dir_all(&out)?;
            let path = out.join(INSTANCE_FILE);
            instance.save(&path)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Inspect { path } => {
            inspect(&path)?;
            Ok(true)
        }
    }
}

#[derive(Serialize)]
struct AuditDoc<'a> {
    version: &'a str,
    suite: Suite,
    seed: u64,
    pass: bool,
    reports: &'a [AuditReport],
}

fn load(common: &Common, default_out: &str) -> Result<RunConfig> {
    let mut config = parse_config(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.output_dir = Some(
        common
            .out
            .clone()
            .or(config.output_dir.take())
            .unwrap_or_else(|| PathBuf::from(default_out)),
    );
    Ok(config)
}

fn report_run(record: &RunRecord) {
    for m in &record.iterations {
        println!(
            "iteration {}: total loss {:.6}, win rate {:.4}, avg reward {:.4}, low-ref mass {:.4}, entropy {:.4}",
            m.iteration, m.loss.total, m.win_rate, m.avg_reward, m.low_ref_mass, m.entropy
        );
    }
    if let Some(dir) = &record.config.output_dir {
        println!("outputs in {}", dir.display());
    }
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        let summary = path.join(SUMMARY_FILE);
        let text = fs::read_to_string(&summary)
            .with_context(|| format!("reading {}", summary.display()))?;
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        println!("run in {}", path.display());
        for key in [
            "status",
            "version",
            "seed",
            "kappa",
            "iterations_completed",
            "low_ref_histogram_mass",
        ] {
            println!("  {key}: {}", doc[key]);
        }
        if let Some(f) = doc.get("final").filter(|f| !f.is_null()) {
            for key in ["win_rate", "avg_reward", "low_ref_mass", "entropy"] {
                println!("  final {key}: {}", f[key]);
            }
        }
        let instance = path.join(INSTANCE_FILE);
        if instance.exists() {
            print_instance(&Instance::load(&instance)?);
        }
    } else {
        print_instance(&Instance::load(path)?);
    }
    Ok(())
}

fn print_instance(instance: &Instance) {
    let (n, m) = (instance.n_prompts(), instance.n_responses());
    println!("instance: {n} prompts x {m} responses");
    if let Some(needle) = instance.needle() {
        println!("  needle responses: {needle:?}");
    }
    let reference = instance.reference();
    println!(
        "  reference entropy: {:.4}",
        policy_entropy(&reference, instance)
    );
    for x in 0..n {
        let q = instance.ref_policy().row(x);
        let r = instance.true_reward().row(x);
        let best = (0..m).fold(0, |b, y| if r[y] > r[b] { y } else { b });
        println!(
            "  prompt {x}: weight {:.4}, min pi_ref {:.4}, best response {best} (reward {:.4}, pi_ref {:.4})",
            instance.prompt_weights()[x],
            q.fold(f64::INFINITY, |a, v| a.min(*v)),
            r[best],
            q[best]
        );
    }
    println!(
        "  win rate of pi_ref against itself: {:.4}",
        win_rate_exact(&reference, instance)
    );
}
