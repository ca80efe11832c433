//! The `ba2` command line.

use std::ffi::OsString;
use std::path::PathBuf;

use ba2::complexity::count_flops;
use ba2::store::{save_adapter, ModelRegistry};
use ba2::train::{evaluate, evaluate_backbone, train_multi_budget_joint};
use ba2::{Budget, ConstraintMode, DomainAdapter32};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::config::{parse_budgets, BenchConfig};
use crate::data::{ingest, DomainData};
use crate::error::{BenchError, EXIT_OK, EXIT_USAGE};
use crate::runner::{self, DomainResult, REGISTRY_DIR};
use crate::scoring::ScoreTotals;

#[derive(Debug, Parser)]
#[command(name = "ba2", about = "Budget-aware adapters: training, storage and scoring on a desk-scale benchmark")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Benchmark configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Registry directory; defaults to `<output>/registry`.
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lambda_lr: Option<f64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Global,
    PerLayer,
}

impl From<Mode> for ConstraintMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Global => ConstraintMode::Global,
            Mode::PerLayer => ConstraintMode::PerLayer,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the backbone on the first domain and record reference errors.
    TrainBackbone,
    /// Train one adapter; exits with the compliance code if it misses its budget.
    TrainDomain {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        budget: f64,
    },
    /// Train kernels jointly with one adapter per budget into a separate registry.
    TrainJoint {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        budgets: String,
    },
    /// Test error of a stored adapter, or of the backbone on the first domain.
    Eval {
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 1.0)]
        budget: f64,
    },
    /// Score a results file.
    Score {
        #[arg(long)]
        results: PathBuf,
    },
    /// Complexity of the backbone or of a stored adapter.
    Inspect {
        #[arg(long, requires = "budget")]
        domain: Option<String>,
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Export a stored adapter to a standalone file.
    Pack {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        budget: f64,
        #[arg(long)]
        to: PathBuf,
    },
    /// Re-hash every stored adapter and re-check its compliance flag.
    Verify,
    /// Full benchmark over a budget grid, e.g. `0.1..1.0`.
    Sweep {
        #[arg(long, default_value = "0.1..1.0")]
        budgets: String,
    },
    /// Full benchmark over the configured budgets.
    RunBenchmark {
        #[arg(long)]
        budgets: Option<String>,
    },
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), BenchError> {
    let g = &cli.global;
    match cli.command {
        Command::TrainBackbone => {
            let cfg = load_config(g)?;
            let domains = runner::load_domains(&cfg, &cfg.architecture()?)?;
            let (backbone, error) = runner::pretrain(&cfg, &domains)?;
            let mut registry = ModelRegistry::create(&registry_dir(g, Some(&cfg)), backbone)?;
            runner::record_baselines(&cfg, &mut registry, &domains, error)?;
            println!("backbone test error on {}: {error:.4}", domains[0].name);
            for (name, e_max) in &registry.manifest().baseline_errors {
                println!("e_max {name} {e_max:.4}");
            }
        }
        Command::TrainDomain { domain, budget } => {
            let cfg = load_config(g)?;
            let data = load_domain(&cfg, &domain)?;
            let mut registry = ModelRegistry::open(&registry_dir(g, Some(&cfg)))?;
            let budget = parse_budget(budget)?;
            let spec = runner::budget_spec(registry.backbone().arch(), budget, cfg.mode, cfg.lambda_lr)?;
            let run = runner::train_and_register(&mut registry, &data, spec, &cfg.train_config(), &cfg.output)?;
            report_run(&domain, budget, &run.adapter, cfg.mode)?;
        }
        Command::TrainJoint { domain, budgets } => {
            let cfg = load_config(g)?;
            let data = load_domain(&cfg, &domain)?;
            let registry = ModelRegistry::open(&registry_dir(g, Some(&cfg)))?;
            let arch = registry.backbone().arch().clone();
            let specs = budget_values(&budgets)?
                .into_iter()
                .map(|b| runner::budget_spec(&arch, b, cfg.mode, cfg.lambda_lr))
                .collect::<Result<Vec<_>, _>>()?;
            let train = cfg.train_config();
            let joint = train_multi_budget_joint(registry.backbone(), &data.name, &data.train, specs, &train)?;
            let backbone = std::sync::Arc::try_unwrap(joint.backbone).unwrap_or_else(|a| (*a).clone());
            let mut out = ModelRegistry::create(&cfg.output.join(format!("joint-{domain}")), backbone)?;
            let mut failed = None;
            for run in &joint.runs {
                let meta = ba2::store::EntryMeta { seed: train.seed, config_hash: train.hash_hex(), compliant: run.compliant };
                out.register(&run.adapter, meta)?;
                let error = evaluate(out.backbone(), &run.adapter, &data.test)?;
                println!("budget {} test error {error:.4}", run.spec.beta);
                if let Err(e) = report_run(&domain, run.spec.beta, &run.adapter, cfg.mode) {
                    failed.get_or_insert(e);
                }
            }
            if let Some(e) = failed {
                return Err(e);
            }
        }
        Command::Eval { domain, budget } => {
            let cfg = load_config(g)?;
            let (index, _) = cfg.domain(&domain)?;
            let data = load_domain(&cfg, &domain)?;
            let registry = ModelRegistry::open(&registry_dir(g, Some(&cfg)))?;
            if index == 0 {
                let error = evaluate_backbone(registry.backbone(), &data.test)?;
                println!("{domain} backbone test error {error:.4}");
            } else {
                let budget = parse_budget(budget)?;
                let adapter = registry.load_adapter(&domain, budget)?;
                check_stored_flag(&registry, &adapter, cfg.mode)?;
                let error = evaluate(registry.backbone(), &adapter, &data.test)?;
                println!("{domain} budget {budget} test error {error:.4}");
            }
        }
        Command::Score { results } => {
            let text = std::fs::read_to_string(&results).map_err(|e| BenchError::io(&results, e))?;
            let totals = score_file(&text)?;
            println!("S {:.0}", totals.score);
            println!("S_O {:.0}", totals.score_per_op);
            println!("S_P {:.0}", totals.score_per_param);
        }
        Command::Inspect { domain, budget, json } => {
            let registry = ModelRegistry::open(&registry_dir(g, optional_config(g)?.as_ref()))?;
            let arch = registry.backbone().arch();
            let report = match (domain, budget) {
                (Some(d), Some(b)) => {
                    let adapter = registry.load_adapter(&d, parse_budget(b)?)?;
                    count_flops(arch, Some(&adapter.gates()))?
                }
                _ => count_flops(arch, None)?,
            };
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Pack { domain, budget, to } => {
            let registry = ModelRegistry::open(&registry_dir(g, optional_config(g)?.as_ref()))?;
            let adapter = registry.load_adapter(&domain, parse_budget(budget)?)?;
            save_adapter(&to, &adapter, registry.backbone().arch())?;
            let size = std::fs::metadata(&to).map_err(|e| BenchError::io(&to, e))?.len();
            println!("{} ({size} bytes)", to.display());
        }
        Command::Verify => {
            let cfg = optional_config(g)?;
            let mode = g.mode.map(Into::into).or(cfg.as_ref().map(|c| c.mode)).unwrap_or_default();
            let registry = ModelRegistry::open(&registry_dir(g, cfg.as_ref()))?;
            let mut bad = 0;
            for outcome in registry.verify() {
                match &outcome.problem {
                    None => println!("ok   {} b{}", outcome.domain, outcome.budget),
                    Some(p) => {
                        bad += 1;
                        println!("FAIL {} b{}: {p}", outcome.domain, outcome.budget);
                    }
                }
            }
            if bad > 0 {
                return Err(ba2::Error::from(ba2::StoreError::Malformed(format!("{bad} stored adapter(s) failed verification"))).into());
            }
            for entry in registry.list() {
                let adapter = registry.load_adapter(&entry.domain, entry.budget)?;
                check_stored_flag(&registry, &adapter, mode)?;
            }
        }
        Command::Sweep { budgets } => benchmark(g, Some(budgets))?,
        Command::RunBenchmark { budgets } => benchmark(g, budgets)?,
    }
    Ok(())
}

fn benchmark(g: &Global, budgets: Option<String>) -> Result<(), BenchError> {
    let mut cfg = load_config(g)?;
    if let Some(b) = budgets {
        cfg.budgets = parse_budgets(&b)?;
    }
    let run = runner::run_benchmark(&cfg)?;
    for (budget, report) in &run.reports {
        let t = &report.totals;
        println!(
            "budget {budget}: S {:.1} rel_flop {:.4} rel_params {:.4} S_O {:.1} S_P {:.1}",
            t.score, t.rel_flop, t.rel_params, t.score_per_op, t.score_per_param
        );
    }
    println!("{}", run.output.join(runner::SWEEP_FILE).display());
    Ok(())
}

fn optional_config(g: &Global) -> Result<Option<BenchConfig>, BenchError> {
    g.config.as_ref().map(|_| load_config(g)).transpose()
}

fn load_config(g: &Global) -> Result<BenchConfig, BenchError> {
    let path = g.config.as_ref().ok_or_else(|| BenchError::Config("--config is required for this command".into()))?;
    let mut cfg = BenchConfig::load(path)?;
    if let Some(o) = &g.output {
        cfg.output = o.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(e) = g.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = g.lambda_lr {
        cfg.lambda_lr = l;
    }
    if let Some(m) = g.mode {
        cfg.mode = m.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn registry_dir(g: &Global, cfg: Option<&BenchConfig>) -> PathBuf {
    if let Some(r) = &g.registry {
        return r.clone();
    }
    let out = g.output.clone().or_else(|| cfg.map(|c| c.output.clone())).unwrap_or_else(|| PathBuf::from("ba2-out"));
    out.join(REGISTRY_DIR)
}

fn load_domain(cfg: &BenchConfig, name: &str) -> Result<DomainData, BenchError> {
    let (_, spec) = cfg.domain(name)?;
    let c = cfg.arch.clone();
    Ok(ingest(spec, &cfg.data_dir, c.height, c.width, c.in_channels)?)
}

fn parse_budget(b: f64) -> Result<Budget, BenchError> {
    Budget::new(b).map_err(|e| BenchError::Config(e.to_string()))
}

fn budget_values(text: &str) -> Result<Vec<Budget>, BenchError> {
    parse_budgets(text)?.into_iter().map(parse_budget).collect()
}

fn report_run(domain: &str, budget: Budget, adapter: &DomainAdapter32, mode: ConstraintMode) -> Result<(), BenchError> {
    let (theta_bar, compliant) = runner::recheck(adapter, mode);
    let shown: Vec<String> = theta_bar.iter().map(|t| format!("{t:.3}")).collect();
    println!("{domain} budget {budget} theta_bar [{}] compliant {compliant}", shown.join(", "));
    if compliant {
        Ok(())
    } else {
        Err(BenchError::NonCompliant { domain: domain.to_string(), budget: budget.to_string(), theta_bar })
    }
}

fn check_stored_flag(registry: &ModelRegistry, adapter: &DomainAdapter32, mode: ConstraintMode) -> Result<(), BenchError> {
    let entry = registry.entry(&adapter.domain, adapter.budget)?;
    let (_, compliant) = runner::recheck(adapter, mode);
    if compliant != entry.compliant {
        return Err(BenchError::ComplianceMismatch {
            domain: adapter.domain.clone(),
            budget: adapter.budget.to_string(),
            stored: entry.compliant,
            recomputed: compliant,
        });
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ResultsFile {
    #[serde(default)]
    domains: Vec<DomainResult>,
    totals: PartialTotals,
}

#[derive(Debug, Deserialize)]
struct PartialTotals {
    #[serde(rename = "S")]
    score: Option<f64>,
    rel_flop: f64,
    rel_params: f64,
}

/// Totals for a results file; `S` is recomputed from the domains when any are listed.
pub fn score_file(text: &str) -> Result<ScoreTotals, BenchError> {
    let file: ResultsFile = serde_json::from_str(text).map_err(|e| BenchError::Config(format!("results file: {e}")))?;
    let t = file.totals;
    if file.domains.is_empty() {
        let score = t.score.ok_or_else(|| BenchError::Config("results file has neither domains nor totals.S".into()))?;
        return Ok(ScoreTotals::new(score, t.rel_flop, t.rel_params)?);
    }
    Ok(runner::score_results(file.domains, t.rel_flop, t.rel_params)?.totals)
}
