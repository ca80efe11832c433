//! End-to-end benchmark: pretrain, fine-tune references, train adapters per
//! (domain, budget), store them, reload and re-check them, then score.

use std::path::{Path, PathBuf};

use ba2::complexity::{adapter_param_bits, backbone_param_bits, count_flops, relative_flop_from_fractions, relative_params};
use ba2::store::{EntryMeta, ModelRegistry};
use ba2::train::{evaluate, evaluate_backbone, finetune, train_backbone, train_domain, DomainRun};
use ba2::{Architecture, Backbone32, Budget, BudgetSpec, ConstraintMode, DomainAdapter32, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::data::{ingest, DomainData};
use crate::error::BenchError;
use crate::scoring::{baseline_error, domain_score, ScoreTotals};

pub const REGISTRY_DIR: &str = "registry";
pub const TRACE_DIR: &str = "traces";
pub const SWEEP_FILE: &str = "sweep.csv";

/// One (domain, budget) outcome, as written to the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub id: String,
    pub budget: f64,
    pub error: f64,
    pub e_max: f64,
    pub flop_fraction: f64,
    pub param_bits: u64,
    pub compliant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDomain {
    #[serde(flatten)]
    pub result: DomainResult,
    pub alpha: f64,
    /// Zero for non-compliant results, which never count towards the total.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub domains: Vec<ScoredDomain>,
    pub totals: ScoreTotals,
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Scores `results`; only compliant rows contribute to `S`.
pub fn score_results(results: Vec<DomainResult>, rel_flop: f64, rel_params: f64) -> Result<ScoreReport, BenchError> {
    let mut domains = Vec::with_capacity(results.len());
    let mut total = 0.0;
    for (i, r) in results.into_iter().enumerate() {
        let s = domain_score(i, r.error, r.e_max)?;
        let score = if r.compliant { s.partial } else { 0.0 };
        total += score;
        domains.push(ScoredDomain { result: r, alpha: s.alpha, score });
    }
    Ok(ScoreReport { domains, totals: ScoreTotals::new(total, rel_flop, rel_params)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub domain: String,
    pub budget: f64,
    pub error: f64,
    pub accuracy: f64,
    /// Accuracy lost against the same domain at budget 1, in points; empty without that run.
    pub accuracy_drop: Option<f64>,
    pub flop_fraction: f64,
    pub theta_bar_max: f64,
    pub compliant: bool,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| BenchError::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub reports: Vec<(Budget, ScoreReport)>,
    pub sweep: Vec<SweepRow>,
    pub output: PathBuf,
}

pub fn results_file_name(budget: Budget) -> String {
    format!("results_b{budget}.json")
}

pub fn trace_file_name(domain: &str, budget: Budget) -> String {
    format!("{domain}_b{budget}.csv")
}

pub fn write(path: &Path, contents: &[u8]) -> Result<(), BenchError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    }
    ba2::store::write_atomic(path, contents).map_err(ba2::Error::from)?;
    Ok(())
}

pub fn load_domains(cfg: &BenchConfig, arch: &Architecture) -> Result<Vec<DomainData>, BenchError> {
    let c = arch.config();
    cfg.domains
        .iter()
        .map(|spec| {
            tracing::info!(domain = %spec.name, "ingesting");
            Ok(ingest(spec, &cfg.data_dir, c.height, c.width, c.in_channels)?)
        })
        .collect()
}

pub fn budget_spec(arch: &Architecture, budget: Budget, mode: ConstraintMode, lambda_lr: f64) -> Result<BudgetSpec, BenchError> {
    Ok(BudgetSpec::new(budget, mode, arch.num_convs(), lambda_lr)?)
}

/// Trains one adapter and records it; returns the run and where its trace went.
pub fn train_and_register(
    registry: &mut ModelRegistry,
    data: &DomainData,
    spec: BudgetSpec,
    cfg: &TrainConfig,
    output: &Path,
) -> Result<DomainRun<f32>, BenchError> {
    let budget = spec.beta;
    tracing::info!(domain = %data.name, %budget, "training adapter");
    let backbone = registry.backbone().clone();
    let run = train_domain(&backbone, &data.name, &data.train, spec, cfg)?;
    let meta = EntryMeta { seed: cfg.seed, config_hash: cfg.hash_hex(), compliant: run.compliant };
    registry.register(&run.adapter, meta)?;
    let trace = output.join(TRACE_DIR).join(trace_file_name(&data.name, budget));
    write(&trace, run.trace.to_csv().as_bytes())?;
    Ok(run)
}

/// Mean-switch values of a stored adapter per constraint scope, and whether they satisfy its budget.
pub fn recheck(adapter: &DomainAdapter32, mode: ConstraintMode) -> (Vec<f64>, bool) {
    let spec = BudgetSpec::new(adapter.budget, mode, adapter.switches.len(), 1.0).expect("scope count matches");
    let gates = adapter.gates();
    (spec.theta_bar(&gates), spec.satisfied(&gates))
}

/// Reloads every adapter from `registry`, checks the stored compliance flag
/// against its switches, evaluates it, and scores each budget.
pub fn collect_reports(
    cfg: &BenchConfig,
    registry: &ModelRegistry,
    domains: &[DomainData],
    budgets: &[Budget],
) -> Result<(Vec<(Budget, ScoreReport)>, Vec<SweepRow>), BenchError> {
    let backbone = registry.backbone();
    let arch = backbone.arch();
    let base_flops = count_flops(arch, None)?.total_flops as f64;
    let adapter_bits = adapter_param_bits(arch);
    let e_max = |name: &str| {
        registry
            .manifest()
            .baseline_errors
            .get(name)
            .copied()
            .ok_or_else(|| BenchError::Config(format!("no baseline error recorded for {name:?}")))
    };
    let pretrain = &domains[0];
    let pretrain_error = evaluate_backbone(backbone, &pretrain.test)?;

    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut full_accuracy = std::collections::BTreeMap::new();
    for &budget in budgets {
        let mut results = vec![DomainResult {
            id: pretrain.name.clone(),
            budget: budget.value(),
            error: pretrain_error,
            e_max: e_max(&pretrain.name)?,
            flop_fraction: 1.0,
            param_bits: 0,
            compliant: true,
        }];
        let mut fractions = Vec::new();
        for data in &domains[1..] {
            let entry = registry.entry(&data.name, budget)?;
            let adapter = registry.load_adapter(&data.name, budget)?;
            let (theta_bar, compliant) = recheck(&adapter, cfg.mode);
            if compliant != entry.compliant {
                return Err(BenchError::ComplianceMismatch {
                    domain: data.name.clone(),
                    budget: budget.to_string(),
                    stored: entry.compliant,
                    recomputed: compliant,
                });
            }
            let error = evaluate(backbone, &adapter, &data.test)?;
            let flop_fraction = count_flops(arch, Some(&adapter.gates()))?.total_flops as f64 / base_flops;
            fractions.push(flop_fraction);
            let accuracy = 1.0 - error;
            if budget == Budget::FULL {
                full_accuracy.insert(data.name.clone(), accuracy);
            }
            rows.push(SweepRow {
                domain: data.name.clone(),
                budget: budget.value(),
                error,
                accuracy,
                accuracy_drop: None,
                flop_fraction,
                theta_bar_max: theta_bar.iter().copied().fold(0.0, f64::max),
                compliant,
            });
            results.push(DomainResult {
                id: data.name.clone(),
                budget: budget.value(),
                error,
                e_max: e_max(&data.name)?,
                flop_fraction,
                param_bits: adapter_bits,
                compliant,
            });
        }
        let rel_flop = relative_flop_from_fractions(&fractions);
        let rel_params = relative_params(backbone_param_bits(arch), &vec![adapter_bits; fractions.len()]);
        reports.push((budget, score_results(results, rel_flop, rel_params)?));
    }
    for r in &mut rows {
        r.accuracy_drop = full_accuracy.get(&r.domain).map(|full| 100.0 * (full - r.accuracy));
    }
    Ok((reports, rows))
}

/// Pretrains the backbone on the first domain, returning it with its test error.
pub fn pretrain(cfg: &BenchConfig, domains: &[DomainData]) -> Result<(Backbone32, f64), BenchError> {
    let arch = cfg.architecture()?;
    tracing::info!(domain = %domains[0].name, "pretraining backbone");
    let backbone: Backbone32 = train_backbone(arch, &domains[0].train, &cfg.pretrain_config())?;
    let error = evaluate_backbone(&backbone, &domains[0].test)?;
    Ok((backbone, error))
}

/// Fine-tunes a reference model per adapted domain and records doubled
/// errors; the pretraining domain's reference is the backbone itself.
pub fn record_baselines(
    cfg: &BenchConfig,
    registry: &mut ModelRegistry,
    domains: &[DomainData],
    pretrain_error: f64,
) -> Result<(), BenchError> {
    registry.set_baseline_error(&domains[0].name, baseline_error(pretrain_error))?;
    let train = cfg.train_config();
    for data in &domains[1..] {
        tracing::info!(domain = %data.name, "fine-tuning reference model");
        let backbone = registry.backbone().clone();
        let tuned = finetune(&backbone, &data.train, &train)?;
        let error = evaluate_backbone(&tuned, &data.test)?;
        registry.set_baseline_error(&data.name, baseline_error(error))?;
    }
    Ok(())
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchmarkRun, BenchError> {
    cfg.validate()?;
    let arch = cfg.architecture()?;
    let budgets = cfg.budget_list()?;
    let domains = load_domains(cfg, &arch)?;
    let (backbone, pretrain_error) = pretrain(cfg, &domains)?;
    let out = cfg.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| BenchError::io(&out, e))?;
    let mut registry = ModelRegistry::create(&out.join(REGISTRY_DIR), backbone)?;
    record_baselines(cfg, &mut registry, &domains, pretrain_error)?;

    let train = cfg.train_config();
    for data in &domains[1..] {
        for &budget in &budgets {
            let spec = budget_spec(&arch, budget, cfg.mode, cfg.lambda_lr)?;
            train_and_register(&mut registry, data, spec, &train, &out)?;
        }
    }

    let registry = ModelRegistry::open(&out.join(REGISTRY_DIR))?;
    let (reports, sweep) = collect_reports(cfg, &registry, &domains, &budgets)?;
    for (budget, report) in &reports {
        write(&out.join(results_file_name(*budget)), report.to_json().as_bytes())?;
    }
    write(&out.join(SWEEP_FILE), sweep_csv(&sweep)?.as_bytes())?;
    Ok(BenchmarkRun { reports, sweep, output: out })
}
