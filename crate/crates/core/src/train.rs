//! Training loops: backbone pretraining, full fine-tuning, budget-constrained
//! adapter training over a frozen backbone, and joint multi-budget training
//! with shared kernels.
//!
//! Kernels and classifier heads are updated with SGD + momentum; switches and
//! batch-norm affine parameters with Adam. The budget multipliers take one
//! projected ascent step per optimization step, using the switch means seen
//! by that step's forward pass.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::Architecture;
use crate::budget::{budget_penalty, lambda_step, BudgetSpec, ConstraintMode};
use crate::error::{Error, Result};
use crate::model::{adapter_forward, forward_branch, register_kernels, Backbone, BnParams, DomainAdapter, Head, Trainable};
use crate::ops::{BnConfig, Mode};
use crate::optim::{Adam, AdamConfig, LrSchedule, Sgd, SgdConfig};
use crate::scalar::Scalar;
use crate::switch::SwitchVector;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Kernel, Shape4, Tensor};

/// Labeled images, NHWC, stored as `f32` and cast per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().n() != labels.len() {
            return Err(Error::Shape(format!("{} images, {} labels", images.shape().n(), labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_batch(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        }
    }

    fn check_input(&self, arch: &Architecture) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (s, cfg) = (self.images.shape(), arch.config());
        if (s.h(), s.w(), s.c()) != (cfg.height, cfg.width, cfg.in_channels) {
            return Err(Error::Architecture(format!(
                "images are {}x{}x{}, network expects {}x{}x{}",
                s.h(),
                s.w(),
                s.c(),
                cfg.height,
                cfg.width,
                cfg.in_channels
            )));
        }
        Ok(())
    }
}

/// Mirrors an NHWC batch along the width axis, sample by sample.
pub fn mirror_sample<T: Scalar>(images: &mut Tensor<T>, sample: usize) {
    let s = images.shape();
    let (h, w, c) = (s.h(), s.w(), s.c());
    let base = sample * h * w * c;
    let data = images.data_mut();
    for r in 0..h {
        for q in 0..w / 2 {
            for ch in 0..c {
                data.swap(base + (r * w + q) * c + ch, base + (r * w + (w - 1 - q)) * c + ch);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Kernels (when trainable) and classifier heads.
    pub classifier: SgdConfig,
    /// Switches and batch-norm affine parameters.
    pub adapter: AdamConfig,
    pub schedule: LrSchedule,
    /// Horizontal mirroring with probability 1/2.
    pub mirror: bool,
    pub seed: u64,
    /// Extra epochs, at one further learning-rate drop, run only while some
    /// budget is still violated; training stops at the first compliant step.
    pub settle_epochs: usize,
    /// Recompute running batch-norm statistics over one pass of the training
    /// data once the parameters are final.
    pub refresh_bn_stats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            classifier: SgdConfig::default(),
            adapter: AdamConfig::default(),
            schedule: LrSchedule { decay_epochs: vec![45], factor: 0.1 },
            mirror: true,
            seed: 0,
            settle_epochs: 0,
            refresh_bn_stats: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be positive".into()));
        }
        self.classifier.validate()?;
        self.adapter.validate()?;
        self.schedule.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// One optimization step of a budget-constrained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// One value per constraint scope.
    pub theta_bar: Vec<f64>,
    /// Multipliers after this step's ascent.
    pub lambdas: Vec<f64>,
    /// Cross-entropy of the step's batch.
    pub loss: f64,
}

/// Append-only per-step log of switch means and multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTrace {
    pub mode: ConstraintMode,
    records: Vec<TraceRecord>,
}

impl ConstraintTrace {
    pub fn new(mode: ConstraintMode) -> Self {
        ConstraintTrace { mode, records: Vec::new() }
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn lambdas_all_zero(&self) -> bool {
        self.records.iter().all(|r| r.lambdas.iter().all(|&l| l == 0.0))
    }

    /// Columns `step,layer,theta_bar,lambda,loss`; one row per step and scope.
    /// Global mode writes `all` in the layer column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,theta_bar,lambda,loss\n");
        for r in &self.records {
            for (scope, (t, l)) in r.theta_bar.iter().zip(&r.lambdas).enumerate() {
                let layer = match self.mode {
                    ConstraintMode::Global => "all".to_string(),
                    ConstraintMode::PerLayer => scope.to_string(),
                };
                let _ = writeln!(out, "{},{layer},{t},{l},{}", r.step, r.loss);
            }
        }
        out
    }
}

/// Every constraint scope satisfies `θ̄ ≤ β` on the binarized switches.
pub fn is_compliant<T: Scalar>(adapter: &DomainAdapter<T>, mode: ConstraintMode) -> bool {
    let gates = adapter.gates();
    let beta = adapter.budget.value();
    match mode {
        ConstraintMode::PerLayer => gates.iter().all(|g| mean(g) <= beta),
        ConstraintMode::Global => {
            let total: usize = gates.iter().map(|g| g.len()).sum();
            let on: usize = gates.iter().map(|g| g.iter().filter(|&&b| b).count()).sum();
            on as f64 / total.max(1) as f64 <= beta
        }
    }
}

fn mean(g: &[bool]) -> f64 {
    g.iter().filter(|&&b| b).count() as f64 / g.len().max(1) as f64
}

/// Parameters of one branch trained in a step: an adapter or the backbone's own BN and head.
struct Member<T> {
    switches: Option<Vec<SwitchVector<T>>>,
    bn: Vec<BnParams<T>>,
    head: Head<T>,
    budget: Option<BudgetSpec>,
    trace: Option<ConstraintTrace>,
    head_opt: Sgd<T>,
    adam: Adam<T>,
}

impl<T: Scalar> Member<T> {
    fn new(
        switches: Option<Vec<SwitchVector<T>>>,
        bn: Vec<BnParams<T>>,
        head: Head<T>,
        budget: Option<BudgetSpec>,
        cfg: &TrainConfig,
    ) -> Self {
        let trace = budget.as_ref().map(|b| ConstraintTrace::new(b.mode));
        Member {
            switches,
            bn,
            head,
            budget,
            trace,
            head_opt: Sgd::new(cfg.classifier),
            adam: Adam::new(cfg.adapter),
        }
    }

    fn compliant(&self) -> bool {
        match (&self.budget, &self.switches) {
            (Some(spec), Some(sw)) => spec.satisfied(&sw.iter().map(|s| s.gate()).collect::<Vec<_>>()),
            _ => true,
        }
    }
}

/// Adds the multiplier-weighted switch means for one member:
/// `Σ_scope λ·(θ̄ − β)` as tape terms plus the constant offset.
fn penalty_terms<T: Scalar>(
    tape: &mut Tape<T>,
    switch_nodes: &[NodeId],
    sizes: &[usize],
    spec: &BudgetSpec,
) -> Result<(Vec<(NodeId, T)>, f64)> {
    let beta = spec.beta.value();
    let mut terms = Vec::new();
    let mut offset = 0.0;
    match spec.mode {
        ConstraintMode::PerLayer => {
            for (&node, &lambda) in switch_nodes.iter().zip(spec.lambdas()) {
                terms.push((tape.binarized_mean(node)?, T::of(lambda)));
                offset -= lambda * beta;
            }
        }
        ConstraintMode::Global => {
            let lambda = spec.lambdas()[0];
            let total: usize = sizes.iter().sum();
            for (&node, &c) in switch_nodes.iter().zip(sizes) {
                terms.push((tape.binarized_mean(node)?, T::of(lambda * c as f64 / total as f64)));
            }
            offset -= lambda * beta;
        }
    }
    Ok((terms, offset))
}

fn check_budget(spec: &BudgetSpec, layers: usize) -> Result<()> {
    if spec.beta.value() <= 0.0 {
        return Err(Error::Budget("a budget of 0 admits no network; use a positive budget".into()));
    }
    let scopes = match spec.mode {
        ConstraintMode::Global => 1,
        ConstraintMode::PerLayer => layers,
    };
    if spec.lambdas().len() != scopes {
        return Err(Error::Budget(format!("{} multipliers for {scopes} constraint scopes", spec.lambdas().len())));
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs over `data`, updating every member and, if
/// `kernel_opt` is set, the shared kernels.
fn fit<T: Scalar>(
    arch: &Architecture,
    kernels: &mut [Kernel<T>],
    mut kernel_opt: Option<&mut Sgd<T>>,
    members: &mut [Member<T>],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    data.check_input(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let sizes: Vec<usize> = arch.convs().iter().map(|c| c.c_in).collect();
    let layers = arch.num_convs();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs + cfg.settle_epochs {
        let settling = epoch >= cfg.epochs;
        let scale = if settling { cfg.schedule.scale(epoch) * cfg.schedule.factor } else { cfg.schedule.scale(epoch) };
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            if settling && members.iter().all(Member::compliant) {
                break 'epochs;
            }
            let mut images = data.images.gather_batch(rows);
            if cfg.mirror {
                for i in 0..rows.len() {
                    if rng.random_bool(0.5) {
                        mirror_sample(&mut images, i);
                    }
                }
            }
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();

            let mut tape = Tape::new();
            let x = tape.constant(images.cast());
            let kernel_nodes = register_kernels(&mut tape, kernels, kernel_opt.is_some());
            let mut objective = Vec::with_capacity(members.len());
            let mut branches = Vec::with_capacity(members.len());
            let mut forward_info = Vec::with_capacity(members.len());
            for m in members.iter_mut() {
                let trainable = Trainable { kernels: kernel_opt.is_some(), switches: m.switches.is_some(), bn: true, head: true };
                let branch = forward_branch(
                    &mut tape,
                    arch,
                    &kernel_nodes,
                    m.switches.as_deref(),
                    &mut m.bn,
                    &m.head,
                    x,
                    Mode::Train,
                    trainable,
                    BnConfig::default(),
                )?;
                let ce = tape.softmax_cross_entropy(branch.logits, &labels)?;
                let mut terms = vec![(ce, T::one())];
                let mut offset = 0.0;
                let mut violations = Vec::new();
                if let (Some(spec), Some(sw)) = (&m.budget, &m.switches) {
                    let gates: Vec<&[bool]> = sw.iter().map(|s| s.gate()).collect();
                    violations = budget_penalty(&gates, spec).1;
                    let (pen, off) = penalty_terms(&mut tape, &branch.switches, &sizes, spec)?;
                    terms.extend(pen);
                    offset = off;
                }
                objective.push(tape.affine(&terms, T::of(offset))?);
                forward_info.push((ce, violations));
                branches.push(branch);
            }
            let total_terms: Vec<(NodeId, T)> = objective.iter().map(|&o| (o, T::one())).collect();
            let total = tape.affine(&total_terms, T::zero())?;
            tape.backward(total)?;

            if let Some(opt) = kernel_opt.as_deref_mut() {
                for (l, (k, &node)) in kernels.iter_mut().zip(&kernel_nodes).enumerate() {
                    let g = tape.take_grad(node)?;
                    opt.step(l, k.tensor_mut().data_mut(), g.data(), scale);
                }
            }
            for (m, (branch, (ce, violations))) in members.iter_mut().zip(branches.iter().zip(forward_info)) {
                let gw = tape.take_grad(branch.head_weight)?;
                m.head_opt.step(0, m.head.weight.data_mut(), gw.data(), scale);
                let gb = tape.take_grad(branch.head_bias)?;
                m.head_opt.step(1, &mut m.head.bias, gb.data(), scale);
                for l in 0..layers {
                    let gg = tape.take_grad(branch.gammas[l])?;
                    m.adam.step(layers + l, &mut m.bn[l].gamma, gg.data(), scale);
                    let gb = tape.take_grad(branch.betas[l])?;
                    m.adam.step(2 * layers + l, &mut m.bn[l].beta, gb.data(), scale);
                }
                if let Some(sw) = m.switches.as_mut() {
                    for (l, s) in sw.iter_mut().enumerate() {
                        let g = tape.take_grad(branch.switches[l])?;
                        let adam = &mut m.adam;
                        s.update(|relaxed| adam.step(l, relaxed, g.data(), scale));
                    }
                }
                if let Some(spec) = m.budget.as_mut() {
                    let theta_bar: Vec<f64> = violations.iter().map(|v| v + spec.beta.value()).collect();
                    *spec = lambda_step(spec, &violations);
                    let loss = tape.scalar_value(ce)?.as_f64();
                    if let Some(trace) = m.trace.as_mut() {
                        trace.push(TraceRecord { step, theta_bar, lambdas: spec.lambdas().to_vec(), loss });
                    }
                }
            }
            step += 1;
        }
        tracing::debug!(epoch, step, "epoch done");
    }
    if cfg.refresh_bn_stats {
        for m in members.iter_mut() {
            refresh_statistics(arch, kernels, m.switches.as_deref(), &mut m.bn, &m.head, data, cfg.batch_size)?;
        }
    }
    Ok(())
}

/// Replaces running batch-norm statistics by the average of the batch
/// statistics over one unshuffled, unmirrored pass with fixed parameters.
fn refresh_statistics<T: Scalar>(
    arch: &Architecture,
    kernels: &[Kernel<T>],
    switches: Option<&[SwitchVector<T>]>,
    bn: &mut [BnParams<T>],
    head: &Head<T>,
    data: &Dataset,
    batch: usize,
) -> Result<()> {
    for (k, start) in (0..data.len()).step_by(batch).enumerate() {
        let images = data.images.batch_slice(start, (start + batch).min(data.len()));
        let mut tape = Tape::new();
        let x = tape.constant(images.cast());
        let nodes = register_kernels(&mut tape, kernels, false);
        let bn_cfg = BnConfig { momentum: 1.0 / (k + 1) as f64, ..BnConfig::default() };
        forward_branch(&mut tape, arch, &nodes, switches, bn, head, x, Mode::Train, Trainable::NONE, bn_cfg)?;
    }
    Ok(())
}

/// Trains a backbone from scratch on the pretraining domain.
pub fn train_backbone<T: Scalar>(arch: Architecture, data: &Dataset, cfg: &TrainConfig) -> Result<Backbone<T>> {
    let init = Backbone::init(arch, data.classes, cfg.seed);
    fine_tune_all(init, data, cfg)
}

/// Fine-tunes every parameter of a copy of `backbone` on `data`, with a fresh
/// head. This is the per-domain reference model behind the baseline error.
pub fn finetune<T: Scalar>(backbone: &Backbone<T>, data: &Dataset, cfg: &TrainConfig) -> Result<Backbone<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let head = Head::init(backbone.arch().feature_dim(), data.classes, &mut rng);
    let start = Backbone::from_parts(backbone.arch().clone(), backbone.kernels.clone(), backbone.bn.clone(), head)?;
    fine_tune_all(start, data, cfg)
}

fn fine_tune_all<T: Scalar>(backbone: Backbone<T>, data: &Dataset, cfg: &TrainConfig) -> Result<Backbone<T>> {
    let Backbone { kernels, bn, head, .. } = backbone.clone();
    let arch = backbone.arch().clone();
    let mut kernels = kernels;
    let mut members = [Member::new(None, bn, head, None, cfg)];
    let mut kernel_opt = Sgd::new(cfg.classifier);
    fit(&arch, &mut kernels, Some(&mut kernel_opt), &mut members, data, cfg)?;
    let [m] = members;
    Backbone::from_parts(arch, kernels, m.bn, m.head)
}

/// Result of a budget-constrained adapter run.
#[derive(Debug, Clone)]
pub struct DomainRun<T> {
    pub adapter: DomainAdapter<T>,
    pub trace: ConstraintTrace,
    /// Multiplier state after the last step.
    pub spec: BudgetSpec,
    /// Recomputed from the final binarized switches.
    pub compliant: bool,
}

/// Trains switches, batch norms, and a head for one domain over a frozen backbone.
pub fn train_domain<T: Scalar>(
    backbone: &Backbone<T>,
    domain: &str,
    data: &Dataset,
    spec: BudgetSpec,
    cfg: &TrainConfig,
) -> Result<DomainRun<T>> {
    check_budget(&spec, backbone.arch().num_convs())?;
    let init = DomainAdapter::new(backbone, domain, spec.beta, data.classes, cfg.seed);
    let mut kernels = backbone.kernels.clone();
    let mut members = [Member::new(Some(init.switches), init.bn, init.head, Some(spec), cfg)];
    fit(backbone.arch(), &mut kernels, None, &mut members, data, cfg)?;
    let [m] = members;
    finish_member(m, domain)
}

fn finish_member<T: Scalar>(m: Member<T>, domain: &str) -> Result<DomainRun<T>> {
    let spec = m.budget.expect("budgeted member");
    let adapter = DomainAdapter {
        domain: domain.to_string(),
        budget: spec.beta,
        switches: m.switches.expect("gated member"),
        bn: m.bn,
        head: m.head,
    };
    let compliant = is_compliant(&adapter, spec.mode);
    if !compliant {
        tracing::warn!(domain, budget = %spec.beta, "final switches violate the budget");
    }
    Ok(DomainRun { adapter, trace: m.trace.expect("budgeted member"), spec, compliant })
}

/// Result of joint training: one kernel set shared by every budget's adapter.
#[derive(Debug, Clone)]
pub struct JointRun<T> {
    /// Trained kernels; batch norms and head are the starting backbone's.
    pub backbone: Arc<Backbone<T>>,
    pub runs: Vec<DomainRun<T>>,
}

/// Trains kernels jointly with one adapter per budget on a single domain,
/// minimizing the sum of the per-budget Lagrangians. No relation is imposed
/// between the switch sets of different budgets.
pub fn train_multi_budget_joint<T: Scalar>(
    backbone: &Backbone<T>,
    domain: &str,
    data: &Dataset,
    specs: Vec<BudgetSpec>,
    cfg: &TrainConfig,
) -> Result<JointRun<T>> {
    if specs.is_empty() {
        return Err(Error::Budget("joint training needs at least one budget".into()));
    }
    let layers = backbone.arch().num_convs();
    for (i, s) in specs.iter().enumerate() {
        check_budget(s, layers)?;
        if specs[..i].iter().any(|o| o.beta == s.beta) {
            return Err(Error::Budget(format!("duplicate budget {}", s.beta)));
        }
    }
    let mut members: Vec<Member<T>> = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let init = DomainAdapter::new(backbone, domain, spec.beta, data.classes, cfg.seed.wrapping_add(i as u64));
            Member::new(Some(init.switches), init.bn, init.head, Some(spec), cfg)
        })
        .collect();
    let mut kernels = backbone.kernels.clone();
    let mut kernel_opt = Sgd::new(cfg.classifier);
    fit(backbone.arch(), &mut kernels, Some(&mut kernel_opt), &mut members, data, cfg)?;
    let shared = Backbone::from_parts(backbone.arch().clone(), kernels, backbone.bn.clone(), backbone.head.clone())?;
    let runs = members.into_iter().map(|m| finish_member(m, domain)).collect::<Result<_>>()?;
    Ok(JointRun { backbone: Arc::new(shared), runs })
}

const EVAL_BATCH: usize = 128;

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn error_rate<T: Scalar>(data: &Dataset, mut logits_of: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut wrong = 0usize;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let logits = logits_of(&data.images.batch_slice(start, end).cast())?;
        let classes = logits.shape().c();
        for (row, &label) in logits.data().chunks(classes).zip(&data.labels[start..end]) {
            if argmax(row) != label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Eval-mode test error `E ∈ [0, 1]` of the adapted network.
pub fn evaluate<T: Scalar>(backbone: &Backbone<T>, adapter: &DomainAdapter<T>, data: &Dataset) -> Result<f64> {
    data.check_input(backbone.arch())?;
    let mut a = adapter.clone();
    error_rate(data, |x| adapter_forward(backbone, &mut a, x, Mode::Eval))
}

/// Eval-mode test error of the backbone's own model.
pub fn evaluate_backbone<T: Scalar>(backbone: &Backbone<T>, data: &Dataset) -> Result<f64> {
    data.check_input(backbone.arch())?;
    error_rate(data, |x| backbone.logits(x))
}

/// Fills a dataset with `n` zero images of the network's input shape; for tests and dry runs.
pub fn blank_dataset(arch: &Architecture, n: usize, classes: usize) -> Dataset {
    let c = arch.config();
    Dataset {
        images: Tensor::zeros(Shape4::new(n, c.height, c.width, c.in_channels)),
        labels: (0..n).map(|i| i % classes).collect(),
        classes,
    }
}
