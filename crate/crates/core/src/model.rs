//! Backbone, per-domain adapters, and the network forward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::Architecture;
use crate::budget::Budget;
use crate::error::{Error, Result};
use crate::ops::{self, BnConfig, Mode, PoolWindow, RunningStats};
use crate::scalar::Scalar;
use crate::switch::SwitchVector;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Kernel, Shape4, Tensor};

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub stats: RunningStats<T>,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(channels: usize) -> Self {
        BnParams { gamma: vec![T::one(); channels], beta: vec![T::zero(); channels], stats: RunningStats::new(channels) }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Linear classifier over pooled features. `weight` is `(1, 1, F, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Head<T> {
    pub fn init(features: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (features as f64).sqrt();
        let weight = Tensor::from_fn(Shape4::new(1, 1, features, classes), |_| T::of(rng.random_range(-bound..bound)));
        Head { weight, bias: vec![T::zero(); classes] }
    }

    pub fn features(&self) -> usize {
        self.weight.shape().w()
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }
}

/// The shared network `θ₀`: conv kernels, its own batch norms, and the
/// classifier of the pretraining domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    arch: Architecture,
    pub kernels: Vec<Kernel<T>>,
    pub bn: Vec<BnParams<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> Backbone<T> {
    /// He-normal kernels, identity batch norms, uniform head.
    pub fn init(arch: Architecture, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = arch
            .convs()
            .iter()
            .map(|c| {
                let std = (2.0 / (c.rows * c.cols * c.c_in) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let t = Tensor::from_fn(Shape4::new(c.rows, c.cols, c.c_in, c.c_out), |_| T::of(normal.sample(&mut rng)));
                Kernel::new(t).expect("odd square kernels")
            })
            .collect();
        let bn = arch.convs().iter().map(|c| BnParams::new(c.c_out)).collect();
        let head = Head::init(arch.feature_dim(), classes, &mut rng);
        Backbone { arch, kernels, bn, head }
    }

    pub fn from_parts(arch: Architecture, kernels: Vec<Kernel<T>>, bn: Vec<BnParams<T>>, head: Head<T>) -> Result<Self> {
        let b = Backbone { arch, kernels, bn, head };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let convs = self.arch.convs();
        if self.kernels.len() != convs.len() || self.bn.len() != convs.len() {
            return Err(Error::Architecture(format!(
                "{} kernels / {} batch norms for {} conv layers",
                self.kernels.len(),
                self.bn.len(),
                convs.len()
            )));
        }
        for (l, (k, c)) in self.kernels.iter().zip(convs).enumerate() {
            if (k.rows(), k.cols(), k.c_in(), k.c_out()) != (c.rows, c.cols, c.c_in, c.c_out) {
                return Err(Error::Architecture(format!("kernel {l} has shape {}", k.tensor().shape())));
            }
            if self.bn[l].channels() != c.c_out {
                return Err(Error::Architecture(format!("batch norm {l} has {} channels", self.bn[l].channels())));
            }
        }
        if self.head.features() != self.arch.feature_dim() {
            return Err(Error::Architecture(format!("head expects {} features", self.head.features())));
        }
        Ok(())
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Eval-mode logits of the backbone model itself, with plain convolutions.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let kernels = register_kernels(&mut tape, &self.kernels, false);
        let mut bn = self.bn.clone();
        let branch = forward_branch(
            &mut tape,
            &self.arch,
            &kernels,
            None,
            &mut bn,
            &self.head,
            x,
            Mode::Eval,
            Trainable::NONE,
            BnConfig::default(),
        )?;
        Ok(tape.value(branch.logits)?.clone())
    }
}

/// Domain-specific parameters `θ_a^d` for one (domain, budget): switches,
/// batch norms, and a classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainAdapter<T> {
    pub domain: String,
    pub budget: Budget,
    pub switches: Vec<SwitchVector<T>>,
    pub bn: Vec<BnParams<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> DomainAdapter<T> {
    /// Switches at their positive initial value, batch norms copied from the
    /// backbone, and a freshly initialized head.
    pub fn new(backbone: &Backbone<T>, domain: impl Into<String>, budget: Budget, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DomainAdapter {
            domain: domain.into(),
            budget,
            switches: backbone.arch.convs().iter().map(|c| SwitchVector::new(c.c_in)).collect(),
            bn: backbone.bn.clone(),
            head: Head::init(backbone.arch.feature_dim(), classes, &mut rng),
        }
    }

    /// Adapter that reproduces the backbone model: all switches on, the
    /// backbone's batch norms and head.
    pub fn identity(backbone: &Backbone<T>, domain: impl Into<String>) -> Self {
        DomainAdapter {
            domain: domain.into(),
            budget: Budget::FULL,
            switches: backbone.arch.convs().iter().map(|c| SwitchVector::new(c.c_in)).collect(),
            bn: backbone.bn.clone(),
            head: backbone.head.clone(),
        }
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let convs = arch.convs();
        if self.switches.len() != convs.len() {
            return Err(Error::Architecture(format!(
                "adapter has {} switch vectors for {} conv layers",
                self.switches.len(),
                convs.len()
            )));
        }
        if self.bn.len() != convs.len() {
            return Err(Error::MissingBnEntry { domain: self.domain.clone(), budget: self.budget.to_string() });
        }
        for (l, c) in convs.iter().enumerate() {
            if self.switches[l].len() != c.c_in {
                return Err(Error::Architecture(format!(
                    "layer {l}: {} switches for {} input channels",
                    self.switches[l].len(),
                    c.c_in
                )));
            }
            if self.bn[l].channels() != c.c_out {
                return Err(Error::Architecture(format!("layer {l}: batch norm width {}", self.bn[l].channels())));
            }
        }
        if self.head.features() != arch.feature_dim() {
            return Err(Error::Architecture(format!("head expects {} features", self.head.features())));
        }
        Ok(())
    }

    pub fn gates(&self) -> Vec<&[bool]> {
        self.switches.iter().map(|s| s.gate()).collect()
    }

    /// Errors if any layer has every switch off.
    pub fn validate_strict(&self) -> Result<()> {
        match self.switches.iter().position(|s| s.active() == 0) {
            Some(layer) => Err(Error::AllSwitchesOff { layer }),
            None => Ok(()),
        }
    }
}

/// Which parameter groups become trainable leaves on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub kernels: bool,
    pub switches: bool,
    pub bn: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable { kernels: false, switches: false, bn: false, head: false };
    /// Adapter training over a frozen backbone.
    pub const ADAPTER: Trainable = Trainable { kernels: false, switches: true, bn: true, head: true };
    pub const ALL: Trainable = Trainable { kernels: true, switches: true, bn: true, head: true };
}

/// Node ids of one recorded forward pass, indexed by conv layer.
#[derive(Debug, Clone)]
pub struct Branch {
    pub logits: NodeId,
    pub switches: Vec<NodeId>,
    pub gammas: Vec<NodeId>,
    pub betas: Vec<NodeId>,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
}

pub fn register_kernels<T: Scalar>(tape: &mut Tape<T>, kernels: &[Kernel<T>], trainable: bool) -> Vec<NodeId> {
    kernels.iter().map(|k| tape.leaf(k.tensor().clone(), trainable)).collect()
}

struct BranchBuilder<'a, T> {
    tape: &'a mut Tape<T>,
    arch: &'a Architecture,
    kernels: &'a [NodeId],
    switches: Option<&'a [SwitchVector<T>]>,
    bn: &'a mut [BnParams<T>],
    mode: Mode,
    trainable: Trainable,
    bn_cfg: BnConfig,
    switch_nodes: Vec<Option<NodeId>>,
    gamma_nodes: Vec<Option<NodeId>>,
    beta_nodes: Vec<Option<NodeId>>,
}

impl<T: Scalar> BranchBuilder<'_, T> {
    fn conv_bn(&mut self, layer: usize, x: NodeId) -> Result<NodeId> {
        let spec = self.arch.convs()[layer];
        let y = match self.switches {
            Some(sw) => {
                let s = self.tape.leaf(Tensor::vector(sw[layer].relaxed().to_vec()), self.trainable.switches);
                self.switch_nodes[layer] = Some(s);
                self.tape.masked_conv2d(x, self.kernels[layer], s, spec.stride, spec.padding)?
            }
            None => self.tape.conv2d(x, self.kernels[layer], spec.stride, spec.padding)?,
        };
        let bn = &mut self.bn[layer];
        let g = self.tape.leaf(Tensor::vector(bn.gamma.clone()), self.trainable.bn);
        let b = self.tape.leaf(Tensor::vector(bn.beta.clone()), self.trainable.bn);
        self.gamma_nodes[layer] = Some(g);
        self.beta_nodes[layer] = Some(b);
        self.tape.batch_norm(y, g, b, &mut bn.stats, self.mode, self.bn_cfg)
    }
}

/// Records one full forward pass on `tape`.
///
/// `kernels` are node ids from [`register_kernels`], so several branches can
/// share one set of kernel nodes. With `switches` set every conv layer is
/// gated; without, plain convolutions are used.
#[allow(clippy::too_many_arguments)]
pub fn forward_branch<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    kernels: &[NodeId],
    switches: Option<&[SwitchVector<T>]>,
    bn: &mut [BnParams<T>],
    head: &Head<T>,
    input: NodeId,
    mode: Mode,
    trainable: Trainable,
    bn_cfg: BnConfig,
) -> Result<Branch> {
    let layers = arch.num_convs();
    if kernels.len() != layers || bn.len() != layers || switches.is_some_and(|s| s.len() != layers) {
        return Err(Error::Architecture(format!("parameter sets do not cover {layers} conv layers")));
    }
    let mut b = BranchBuilder {
        tape,
        arch,
        kernels,
        switches,
        bn,
        mode,
        trainable,
        bn_cfg,
        switch_nodes: vec![None; layers],
        gamma_nodes: vec![None; layers],
        beta_nodes: vec![None; layers],
    };
    let stem = b.conv_bn(0, input)?;
    let mut x = b.tape.relu(stem)?;
    for block in arch.blocks() {
        let h = b.conv_bn(block.first, x)?;
        let h = b.tape.relu(h)?;
        let h = b.conv_bn(block.second, h)?;
        let shortcut = match block.projection {
            Some(p) => b.conv_bn(p, x)?,
            None => x,
        };
        let sum = b.tape.add(h, shortcut)?;
        x = b.tape.relu(sum)?;
    }
    let pooled = b.tape.global_avg_pool(x)?;
    let head_weight = b.tape.leaf(head.weight.clone(), trainable.head);
    let head_bias = b.tape.leaf(Tensor::vector(head.bias.clone()), trainable.head);
    let logits = b.tape.dense(pooled, head_weight, head_bias)?;
    let collect = |v: Vec<Option<NodeId>>| v.into_iter().flatten().collect::<Vec<_>>();
    Ok(Branch {
        logits,
        switches: collect(b.switch_nodes),
        gammas: collect(b.gamma_nodes),
        betas: collect(b.beta_nodes),
        head_weight,
        head_bias,
    })
}

/// Runs the adapted network `Ψ_d(·; θ₀, θ_a^d)` and returns its logits.
/// Train mode updates the adapter's running batch-norm statistics.
pub fn adapter_forward<T: Scalar>(
    backbone: &Backbone<T>,
    adapter: &mut DomainAdapter<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    adapter.check(backbone.arch())?;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let kernels = register_kernels(&mut tape, &backbone.kernels, false);
    let branch = forward_branch(
        &mut tape,
        backbone.arch(),
        &kernels,
        Some(&adapter.switches),
        &mut adapter.bn,
        &adapter.head,
        x,
        mode,
        Trainable::NONE,
        BnConfig::default(),
    )?;
    Ok(tape.value(branch.logits)?.clone())
}

/// A runnable network: a shared backbone composed with one adapter.
#[derive(Debug, Clone)]
pub struct ComposedModel<T> {
    pub backbone: Arc<Backbone<T>>,
    pub adapter: DomainAdapter<T>,
}

impl<T: Scalar> ComposedModel<T> {
    pub fn new(backbone: Arc<Backbone<T>>, adapter: DomainAdapter<T>) -> Result<Self> {
        adapter.check(backbone.arch())?;
        Ok(ComposedModel { backbone, adapter })
    }

    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut adapter = self.adapter.clone();
        adapter_forward(&self.backbone, &mut adapter, input, Mode::Eval)
    }
}

/// Per-(domain, budget) batch-norm parameters of a single layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BnBank<T> {
    entries: BTreeMap<(String, Budget), BnParams<T>>,
}

impl<T: Scalar> BnBank<T> {
    pub fn new() -> Self {
        BnBank { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, domain: &str, budget: Budget, params: BnParams<T>) -> Option<BnParams<T>> {
        self.entries.insert((domain.to_string(), budget), params)
    }

    pub fn get(&self, domain: &str, budget: Budget) -> Result<&BnParams<T>> {
        self.entries
            .get(&(domain.to_string(), budget))
            .ok_or_else(|| Error::MissingBnEntry { domain: domain.to_string(), budget: budget.to_string() })
    }

    pub fn get_mut(&mut self, domain: &str, budget: Budget) -> Result<&mut BnParams<T>> {
        self.entries
            .get_mut(&(domain.to_string(), budget))
            .ok_or_else(|| Error::MissingBnEntry { domain: domain.to_string(), budget: budget.to_string() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(String, Budget)> {
        self.entries.keys()
    }
}

/// One gated convolution with its frozen kernel and a bank of batch norms.
#[derive(Debug, Clone)]
pub struct AdaptedConvLayer<T> {
    pub kernel: Kernel<T>,
    pub switches: SwitchVector<T>,
    pub bn: BnBank<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> AdaptedConvLayer<T> {
    pub fn new(kernel: Kernel<T>, stride: usize, padding: usize) -> Self {
        let switches = SwitchVector::new(kernel.c_in());
        AdaptedConvLayer { kernel, switches, bn: BnBank::new(), stride, padding }
    }

    /// Gated convolution without normalization.
    pub fn masked_conv(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        ops::masked_conv_forward(input, &self.kernel, self.switches.gate(), self.stride, self.padding)
    }

    /// Gated convolution followed by the batch norm of `(domain, budget)`.
    pub fn forward(&mut self, input: &Tensor<T>, domain: &str, budget: Budget, mode: Mode) -> Result<Tensor<T>> {
        let conv = self.masked_conv(input)?;
        let bn = self.bn.get_mut(domain, budget)?;
        let (out, _) = ops::batchnorm_forward(&conv, &bn.gamma, &bn.beta, &mut bn.stats, mode, BnConfig::default())?;
        Ok(out)
    }
}

/// Per-conv-layer activation sizes observed by [`compact_inference`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivationTrace {
    /// `(layer, materialized input values, output values)` per executed conv.
    pub convs: Vec<(usize, usize, usize)>,
}

impl ActivationTrace {
    /// Largest `input + output` value count over the executed convolutions.
    pub fn peak_values(&self) -> usize {
        self.convs.iter().map(|&(_, i, o)| i + o).max().unwrap_or(0)
    }
}

fn gather_channels<T: Scalar>(x: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape4::new(s.n(), s.h(), s.w(), keep.len()));
    for (pixel, dst) in x.data().chunks(s.c()).zip(out.data_mut().chunks_mut(keep.len().max(1))) {
        for (d, &c) in dst.iter_mut().zip(keep) {
            *d = pixel[c];
        }
    }
    out
}

fn gather_kernel_inputs<T: Scalar>(k: &Kernel<T>, keep: &[usize]) -> Result<Kernel<T>> {
    let (rows, cols, c_out) = (k.rows(), k.cols(), k.c_out());
    let mut out = Tensor::zeros(Shape4::new(rows, cols, keep.len(), c_out));
    for r in 0..rows {
        for q in 0..cols {
            for (i, &c) in keep.iter().enumerate() {
                for o in 0..c_out {
                    *out.at_mut(r, q, i, o) = k.tensor().at(r, q, c, o);
                }
            }
        }
    }
    Kernel::new(out)
}

/// Deployment-style inference: each conv materializes only its active input
/// channels and a kernel slice restricted to them. Returns logits and the
/// activation sizes actually allocated per conv.
pub fn compact_inference<T: Scalar>(
    backbone: &Backbone<T>,
    adapter: &DomainAdapter<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, ActivationTrace)> {
    adapter.check(backbone.arch())?;
    let arch = backbone.arch();
    let mut trace = ActivationTrace::default();
    let mut conv_bn = |layer: usize, x: &Tensor<T>| -> Result<Tensor<T>> {
        let spec = arch.convs()[layer];
        let keep: Vec<usize> = (0..spec.c_in).filter(|&c| adapter.switches[layer].gate()[c]).collect();
        let compact = gather_channels(x, &keep);
        let y = if keep.is_empty() {
            let (h, w) = spec.output_extent(x.shape().h(), x.shape().w());
            Tensor::zeros(Shape4::new(x.shape().n(), h, w, spec.c_out))
        } else {
            let kernel = gather_kernel_inputs(&backbone.kernels[layer], &keep)?;
            ops::conv2d_forward(&compact, &kernel, spec.stride, spec.padding)?
        };
        trace.convs.push((layer, compact.len(), y.len()));
        let bn = &adapter.bn[layer];
        let mut stats = bn.stats.clone();
        let (out, _) = ops::batchnorm_forward(&y, &bn.gamma, &bn.beta, &mut stats, Mode::Eval, BnConfig::default())?;
        Ok(out)
    };
    let mut x = ops::relu_forward(&conv_bn(0, input)?);
    for block in arch.blocks() {
        let h = ops::relu_forward(&conv_bn(block.first, &x)?);
        let mut h = conv_bn(block.second, &h)?;
        let shortcut = match block.projection {
            Some(p) => conv_bn(p, &x)?,
            None => x.clone(),
        };
        h.axpy(T::one(), &shortcut);
        x = ops::relu_forward(&h);
    }
    let pooled = ops::avgpool2d_forward(&x, PoolWindow::global(x.shape()))?;
    let logits = ops::dense_forward(&pooled, &adapter.head.weight, &adapter.head.bias)?;
    Ok((logits, trace))
}
