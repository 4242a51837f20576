//! Per-iteration parameter selection for every fine-tuning strategy.
//!
//! Each training iteration produces one [`GradientSnapshot`]; a [`Selector`]
//! turns it into a [`SelectionMask`] over the model's flat scalar numbering,
//! and only the selected scalars are updated.
//!
//! The dynamic gradient strategy (`dgst`) keeps, inside every kernel group,
//! the `gamma` scalars with the largest gradient magnitude at the current
//! iteration, plus every bias and normalization scalar. `sgst` applies the
//! same rule once to gradients accumulated over a warmup and then freezes the
//! mask; `drst` draws the same per-kernel count uniformly at random. The
//! remaining strategies select fixed subsets by role or region, and `lora` /
//! `adapter` select only the auxiliary parameters added by [`inject`].

pub mod inject;
mod sgst;

pub use inject::{adapter_inject, lora_inject, remove_extension};
pub use sgst::{sgst_warmup, SgstState};

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::tensor::Tensor;
use crate::unet::{partition_kernels, KernelGroup, Region, Registry, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Full,
    FromScratch,
    LinearProb,
    Bias,
    BiasNorm,
    AffineIn,
    EncoderOnly,
    DecoderOnly,
    Lora,
    Adapter,
    Drst,
    Sgst,
    Dgst,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 13] = [
        StrategyKind::FromScratch,
        StrategyKind::Full,
        StrategyKind::LinearProb,
        StrategyKind::Bias,
        StrategyKind::BiasNorm,
        StrategyKind::AffineIn,
        StrategyKind::EncoderOnly,
        StrategyKind::DecoderOnly,
        StrategyKind::Lora,
        StrategyKind::Adapter,
        StrategyKind::Drst,
        StrategyKind::Sgst,
        StrategyKind::Dgst,
    ];

    /// The sparsification ablation set.
    pub const ABLATION: [StrategyKind; 7] = [
        StrategyKind::Full,
        StrategyKind::EncoderOnly,
        StrategyKind::DecoderOnly,
        StrategyKind::BiasNorm,
        StrategyKind::Drst,
        StrategyKind::Sgst,
        StrategyKind::Dgst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Full => "full",
            StrategyKind::FromScratch => "from-scratch",
            StrategyKind::LinearProb => "linear-prob",
            StrategyKind::Bias => "bias",
            StrategyKind::BiasNorm => "bias-norm",
            StrategyKind::AffineIn => "affine-in",
            StrategyKind::EncoderOnly => "encoder-only",
            StrategyKind::DecoderOnly => "decoder-only",
            StrategyKind::Lora => "lora",
            StrategyKind::Adapter => "adapter",
            StrategyKind::Drst => "drst",
            StrategyKind::Sgst => "sgst",
            StrategyKind::Dgst => "dgst",
        }
    }

    /// Strategies that pick `gamma` scalars per kernel group.
    pub fn is_per_kernel(self) -> bool {
        matches!(self, StrategyKind::Dgst | StrategyKind::Sgst | StrategyKind::Drst)
    }

    /// Whether the run starts from the foundation weights.
    pub fn uses_foundation(self) -> bool {
        self != StrategyKind::FromScratch
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub gamma: usize,
    pub lora_rank: usize,
    pub adapter_width: usize,
    /// Defaults to one epoch of iterations when unset.
    pub sgst_warmup_iters: Option<usize>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Dgst,
            gamma: 1,
            lora_rank: 4,
            adapter_width: 8,
            sgst_warmup_iters: None,
        }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_gamma(mut self, gamma: usize) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::Config("gamma must be >= 1".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        if self.adapter_width == 0 {
            return Err(Error::Config("adapter_width must be >= 1".into()));
        }
        if self.sgst_warmup_iters == Some(0) {
            return Err(Error::Config("sgst_warmup_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Gradient of every registry parameter at one iteration.
#[derive(Clone, Debug)]
pub struct GradientSnapshot {
    pub iteration: usize,
    grads: Vec<Tensor>,
}

impl GradientSnapshot {
    /// Parameters absent from `grads` get zero gradients.
    pub fn from_gradients(iteration: usize, registry: &Registry, grads: Gradients) -> Result<Self> {
        let mut by_id = grads.into_params();
        let grads = registry
            .iter()
            .map(|m| {
                let g = by_id.remove(&m.id).unwrap_or_else(|| Tensor::zeros(&m.shape));
                if g.shape() != m.shape.as_slice() {
                    return Err(Error::shape(
                        "gradient snapshot",
                        m.name.clone(),
                        format!("{:?}", m.shape),
                        format!("{:?}", g.shape()),
                    ));
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;
        Ok(Self { iteration, grads })
    }

    /// Builds a snapshot from one tensor per registry entry.
    pub fn from_tensors(iteration: usize, registry: &Registry, grads: Vec<Tensor>) -> Result<Self> {
        if grads.len() != registry.len() {
            return Err(Error::shape(
                "gradient snapshot",
                "parameter count",
                registry.len(),
                grads.len(),
            ));
        }
        for (m, g) in registry.iter().zip(&grads) {
            if g.shape() != m.shape.as_slice() {
                return Err(Error::shape(
                    "gradient snapshot",
                    m.name.clone(),
                    format!("{:?}", m.shape),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        Ok(Self { iteration, grads })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    /// Gradients concatenated in registry order (the flat scalar numbering).
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.grads.iter().map(Tensor::numel).sum());
        for g in &self.grads {
            v.extend_from_slice(g.data());
        }
        v
    }
}

/// Set of scalars updated at one iteration, over the flat scalar numbering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    pub iteration: usize,
    bits: Vec<bool>,
    count: usize,
}

impl SelectionMask {
    pub fn none(iteration: usize, total: usize) -> Self {
        Self {
            iteration,
            bits: vec![false; total],
            count: 0,
        }
    }

    pub fn all(iteration: usize, total: usize) -> Self {
        Self {
            iteration,
            bits: vec![true; total],
            count: total,
        }
    }

    pub fn from_indices(iteration: usize, total: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::none(iteration, total);
        for i in indices {
            m.insert(i);
        }
        m
    }

    pub fn insert(&mut self, index: usize) {
        if !self.bits[index] {
            self.bits[index] = true;
            self.count += 1;
        }
    }

    pub fn contains(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Same selected set, ignoring the iteration stamp.
    pub fn same_selection(&self, other: &SelectionMask) -> bool {
        self.bits == other.bits
    }

    fn select_roles(&mut self, registry: &Registry, pred: impl Fn(Role, Region) -> bool) {
        for m in registry.iter().filter(|m| pred(m.role, m.region)) {
            for i in m.scalars() {
                self.insert(i);
            }
        }
    }
}

/// Positions of the `min(gamma, len)` largest `|g|`, ascending. Ties go to
/// the lower position.
pub fn select_top_gamma(grads: &[f64], gamma: usize) -> Vec<usize> {
    let take = gamma.min(grads.len());
    if take == grads.len() {
        return (0..grads.len()).collect();
    }
    let mut order: Vec<usize> = (0..grads.len()).collect();
    let rank = |a: &usize, b: &usize| grads[*b].abs().total_cmp(&grads[*a].abs()).then(a.cmp(b));
    if take > 0 {
        order.select_nth_unstable_by(take - 1, rank);
    }
    order.truncate(take);
    order.sort_unstable();
    order
}

fn mandatory(role: Role, _: Region) -> bool {
    role.is_bias() || role.is_norm()
}

/// Top-`gamma` per kernel group by `scores` (flat numbering) plus every bias
/// and normalization scalar.
pub(crate) fn per_kernel_mask(
    iteration: usize,
    registry: &Registry,
    groups: &[KernelGroup],
    scores: &[f64],
    gamma: usize,
) -> SelectionMask {
    let mut mask = SelectionMask::none(iteration, registry.total_scalars());
    let mut local = Vec::new();
    for g in groups {
        local.clear();
        local.extend(g.scalars.iter().map(|&s| scores[s]));
        for pos in select_top_gamma(&local, gamma) {
            mask.insert(g.scalars[pos]);
        }
    }
    mask.select_roles(registry, mandatory);
    mask
}

/// Builds selection masks for one training run.
#[derive(Clone, Debug)]
pub struct Selector {
    strategy: StrategyConfig,
    groups: Vec<KernelGroup>,
    seed: u64,
    sgst: Option<SgstState>,
}

impl Selector {
    pub fn new(strategy: &StrategyConfig, registry: &Registry, seed: u64, sgst: Option<SgstState>) -> Result<Self> {
        strategy.validate()?;
        let needs_aux = match strategy.kind {
            StrategyKind::Lora => Some(Role::LoraA),
            StrategyKind::Adapter => Some(Role::AdapterWeight),
            _ => None,
        };
        if let Some(role) = needs_aux {
            if !registry.iter().any(|m| m.role == role) {
                return Err(Error::Strategy(format!(
                    "{} requires a model with injected {} parameters",
                    strategy.kind, strategy.kind
                )));
            }
        }
        Ok(Self {
            strategy: strategy.clone(),
            groups: partition_kernels(registry),
            seed,
            sgst,
        })
    }

    pub fn strategy(&self) -> &StrategyConfig {
        &self.strategy
    }

    pub fn groups(&self) -> &[KernelGroup] {
        &self.groups
    }

    /// Mask for `iteration`. Gradient-free strategies ignore `snapshot`.
    pub fn select(&self, registry: &Registry, snapshot: &GradientSnapshot) -> Result<SelectionMask> {
        let n = snapshot.iteration;
        let total = registry.total_scalars();
        let gamma = self.strategy.gamma;
        let mut mask = SelectionMask::none(n, total);
        match self.strategy.kind {
            StrategyKind::Full | StrategyKind::FromScratch => return Ok(SelectionMask::all(n, total)),
            StrategyKind::LinearProb => {
                mask.select_roles(registry, |r, _| matches!(r, Role::HeadWeight | Role::HeadBias))
            }
            StrategyKind::Bias => mask.select_roles(registry, |r, _| r.is_bias()),
            StrategyKind::AffineIn => mask.select_roles(registry, |r, _| r.is_norm()),
            StrategyKind::BiasNorm => mask.select_roles(registry, mandatory),
            StrategyKind::EncoderOnly => mask.select_roles(registry, |r, g| {
                !r.is_auxiliary() && matches!(g, Region::Encoder | Region::Bottleneck)
            }),
            StrategyKind::DecoderOnly => mask.select_roles(registry, |r, g| !r.is_auxiliary() && g == Region::Decoder),
            StrategyKind::Lora => mask.select_roles(registry, |r, _| matches!(r, Role::LoraA | Role::LoraB)),
            StrategyKind::Adapter => {
                mask.select_roles(registry, |r, _| matches!(r, Role::AdapterWeight | Role::AdapterBias))
            }
            StrategyKind::Dgst => {
                let flat = snapshot.flat();
                if flat.len() != total {
                    return Err(Error::shape("dgst", "snapshot scalars", total, flat.len()));
                }
                return Ok(per_kernel_mask(n, registry, &self.groups, &flat, gamma));
            }
            StrategyKind::Sgst => {
                let state = self
                    .sgst
                    .as_ref()
                    .ok_or_else(|| Error::Strategy("sgst selection requested before warmup".into()))?;
                let frozen = state.mask()?;
                let mut m = frozen.clone();
                m.iteration = n;
                return Ok(m);
            }
            StrategyKind::Drst => {
                for g in &self.groups {
                    let mut rng = seed::rng(&[self.seed, stream::STRATEGY, n as u64, g.id as u64]);
                    let take = gamma.min(g.scalars.len());
                    for pos in index::sample(&mut rng, g.scalars.len(), take) {
                        mask.insert(g.scalars[pos]);
                    }
                }
                mask.select_roles(registry, mandatory);
            }
        }
        Ok(mask)
    }
}

/// One-shot form of [`Selector::select`].
pub fn build_selection(
    strategy: &StrategyConfig,
    registry: &Registry,
    snapshot: &GradientSnapshot,
    seed: u64,
    sgst: Option<&SgstState>,
) -> Result<SelectionMask> {
    Selector::new(strategy, registry, seed, sgst.cloned())?.select(registry, snapshot)
}

/// Scalars updated per iteration under `strategy`. For `lora` and `adapter`
/// this counts the auxiliary parameters present in `registry`.
pub fn strategy_param_count(strategy: &StrategyConfig, registry: &Registry) -> usize {
    let sum = |pred: &dyn Fn(Role, Region) -> bool| -> usize {
        registry
            .iter()
            .filter(|m| pred(m.role, m.region))
            .map(|m| m.numel)
            .sum()
    };
    match strategy.kind {
        StrategyKind::Full | StrategyKind::FromScratch => registry.total_scalars(),
        StrategyKind::LinearProb => sum(&|r, _| matches!(r, Role::HeadWeight | Role::HeadBias)),
        StrategyKind::Bias => sum(&|r, _| r.is_bias()),
        StrategyKind::AffineIn => sum(&|r, _| r.is_norm()),
        StrategyKind::BiasNorm => sum(&mandatory),
        StrategyKind::EncoderOnly => {
            sum(&|r, g| !r.is_auxiliary() && matches!(g, Region::Encoder | Region::Bottleneck))
        }
        StrategyKind::DecoderOnly => sum(&|r, g| !r.is_auxiliary() && g == Region::Decoder),
        StrategyKind::Lora => sum(&|r, _| matches!(r, Role::LoraA | Role::LoraB)),
        StrategyKind::Adapter => sum(&|r, _| matches!(r, Role::AdapterWeight | Role::AdapterBias)),
        StrategyKind::Dgst | StrategyKind::Sgst | StrategyKind::Drst => {
            let grouped: usize = registry
                .iter()
                .filter(|m| m.role.is_kernel_weight())
                .map(|m| {
                    let per = m.numel / m.kernel_groups.len();
                    m.kernel_groups.len() * strategy.gamma.min(per)
                })
                .sum();
            grouped + sum(&mandatory)
        }
    }
}
