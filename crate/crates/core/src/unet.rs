//! Small 2D U-Net whose parameters are tagged with role, region and kernel
//! groups, so that sparsification strategies can address them by kind.
//!
//! Layout for `depth = d`: `d` encoder stages of two 3×3 conv units each
//! followed by 2×2 max-pooling, a two-unit bottleneck, `d` decoder stages
//! (2×2 stride-2 transposed conv, skip concatenation, two conv units) and a
//! 1×1 classifier head. A conv unit is conv → instance norm (optional) →
//! leaky ReLU(0.01). Stage `i` has `base_width · 2^i` channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, Tape, Var, DEFAULT_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_width: 8,
            depth: 3,
            norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.base_width < 2 {
            return Err(Error::Config("base_width must be >= 2".into()));
        }
        if self.depth < 2 {
            return Err(Error::Config("depth must be >= 2".into()));
        }
        if self.depth > 8 {
            return Err(Error::Config("depth must be <= 8".into()));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth
    }

    fn width_at(&self, stage: usize) -> usize {
        self.base_width << stage
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    ConvWeight,
    TransposedConvWeight,
    Bias,
    NormScale,
    NormShift,
    HeadWeight,
    HeadBias,
    LoraA,
    LoraB,
    AdapterWeight,
    AdapterBias,
}

impl Role {
    /// Weights that are partitioned into per-output-channel kernel groups.
    pub fn is_kernel_weight(self) -> bool {
        matches!(self, Role::ConvWeight | Role::TransposedConvWeight | Role::HeadWeight)
    }

    pub fn is_bias(self) -> bool {
        matches!(self, Role::Bias | Role::HeadBias)
    }

    pub fn is_norm(self) -> bool {
        matches!(self, Role::NormScale | Role::NormShift)
    }

    pub fn is_auxiliary(self) -> bool {
        matches!(
            self,
            Role::LoraA | Role::LoraB | Role::AdapterWeight | Role::AdapterBias
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Encoder,
    Bottleneck,
    Decoder,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterMeta {
    pub id: ParamId,
    pub name: String,
    pub role: Role,
    pub region: Region,
    pub shape: Vec<usize>,
    pub numel: usize,
    /// Index of the first scalar in the model-wide flat numbering.
    pub offset: usize,
    /// Kernel group ids, one per output channel, for kernel weights.
    pub kernel_groups: Vec<usize>,
}

impl ParameterMeta {
    pub fn scalars(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel
    }

    /// Output channel count for a kernel weight.
    fn out_channels(&self) -> usize {
        match self.role {
            Role::TransposedConvWeight => self.shape[1],
            _ => self.shape[0],
        }
    }
}

/// Ordered list of every trainable tensor in a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    entries: Vec<ParameterMeta>,
    total: usize,
    groups: usize,
}

impl Registry {
    pub(crate) fn push(&mut self, name: String, role: Role, region: Region, shape: Vec<usize>) -> ParamId {
        let id = ParamId(self.entries.len());
        let numel = shape.iter().product();
        let mut meta = ParameterMeta {
            id,
            name,
            role,
            region,
            shape,
            numel,
            offset: self.total,
            kernel_groups: Vec::new(),
        };
        if role.is_kernel_weight() {
            let k = meta.out_channels();
            meta.kernel_groups = (self.groups..self.groups + k).collect();
            self.groups += k;
        }
        self.total += numel;
        self.entries.push(meta);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParameterMeta> {
        self.entries.iter()
    }

    pub fn get(&self, id: ParamId) -> &ParameterMeta {
        &self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParameterMeta> {
        self.entries.iter().find(|m| m.name == name)
    }

    /// Total trainable scalars.
    pub fn total_scalars(&self) -> usize {
        self.total
    }

    pub fn kernel_group_count(&self) -> usize {
        self.groups
    }

    fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
        self.total = self.entries.last().map_or(0, |m| m.offset + m.numel);
        self.groups = self.entries.iter().map(|m| m.kernel_groups.len()).sum();
    }

    /// SHA-256 over config and every entry's name, role, region and shape.
    pub fn digest(&self, config: &ModelConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config).expect("config serializes"));
        for m in &self.entries {
            h.update(m.name.as_bytes());
            h.update([0]);
            h.update(serde_json::to_vec(&(m.role, m.region, &m.shape)).expect("meta serializes"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One output-channel filter of a convolution or transposed convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelGroup {
    pub id: usize,
    pub param: ParamId,
    /// Model-wide flat scalar indices, ascending.
    pub scalars: Vec<usize>,
}

/// Splits every kernel weight (including the 1×1 head) into per-output-channel
/// groups. Bias, norm and auxiliary scalars belong to no group.
pub fn partition_kernels(registry: &Registry) -> Vec<KernelGroup> {
    let mut out = Vec::with_capacity(registry.kernel_group_count());
    for m in registry.iter().filter(|m| m.role.is_kernel_weight()) {
        let spatial: usize = m.shape[2..].iter().product();
        for (o, &gid) in m.kernel_groups.iter().enumerate() {
            let scalars = match m.role {
                Role::TransposedConvWeight => {
                    let (cin, cout) = (m.shape[0], m.shape[1]);
                    (0..cin)
                        .flat_map(|i| {
                            let start = m.offset + (i * cout + o) * spatial;
                            start..start + spatial
                        })
                        .collect()
                }
                _ => {
                    let per = m.numel / m.shape[0];
                    (m.offset + o * per..m.offset + (o + 1) * per).collect()
                }
            };
            out.push(KernelGroup {
                id: gid,
                param: m.id,
                scalars,
            });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Unit {
    pub conv: Conv,
    pub norm: Option<Norm>,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub units: [Unit; 2],
    pub channels: usize,
    pub region: Region,
    pub name: String,
}

#[derive(Clone, Debug)]
pub(crate) struct Layers {
    pub encoder: Vec<Block>,
    pub bottleneck: Block,
    /// Indexed by stage, shallowest first; applied deepest first.
    pub up: Vec<Conv>,
    pub decoder: Vec<Block>,
    pub head: Conv,
}

impl Layers {
    /// Blocks in forward order.
    pub fn blocks(&self) -> Vec<&Block> {
        let mut v: Vec<&Block> = self.encoder.iter().collect();
        v.push(&self.bottleneck);
        v.extend(self.decoder.iter().rev());
        v
    }

    /// Every conv and transposed-conv layer except the head.
    pub fn kernel_layers(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for b in self.blocks() {
            v.extend(b.units.iter().map(|u| u.conv.weight));
        }
        v.extend(self.up.iter().map(|c| c.weight));
        v.sort();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraFactor {
    pub target: ParamId,
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterUnit {
    pub down_weight: ParamId,
    pub down_bias: ParamId,
    pub up_weight: ParamId,
    pub up_bias: ParamId,
}

/// Structural additions trained by the LoRA and adapter baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Extension {
    Lora {
        rank: usize,
        factors: Vec<LoraFactor>,
    },
    /// One adapter per conv block, in forward order.
    Adapter {
        width: usize,
        units: Vec<AdapterUnit>,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) seed: u64,
    pub(crate) params: Vec<Tensor>,
    pub(crate) registry: Registry,
    pub(crate) layers: Layers,
    pub(crate) extension: Option<Extension>,
    pub(crate) base_len: usize,
}

struct Builder {
    rng: ChaCha8Rng,
    registry: Registry,
    params: Vec<Tensor>,
}

impl Builder {
    fn he(&mut self, name: String, role: Role, region: Region, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                std * z
            })
            .collect::<Vec<f64>>();
        self.add(name, role, region, Tensor::new(shape, data).expect("shape"))
    }

    fn add(&mut self, name: String, role: Role, region: Region, value: Tensor) -> ParamId {
        let id = self.registry.push(name, role, region, value.shape().to_vec());
        self.params.push(value);
        id
    }

    fn conv(&mut self, prefix: &str, region: Region, cin: usize, cout: usize, k: usize) -> Conv {
        let (wrole, brole) = if region == Region::Head {
            (Role::HeadWeight, Role::HeadBias)
        } else {
            (Role::ConvWeight, Role::Bias)
        };
        let weight = self.he(
            format!("{prefix}.weight"),
            wrole,
            region,
            vec![cout, cin, k, k],
            cin * k * k,
        );
        let bias = self.add(format!("{prefix}.bias"), brole, region, Tensor::zeros(&[cout]));
        Conv {
            weight,
            bias,
            padding: k / 2,
        }
    }

    fn unit(&mut self, prefix: &str, region: Region, cin: usize, cout: usize, norm: bool, idx: usize) -> Unit {
        let conv = self.conv(&format!("{prefix}.conv{idx}"), region, cin, cout, 3);
        let norm = norm.then(|| Norm {
            scale: self.add(
                format!("{prefix}.norm{idx}.scale"),
                Role::NormScale,
                region,
                Tensor::ones(&[cout]),
            ),
            shift: self.add(
                format!("{prefix}.norm{idx}.shift"),
                Role::NormShift,
                region,
                Tensor::zeros(&[cout]),
            ),
        });
        Unit { conv, norm }
    }

    fn block(&mut self, name: String, region: Region, cin: usize, cout: usize, norm: bool) -> Block {
        Block {
            units: [
                self.unit(&name, region, cin, cout, norm, 1),
                self.unit(&name, region, cout, cout, norm, 2),
            ],
            channels: cout,
            region,
            name,
        }
    }
}

/// Deterministically initialised U-Net: He fan-in normal weights, zero
/// biases, unit norm scales and zero shifts.
pub fn build_unet(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        registry: Registry::default(),
        params: Vec::new(),
    };
    let mut encoder = Vec::new();
    let mut cin = config.in_channels;
    for s in 0..config.depth {
        let w = config.width_at(s);
        encoder.push(b.block(format!("encoder.{s}"), Region::Encoder, cin, w, config.norm));
        cin = w;
    }
    let bw = config.width_at(config.depth);
    let bottleneck = b.block("bottleneck".into(), Region::Bottleneck, cin, bw, config.norm);
    let mut up = vec![None; config.depth];
    let mut decoder = vec![None; config.depth];
    let mut below = bw;
    for s in (0..config.depth).rev() {
        let w = config.width_at(s);
        let weight = b.he(
            format!("decoder.{s}.up.weight"),
            Role::TransposedConvWeight,
            Region::Decoder,
            vec![below, w, 2, 2],
            below,
        );
        let bias = b.add(
            format!("decoder.{s}.up.bias"),
            Role::Bias,
            Region::Decoder,
            Tensor::zeros(&[w]),
        );
        up[s] = Some(Conv {
            weight,
            bias,
            padding: 0,
        });
        decoder[s] = Some(b.block(format!("decoder.{s}"), Region::Decoder, 2 * w, w, config.norm));
        below = w;
    }
    let head = b.conv("head", Region::Head, config.base_width, config.num_classes, 1);
    let layers = Layers {
        encoder,
        bottleneck,
        up: up.into_iter().map(|c| c.expect("filled")).collect(),
        decoder: decoder.into_iter().map(|c| c.expect("filled")).collect(),
        head,
    };
    let base_len = b.params.len();
    Ok(Model {
        config: config.clone(),
        seed,
        params: b.params,
        registry: b.registry,
        layers,
        extension: None,
        base_len,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn extension(&self) -> Option<&Extension> {
        self.extension.as_ref()
    }

    pub fn registry_digest(&self) -> String {
        self.registry.digest(&self.config)
    }

    /// Flat copy of every scalar in registry order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.registry.total_scalars());
        for p in &self.params {
            v.extend_from_slice(p.data());
        }
        v
    }

    /// True when every parameter tensor is bitwise equal to `other`'s.
    pub fn bit_eq(&self, other: &Model) -> bool {
        self.params.len() == other.params.len() && self.params.iter().zip(&other.params).all(|(a, b)| a.bit_eq(b))
    }

    pub(crate) fn push_param(&mut self, name: String, role: Role, region: Region, value: Tensor) -> ParamId {
        let id = self.registry.push(name, role, region, value.shape().to_vec());
        self.params.push(value);
        id
    }

    pub(crate) fn strip_extension(&mut self) {
        self.params.truncate(self.base_len);
        self.registry.truncate(self.base_len);
        self.extension = None;
    }

    /// Replaces this model's weights with `other`'s when both share the
    /// same architecture.
    pub fn load_weights_from(&mut self, other: &Model) -> Result<()> {
        if self.registry_digest() != other.registry_digest() {
            return Err(Error::Config("architecture mismatch when copying weights".into()));
        }
        self.params.clone_from(&other.params);
        Ok(())
    }

    /// Forward pass recording onto `tape`; returns logits `[N, classes, H, W]`.
    pub fn forward(&self, batch: &Tensor, tape: &mut Tape) -> Result<Var> {
        if batch.rank() != 4 {
            return Err(Error::shape("forward", "input rank", 4, batch.rank()));
        }
        if batch.dim(1) != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                "input channels",
                self.config.in_channels,
                batch.dim(1),
            ));
        }
        let div = self.config.spatial_divisor();
        for (axis, name) in [(2, "H"), (3, "W")] {
            if batch.dim(axis) % div != 0 {
                return Err(Error::shape(
                    "forward",
                    name,
                    format!("a multiple of {div}"),
                    batch.dim(axis),
                ));
            }
        }
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut weights: Vec<Var> = vars.clone();
        if let Some(Extension::Lora { factors, .. }) = &self.extension {
            for f in factors {
                weights[f.target.0] = self.lora_weight(tape, &vars, f)?;
            }
        }
        let ctx = Ctx {
            vars: &vars,
            weights: &weights,
            adapters: match &self.extension {
                Some(Extension::Adapter { units, .. }) => Some(units),
                _ => None,
            },
        };

        let mut x = tape.leaf(batch.clone())?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut block_idx = 0;
        for block in &self.layers.encoder {
            x = ctx.block(tape, block, x, block_idx)?;
            block_idx += 1;
            skips.push(x);
            x = tape.max_pool2d(x)?;
        }
        x = ctx.block(tape, &self.layers.bottleneck, x, block_idx)?;
        block_idx += 1;
        for s in (0..self.config.depth).rev() {
            let up = &self.layers.up[s];
            x = tape.conv_transpose2d(x, weights[up.weight.0], Some(vars[up.bias.0]), 2, 0)?;
            x = tape.concat(skips[s], x)?;
            x = ctx.block(tape, &self.layers.decoder[s], x, block_idx)?;
            block_idx += 1;
        }
        let head = &self.layers.head;
        tape.conv2d(x, weights[head.weight.0], Some(vars[head.bias.0]), 1, 0)
    }

    fn lora_weight(&self, tape: &mut Tape, vars: &[Var], f: &LoraFactor) -> Result<Var> {
        let meta = self.registry.get(f.target);
        let ba = tape.matmul(vars[f.b.0], vars[f.a.0])?;
        let delta = match meta.role {
            Role::TransposedConvWeight => {
                let s = &meta.shape;
                let r = tape.reshape(ba, &[s[1], s[0], s[2], s[3]])?;
                tape.swap_leading_axes(r)?
            }
            _ => tape.reshape(ba, &meta.shape)?,
        };
        tape.add(vars[f.target.0], delta)
    }
}

struct Ctx<'a> {
    vars: &'a [Var],
    weights: &'a [Var],
    adapters: Option<&'a Vec<AdapterUnit>>,
}

impl Ctx<'_> {
    fn unit(&self, tape: &mut Tape, unit: &Unit, x: Var) -> Result<Var> {
        let c = &unit.conv;
        let mut y = tape.conv2d(x, self.weights[c.weight.0], Some(self.vars[c.bias.0]), 1, c.padding)?;
        if let Some(n) = &unit.norm {
            y = tape.instance_norm2d(y, self.vars[n.scale.0], self.vars[n.shift.0], DEFAULT_NORM_EPS)?;
        }
        tape.leaky_relu(y, LEAKY_SLOPE)
    }

    fn block(&self, tape: &mut Tape, block: &Block, x: Var, index: usize) -> Result<Var> {
        let mut y = self.unit(tape, &block.units[0], x)?;
        y = self.unit(tape, &block.units[1], y)?;
        if let Some(units) = self.adapters {
            let a = &units[index];
            let d = tape.conv2d(y, self.vars[a.down_weight.0], Some(self.vars[a.down_bias.0]), 1, 0)?;
            let d = tape.leaky_relu(d, LEAKY_SLOPE)?;
            let u = tape.conv2d(d, self.vars[a.up_weight.0], Some(self.vars[a.up_bias.0]), 1, 0)?;
            y = tape.add(y, u)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            base_width: 4,
            depth: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_unet(&ModelConfig::default(), 7).unwrap();
        let b = build_unet(&ModelConfig::default(), 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = build_unet(&ModelConfig::default(), 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            ModelConfig {
                depth: 1,
                ..ModelConfig::default()
            },
            ModelConfig {
                base_width: 1,
                ..ModelConfig::default()
            },
            ModelConfig {
                num_classes: 1,
                ..ModelConfig::default()
            },
        ] {
            assert!(matches!(build_unet(&cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn kernel_group_count_is_total_output_channels() {
        let cfg = ModelConfig::default();
        let m = build_unet(&cfg, 0).unwrap();
        let mut expected = 0;
        for s in 0..cfg.depth {
            let w = cfg.base_width << s;
            expected += 2 * w; // encoder convs
            expected += w; // transposed conv
            expected += 2 * w; // decoder convs
        }
        expected += 2 * (cfg.base_width << cfg.depth); // bottleneck
        expected += cfg.num_classes; // head
        assert_eq!(m.registry().kernel_group_count(), expected);
        assert_eq!(partition_kernels(m.registry()).len(), expected);
    }

    #[test]
    fn norm_off_has_no_norm_entries() {
        let cfg = ModelConfig { norm: false, ..small() };
        let m = build_unet(&cfg, 0).unwrap();
        assert!(m.registry().iter().all(|p| !p.role.is_norm()));
    }

    #[test]
    fn partition_covers_exactly_kernel_weights() {
        let m = build_unet(&small(), 3).unwrap();
        let reg = m.registry();
        let groups = partition_kernels(reg);
        let mut seen = vec![false; reg.total_scalars()];
        for g in &groups {
            let meta = reg.get(g.param);
            let per: usize = meta.numel / meta.kernel_groups.len();
            assert_eq!(g.scalars.len(), per);
            for &s in &g.scalars {
                assert!(!seen[s], "scalar {s} in two groups");
                seen[s] = true;
            }
        }
        for meta in reg.iter() {
            for s in meta.scalars() {
                assert_eq!(seen[s], meta.role.is_kernel_weight(), "{}", meta.name);
            }
        }
        let sum: usize = reg.iter().map(|m| m.numel).sum();
        assert_eq!(sum, reg.total_scalars());
    }

    #[test]
    fn transposed_groups_follow_output_channel_axis() {
        let m = build_unet(&small(), 3).unwrap();
        let reg = m.registry();
        let meta = reg.by_name("decoder.0.up.weight").unwrap();
        let (cin, cout) = (meta.shape[0], meta.shape[1]);
        let g = partition_kernels(reg).into_iter().find(|g| g.param == meta.id).unwrap();
        // Group 0 holds w[i, 0, :, :] for every input channel i.
        let expected: Vec<usize> = (0..cin)
            .flat_map(|i| (0..4).map(move |j| meta.offset + i * cout * 4 + j))
            .collect();
        assert_eq!(g.scalars, expected);
        assert_eq!(g.scalars.len(), cin * 4);
    }

    #[test]
    fn regions_are_tagged_by_position() {
        let m = build_unet(&small(), 0).unwrap();
        for p in m.registry().iter() {
            let expect = match p.name.split('.').next().unwrap() {
                "encoder" => Region::Encoder,
                "bottleneck" => Region::Bottleneck,
                "decoder" => Region::Decoder,
                "head" => Region::Head,
                other => panic!("unexpected prefix {other}"),
            };
            assert_eq!(p.region, expect, "{}", p.name);
        }
    }

    #[test]
    fn forward_shape_and_divisibility() {
        let m = build_unet(&small(), 1).unwrap();
        let mut tape = Tape::new();
        let y = m.forward(&Tensor::zeros(&[2, 1, 8, 12]), &mut tape).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 8, 12]);
        let err = m.forward(&Tensor::zeros(&[1, 1, 8, 6]), &mut Tape::new()).unwrap_err();
        assert!(err.to_string().contains("W"), "{err}");
    }

    #[test]
    fn zero_head_gives_constant_logits() {
        let mut m = build_unet(&small(), 1).unwrap();
        let head = m.layers.head.clone();
        *m.param_mut(head.weight) = Tensor::zeros(m.param(head.weight).shape());
        *m.param_mut(head.bias) = Tensor::new(vec![2], vec![0.3, -0.1]).unwrap();
        let mut tape = Tape::new();
        let y = m.forward(&Tensor::zeros(&[1, 1, 8, 8]), &mut tape).unwrap();
        let v = tape.value(y).data();
        assert!(v[..64].iter().all(|&e| e == 0.3));
        assert!(v[64..].iter().all(|&e| e == -0.1));
    }

    #[test]
    fn batch_items_are_independent() {
        let m = build_unet(&small(), 2).unwrap();
        let img = Tensor::from_fn(&[1, 8, 8], |i| (i as f64 * 0.3).sin());
        let batch = Tensor::stack(&[img.clone(), img]).unwrap();
        let mut tape = Tape::new();
        let y = m.forward(&batch, &mut tape).unwrap();
        let out = tape.value(y);
        assert!(out.slice_outer(0).bit_eq(&out.slice_outer(1)));
    }

    #[test]
    fn encoder_weight_perturbation_changes_output() {
        let m = build_unet(&small(), 2).unwrap();
        let img = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.3).sin());
        let run = |model: &Model| {
            let mut tape = Tape::new();
            let y = model.forward(&img, &mut tape).unwrap();
            tape.value(y).clone()
        };
        let base = run(&m);
        let mut p = m.clone();
        let id = p.registry().by_name("encoder.0.conv1.weight").unwrap().id;
        p.param_mut(id).data_mut()[0] += 1e-3;
        assert!(!run(&p).bit_eq(&base));
    }
}
