//! Auxiliary parameters for the LoRA and adapter baselines.
//!
//! Both injections leave the network function unchanged at initialization:
//! LoRA starts with `B = 0`, adapters start with a zero up-projection.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use crate::unet::{AdapterUnit, Extension, LoraFactor, Model, Role};

fn ensure_plain(model: &Model) -> Result<()> {
    if model.extension().is_some() {
        return Err(Error::Strategy("model already carries injected parameters".into()));
    }
    Ok(())
}

fn normal(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Adds a rank-`rank` update `B·A` to every conv and transposed-conv weight
/// except the head. `A` is Gaussian, `B` is zero.
pub fn lora_inject(model: &Model, rank: usize, seed: u64) -> Result<Model> {
    ensure_plain(model)?;
    if rank == 0 {
        return Err(Error::Config("lora rank must be >= 1".into()));
    }
    let mut out = model.clone();
    let mut rng = seed::rng(&[seed]);
    let mut factors = Vec::new();
    for target in model.layers.kernel_layers() {
        let meta = model.registry().get(target).clone();
        let s = &meta.shape;
        let (rows, cols) = match meta.role {
            Role::TransposedConvWeight => (s[1], s[0] * s[2] * s[3]),
            _ => (s[0], s[1] * s[2] * s[3]),
        };
        if rank > rows.min(cols) {
            return Err(Error::Config(format!(
                "lora rank {rank} exceeds min({rows}, {cols}) for {}",
                meta.name
            )));
        }
        let a = normal(&mut rng, &[rank, cols], 1.0 / (cols as f64).sqrt());
        let a = out.push_param(format!("{}.lora_a", meta.name), Role::LoraA, meta.region, a);
        let b = out.push_param(
            format!("{}.lora_b", meta.name),
            Role::LoraB,
            meta.region,
            Tensor::zeros(&[rows, rank]),
        );
        factors.push(LoraFactor { target, a, b });
    }
    out.extension = Some(Extension::Lora { rank, factors });
    Ok(out)
}

/// Inserts a residual bottleneck adapter (1x1 down, leaky ReLU, 1x1 up)
/// after every conv block. The up-projection starts at zero.
pub fn adapter_inject(model: &Model, width: usize, seed: u64) -> Result<Model> {
    ensure_plain(model)?;
    if width == 0 {
        return Err(Error::Config("adapter width must be >= 1".into()));
    }
    let mut out = model.clone();
    let mut rng = seed::rng(&[seed]);
    let mut units = Vec::new();
    let blocks: Vec<(String, usize, _)> = model
        .layers
        .blocks()
        .into_iter()
        .map(|b| (b.name.clone(), b.channels, b.region))
        .collect();
    for (name, c, region) in blocks {
        let p = format!("{name}.adapter");
        let down = normal(&mut rng, &[width, c, 1, 1], (2.0 / c as f64).sqrt());
        let down_weight = out.push_param(format!("{p}.down.weight"), Role::AdapterWeight, region, down);
        let down_bias = out.push_param(
            format!("{p}.down.bias"),
            Role::AdapterBias,
            region,
            Tensor::zeros(&[width]),
        );
        let up_weight = out.push_param(
            format!("{p}.up.weight"),
            Role::AdapterWeight,
            region,
            Tensor::zeros(&[c, width, 1, 1]),
        );
        let up_bias = out.push_param(format!("{p}.up.bias"), Role::AdapterBias, region, Tensor::zeros(&[c]));
        units.push(AdapterUnit {
            down_weight,
            down_bias,
            up_weight,
            up_bias,
        });
    }
    out.extension = Some(Extension::Adapter { width, units });
    Ok(out)
}

/// The model without any injected parameters.
pub fn remove_extension(model: &Model) -> Model {
    let mut out = model.clone();
    out.strip_extension();
    out
}
