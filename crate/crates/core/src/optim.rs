//! Poly learning-rate schedule and masked SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::{GradientSnapshot, SelectionMask};
use crate::tensor::Tensor;
use crate::unet::Registry;

pub const POLY_POWER: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// 0 gives plain SGD.
    pub momentum: f64,
    pub augment: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::finetune()
    }
}

impl OptimConfig {
    pub fn finetune() -> Self {
        Self {
            lr0: 1e-3,
            power: POLY_POWER,
            epochs: 50,
            batch_size: 2,
            momentum: 0.0,
            augment: true,
        }
    }

    pub fn pretrain() -> Self {
        Self {
            lr0: 1e-2,
            epochs: 200,
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.power.is_finite() && self.power >= 0.0) {
            return Err(Error::Config(format!("power must be >= 0, got {}", self.power)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// `lr0 * (1 - n / total)^power`.
pub fn poly_lr(lr0: f64, n: usize, total: usize, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("poly schedule needs at least one iteration".into()));
    }
    if n > total {
        return Err(Error::Config(format!("iteration {n} beyond schedule length {total}")));
    }
    Ok(lr0 * (1.0 - n as f64 / total as f64).powf(power))
}

/// `theta -= lr * g` on selected scalars. Unselected scalars are not touched.
/// Returns the number of updated scalars.
pub fn masked_step(
    params: &mut [Tensor],
    registry: &Registry,
    grads: &GradientSnapshot,
    mask: &SelectionMask,
    lr: f64,
) -> Result<usize> {
    check_lengths(params, registry, grads, mask)?;
    check_finite(registry, grads, mask)?;
    let mut updated = 0;
    for ((meta, p), g) in registry.iter().zip(params.iter_mut()).zip(grads.tensors()) {
        let bits = &mask.bits()[meta.scalars()];
        for ((w, &gv), &on) in p.data_mut().iter_mut().zip(g.data()).zip(bits) {
            if on {
                *w -= lr * gv;
                updated += 1;
            }
        }
    }
    Ok(updated)
}

/// Fails on the first selected non-finite gradient, before anything is
/// written.
fn check_finite(registry: &Registry, grads: &GradientSnapshot, mask: &SelectionMask) -> Result<()> {
    for (meta, g) in registry.iter().zip(grads.tensors()) {
        let bits = &mask.bits()[meta.scalars()];
        if let Some(i) = g.data().iter().zip(bits).position(|(v, &on)| on && !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: meta.name.clone(),
                index: i,
                iteration: grads.iteration,
            });
        }
    }
    Ok(())
}

fn check_lengths(params: &[Tensor], registry: &Registry, grads: &GradientSnapshot, mask: &SelectionMask) -> Result<()> {
    if params.len() != registry.len() || grads.tensors().len() != registry.len() {
        return Err(Error::shape(
            "masked step",
            "parameter count",
            registry.len(),
            params.len(),
        ));
    }
    if mask.len() != registry.total_scalars() {
        return Err(Error::shape(
            "masked step",
            "mask length",
            registry.total_scalars(),
            mask.len(),
        ));
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum. Momentum buffers only advance on
/// selected scalars.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64, total_scalars: usize) -> Self {
        let velocity = if momentum > 0.0 {
            vec![0.0; total_scalars]
        } else {
            Vec::new()
        };
        Self { momentum, velocity }
    }

    pub fn step(
        &mut self,
        params: &mut [Tensor],
        registry: &Registry,
        grads: &GradientSnapshot,
        mask: &SelectionMask,
        lr: f64,
    ) -> Result<usize> {
        if self.momentum == 0.0 {
            return masked_step(params, registry, grads, mask, lr);
        }
        check_lengths(params, registry, grads, mask)?;
        check_finite(registry, grads, mask)?;
        let mut updated = 0;
        for ((meta, p), g) in registry.iter().zip(params.iter_mut()).zip(grads.tensors()) {
            let off = meta.offset;
            for (i, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if !mask.contains(off + i) {
                    continue;
                }
                let v = &mut self.velocity[off + i];
                *v = self.momentum * *v + gv;
                *w -= lr * *v;
                updated += 1;
            }
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{build_unet, ModelConfig, Region, Role};

    #[test]
    fn two_scalar_step() {
        let mut reg = Registry::default();
        reg.push("b".into(), Role::Bias, Region::Encoder, vec![2]);
        let mut params = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let g = GradientSnapshot::from_tensors(0, &reg, vec![Tensor::full(&[2], 0.5)]).unwrap();
        let mask = SelectionMask::from_indices(0, 2, [0]);
        assert_eq!(masked_step(&mut params, &reg, &g, &mask, 0.1).unwrap(), 1);
        assert_eq!(params[0].data(), &[0.95, 2.0]);
        let before = params.clone();
        masked_step(&mut params, &reg, &g, &SelectionMask::none(0, 2), 0.1).unwrap();
        assert!(params[0].bit_eq(&before[0]));
    }

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9).unwrap(), 0.0);
        assert!(poly_lr(0.01, 0, 0, 0.9).is_err());
        assert!(poly_lr(0.01, 101, 100, 0.9).is_err());
        let v = poly_lr(1e-3, 500, 1000, 0.9).unwrap();
        assert!((v - 1e-3 * 0.5f64.powf(0.9)).abs() < 1e-18);
    }

    #[test]
    fn masked_step_touches_only_selection_and_rejects_nan() {
        let model = build_unet(
            &ModelConfig {
                base_width: 2,
                depth: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let reg = model.registry();
        let grads: Vec<Tensor> = reg.iter().map(|m| Tensor::ones(&m.shape)).collect();
        let snap = GradientSnapshot::from_tensors(0, reg, grads.clone()).unwrap();
        let mask = SelectionMask::from_indices(0, reg.total_scalars(), [0, 5]);
        let mut params = model.params().to_vec();
        assert_eq!(masked_step(&mut params, reg, &snap, &mask, 0.5).unwrap(), 2);
        let before = model.flat_params();
        let after: Vec<f64> = params.iter().flat_map(|p| p.data().to_vec()).collect();
        for i in 0..before.len() {
            if i == 0 || i == 5 {
                assert_eq!(after[i], before[i] - 0.5);
            } else {
                assert_eq!(after[i].to_bits(), before[i].to_bits());
            }
        }

        let mut bad = grads;
        bad[0].data_mut()[0] = f64::NAN;
        let snap = GradientSnapshot::from_tensors(3, reg, bad).unwrap();
        let kept = params.clone();
        let err = masked_step(&mut params, reg, &snap, &mask, 0.5).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFiniteGradient {
                index: 0,
                iteration: 3,
                ..
            }
        ));
        assert!(params.iter().zip(&kept).all(|(a, b)| a.bit_eq(b)));
        // NaN in an unselected scalar is ignored
        let mask = SelectionMask::from_indices(0, reg.total_scalars(), [5]);
        assert!(masked_step(&mut params, reg, &snap, &mask, 0.5).is_ok());
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::finetune().validate().is_ok());
        let bad = OptimConfig {
            epochs: 0,
            ..OptimConfig::finetune()
        };
        assert!(bad.validate().unwrap_err().is_config());
    }
}
