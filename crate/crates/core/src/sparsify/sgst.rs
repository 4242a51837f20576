use super::{per_kernel_mask, GradientSnapshot, SelectionMask};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::train::{compute_gradients, BatchSchedule};
use crate::unet::{partition_kernels, Model, Registry};

/// Accumulated gradient magnitudes and, once frozen, the static mask.
#[derive(Clone, Debug)]
pub struct SgstState {
    accumulated: Vec<f64>,
    iterations: usize,
    mask: Option<SelectionMask>,
}

impl SgstState {
    pub fn new(total_scalars: usize) -> Self {
        Self {
            accumulated: vec![0.0; total_scalars],
            iterations: 0,
            mask: None,
        }
    }

    pub fn accumulate(&mut self, snapshot: &GradientSnapshot) -> Result<()> {
        if self.mask.is_some() {
            return Err(Error::Strategy("sgst mask already frozen".into()));
        }
        let flat = snapshot.flat();
        if flat.len() != self.accumulated.len() {
            return Err(Error::shape(
                "sgst",
                "snapshot scalars",
                self.accumulated.len(),
                flat.len(),
            ));
        }
        for (acc, g) in self.accumulated.iter_mut().zip(flat) {
            *acc += g.abs();
        }
        self.iterations += 1;
        Ok(())
    }

    /// Fixes the mask from the accumulated magnitudes.
    pub fn freeze(&mut self, registry: &Registry, gamma: usize) -> Result<&SelectionMask> {
        if self.iterations == 0 {
            return Err(Error::Strategy("sgst warmup saw no iterations".into()));
        }
        let groups = partition_kernels(registry);
        self.mask = Some(per_kernel_mask(0, registry, &groups, &self.accumulated, gamma));
        self.mask()
    }

    pub fn warmup_iterations(&self) -> usize {
        self.iterations
    }

    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    pub fn mask(&self) -> Result<&SelectionMask> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::Strategy("sgst selection requested before warmup completed".into()))
    }
}

/// Runs `warmup` forward/backward passes over the training schedule's first
/// iterations without updating the model, then freezes the mask.
pub fn sgst_warmup(
    model: &Model,
    data: &[SegSample],
    schedule: &BatchSchedule,
    warmup: usize,
    gamma: usize,
) -> Result<SgstState> {
    if warmup == 0 {
        return Err(Error::Config("sgst warmup must be >= 1 iteration".into()));
    }
    let mut state = SgstState::new(model.registry().total_scalars());
    for t in 0..warmup {
        let (images, labels) = schedule.batch(data, t)?;
        let (_, snapshot) = compute_gradients(model, &images, &labels, t)?;
        state.accumulate(&snapshot)?;
    }
    state.freeze(model.registry(), gamma)?;
    Ok(state)
}
