//! The trainable detector: a Unet with hand-written forward and backward
//! passes in 64-bit arithmetic, Adam, and checkpoint I/O.

mod adam;
pub mod checkpoint;
pub mod layers;
mod tensor;
mod unet;

use std::path::Path;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::NamedTensor;
pub use tensor::Tensor4;
pub use unet::{
    images_to_tensor, tensor_to_maps, ChannelPlan, ForwardCache, Grads, Mode, Param, UnetParams, DEFAULT_PARAMETER_COUNT,
    DIVISOR, LEVELS,
};

use crate::error::{Error, Result};

const PLAN_KEY: &str = "meta.channel_plan";
const ADAM_T_KEY: &str = "adam.t";

/// Detector weights and optional optimizer state, as stored on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: UnetParams,
    pub adam: Option<AdamState>,
    /// Extra scalars (e.g. training step) keyed by name.
    pub extras: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let plan = self.net.plan().0;
        let mut out = vec![NamedTensor::new(
            PLAN_KEY,
            vec![plan.len()],
            plan.iter().map(|&c| c as f64).collect(),
        )];
        for p in self.net.params.iter().chain(&self.net.buffers) {
            out.push(NamedTensor::new(p.name.clone(), p.dims.clone(), p.data.clone()));
        }
        if let Some(adam) = &self.adam {
            out.push(NamedTensor::scalar(ADAM_T_KEY, adam.t as f64));
            for (i, p) in self.net.params.iter().enumerate() {
                out.push(NamedTensor::new(format!("adam.m.{}", p.name), p.dims.clone(), adam.m[i].clone()));
                out.push(NamedTensor::new(format!("adam.v.{}", p.name), p.dims.clone(), adam.v[i].clone()));
            }
        }
        out.extend(self.extras.iter().cloned());
        out
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, NamedTensor> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let plan_t = map
            .remove(PLAN_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("missing {PLAN_KEY}")))?;
        if plan_t.data.len() != LEVELS {
            return Err(Error::Checkpoint("channel plan must have 4 entries".into()));
        }
        let mut plan = [0usize; LEVELS];
        for (dst, v) in plan.iter_mut().zip(&plan_t.data) {
            *dst = *v as usize;
        }
        let mut net = UnetParams::zeroed(ChannelPlan(plan))?;
        for p in net.params.iter_mut().chain(net.buffers.iter_mut()) {
            let t = map
                .remove(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.dims != p.dims {
                return Err(Error::Checkpoint(format!(
                    "{}: expected dims {:?}, found {:?}",
                    p.name, p.dims, t.dims
                )));
            }
            p.data = t.data;
        }
        let adam = match map.remove(ADAM_T_KEY) {
            Some(t) => {
                let mut st = AdamState::new(&net.params);
                st.t = t.data.first().copied().unwrap_or(0.0) as u64;
                for (i, p) in net.params.iter().enumerate() {
                    for (which, dst) in [("m", &mut st.m[i]), ("v", &mut st.v[i])] {
                        let key = format!("adam.{which}.{}", p.name);
                        let t = map
                            .remove(&key)
                            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                        if t.data.len() != dst.len() {
                            return Err(Error::Checkpoint(format!("{key}: wrong length")));
                        }
                        *dst = t.data;
                    }
                }
                Some(st)
            }
            None => None,
        };
        let mut extras: Vec<NamedTensor> = map.into_values().collect();
        extras.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Checkpoint { net, adam, extras })
    }

    pub fn extra_scalar(&self, name: &str) -> Option<f64> {
        self.extras.iter().find(|t| t.name == name).and_then(|t| t.data.first().copied())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(checkpoint::read(path)?)
    }
}
