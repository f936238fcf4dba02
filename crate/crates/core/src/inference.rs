//! Whole-volume prediction by overlapping windows. Masses from every window
//! covering a voxel are averaged and then renormalized to sum to one.

use thiserror::Error;

use crate::backbone::{concat_modalities, BackboneConfig, BackboneError};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::evidential::{decide, Decision, MassFunction, MassMap};
use crate::graph::ParamSet;
use crate::model::{predict_masses, HeadKind};
use crate::tensor::{Tensor, TensorError};
use crate::volume::{PatientCase, VolumeError};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input must be [channels, X, Y, Z], got {0:?}")]
    BadInput(Vec<usize>),
}

/// Window origins along one axis: every `stride` from 0, plus a final
/// window flush with the far edge. `window` must not exceed `dim`.
pub fn window_starts(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = dim - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Copies the box at `origin` of extent `size` out of a `dims` grid.
pub fn crop_grid<T: Copy>(data: &[T], dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(size.iter().product());
    for x in origin[0]..origin[0] + size[0] {
        for y in origin[1]..origin[1] + size[1] {
            let row = (x * dims[1] + y) * dims[2] + origin[2];
            out.extend_from_slice(&data[row..row + size[2]]);
        }
    }
    out
}

/// Crops every channel of a `[C, X, Y, Z]` tensor.
pub fn crop_channels<F: crate::Real>(
    t: &Tensor<F>,
    origin: [usize; 3],
    size: [usize; 3],
) -> Result<Tensor<F>, InferenceError> {
    let &[c, x, y, z] = t.shape() else {
        return Err(InferenceError::BadInput(t.shape().to_vec()));
    };
    let plane = x * y * z;
    let mut data = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in t.data().chunks(plane) {
        data.extend(crop_grid(ch, [x, y, z], origin, size));
    }
    Ok(Tensor::new(vec![c, size[0], size[1], size[2]], data)?)
}

/// Fused masses for a `[2, X, Y, Z]` input.
pub fn sliding_window_masses(
    params: &ParamSet<f32>,
    backbone: &BackboneConfig,
    head: HeadKind,
    input: &Tensor<f32>,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<MassMap, InferenceError> {
    let &[_, x, y, z] = input.shape() else {
        return Err(InferenceError::BadInput(input.shape().to_vec()));
    };
    let dims = [x, y, z];
    let size = [0, 1, 2].map(|a| window[a].min(dims[a]));
    backbone.check_dims(size)?;
    let n = x * y * z;
    let mut sums = vec![[0.0f64; 3]; n];
    let mut hits = vec![0u32; n];
    let starts = [0, 1, 2].map(|a| window_starts(dims[a], size[a], stride[a]));
    for &ox in &starts[0] {
        for &oy in &starts[1] {
            for &oz in &starts[2] {
                let origin = [ox, oy, oz];
                let patch = crop_channels(input, origin, size)?;
                let mut shape = vec![1];
                shape.extend_from_slice(patch.shape());
                let m = predict_masses(params, backbone, head, patch.reshaped(&shape)?)?;
                let mut k = 0;
                for px in ox..ox + size[0] {
                    for py in oy..oy + size[1] {
                        for pz in oz..oz + size[2] {
                            let v = (px * y + py) * z + pz;
                            let src = &m.data()[3 * k..3 * k + 3];
                            for (s, &mv) in sums[v].iter_mut().zip(src) {
                                *s += mv as f64;
                            }
                            hits[v] += 1;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    let masses = sums
        .iter()
        .zip(&hits)
        .map(|(s, &h)| {
            let avg = s.map(|v| v / h as f64);
            let total: f64 = avg.iter().sum();
            MassFunction::new(avg[0] / total, avg[1] / total, avg[2] / total)
        })
        .collect();
    Ok(MassMap::new(dims, masses)?)
}

/// Trained parameters together with the configuration they were built for.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn new(config: RunConfig, params: ParamSet<f32>) -> Self {
        Self { config, params }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self::new(ck.config, ck.params)
    }

    pub fn predict_input(&self, input: &Tensor<f32>) -> Result<MassMap, InferenceError> {
        let c = &self.config;
        sliding_window_masses(&self.params, &c.backbone, c.es.head, input, c.eval.window, c.eval.stride)
    }

    pub fn predict_case(&self, case: &PatientCase) -> Result<MassMap, InferenceError> {
        self.predict_input(&concat_modalities(&case.pet, &case.ct)?)
    }

    pub fn segment(&self, case: &PatientCase) -> Result<Decision, InferenceError> {
        Ok(decide(&self.predict_case(case)?, self.config.eval.decision))
    }
}
