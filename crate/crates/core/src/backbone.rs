//! Slim UNet-style encoder/decoder producing a per-voxel feature vector.
//!
//! Each encoder level applies two same-padded convolutions with ReLU, then
//! 2x max pooling (except the deepest level). Each decoder level upsamples
//! by 2 (nearest), convolves down to the skip width with ReLU, concatenates
//! the skip connection, and applies two more conv+ReLU. A final 1^3
//! convolution without activation yields the features consumed by the head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv::{concat_channels, conv3d, max_pool2, upsample2};
use crate::graph::{Graph, GraphError, ParamSet, Var};
use crate::ops;
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor, TensorError};
use crate::volume::{normalize, Modality, NormalizationSpec, Volume, VolumeError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// feature width per resolution level, finest first
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![4, 8, 16],
            in_channels: 2,
            kernel: 3,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("spatial dims {dims:?} must be multiples of {multiple}; pad by {padding:?}")]
    IndivisibleDims {
        dims: [usize; 3],
        multiple: usize,
        padding: [usize; 3],
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial extents must be divisible by this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    /// Width of the feature vectors handed to the head.
    pub fn feature_dim(&self) -> usize {
        self.channels[0]
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: &str| Err(BackboneError::Config(m.to_string()));
        if self.channels.len() < 2 {
            return bad("need at least two resolution levels");
        }
        if self.channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<(), BackboneError> {
        let m = self.required_multiple();
        let padding = dims.map(|d| (m - d % m) % m);
        if dims.contains(&0) || padding != [0; 3] {
            return Err(BackboneError::IndivisibleDims { dims, multiple: m, padding });
        }
        Ok(())
    }

    /// `(name, shape)` for every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let conv = |name: String, co: usize, ci: usize, k: usize| {
            [
                (format!("{name}.weight"), vec![co, ci, k, k, k]),
                (format!("{name}.bias"), vec![co]),
            ]
        };
        let mut out = Vec::new();
        let mut prev = self.in_channels;
        for (l, &c) in self.channels.iter().enumerate() {
            out.extend(conv(format!("backbone.enc{l}.conv1"), c, prev, k));
            out.extend(conv(format!("backbone.enc{l}.conv2"), c, c, k));
            prev = c;
        }
        for l in (0..self.levels() - 1).rev() {
            let c = self.channels[l];
            out.extend(conv(format!("backbone.dec{l}.up"), c, self.channels[l + 1], k));
            out.extend(conv(format!("backbone.dec{l}.conv1"), c, 2 * c, k));
            out.extend(conv(format!("backbone.dec{l}.conv2"), c, c, k));
        }
        let c0 = self.channels[0];
        out.extend(conv("backbone.head".to_string(), c0, c0, 1));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// He-style uniform weights scaled by fan-in, zero biases.
pub fn init_backbone<F: Real>(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet<F>, BackboneError> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "init.backbone");
    let mut p = ParamSet::new();
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        p.insert(name, Tensor::from_f64_slice(&shape, &data).expect("shape from config"));
    }
    Ok(p)
}

fn conv_named<F: Real>(g: &mut Graph<F>, x: Var, name: &str, relu: bool) -> Result<Var, GraphError> {
    let w = g.param_var(&format!("{name}.weight"))?;
    let b = g.param_var(&format!("{name}.bias"))?;
    let y = conv3d(g, x, w, b)?;
    Ok(if relu { ops::relu(g, y) } else { y })
}

/// Features `[B, C0, X, Y, Z]` from input `[B, in_channels, X, Y, Z]`, using
/// parameters already bound in `g`.
pub fn forward_features<F: Real>(g: &mut Graph<F>, cfg: &BackboneConfig, input: Var) -> Result<Var, BackboneError> {
    cfg.validate()?;
    match *g.shape(input) {
        [_, c, x, y, z] if c == cfg.in_channels => cfg.check_dims([x, y, z])?,
        ref s => {
            return Err(GraphError::from(TensorError::ShapeMismatch {
                op: "backbone",
                detail: format!("expected [B, {}, X, Y, Z], got {s:?}", cfg.in_channels),
            })
            .into())
        }
    }
    let mut x = input;
    let mut skips = Vec::with_capacity(cfg.levels() - 1);
    for l in 0..cfg.levels() {
        x = conv_named(g, x, &format!("backbone.enc{l}.conv1"), true)?;
        x = conv_named(g, x, &format!("backbone.enc{l}.conv2"), true)?;
        if l + 1 < cfg.levels() {
            skips.push(x);
            x = max_pool2(g, x)?;
        }
    }
    for l in (0..cfg.levels() - 1).rev() {
        let up = upsample2(g, x)?;
        let up = conv_named(g, up, &format!("backbone.dec{l}.up"), true)?;
        let cat = concat_channels(g, skips[l], up)?;
        x = conv_named(g, cat, &format!("backbone.dec{l}.conv1"), true)?;
        x = conv_named(g, x, &format!("backbone.dec{l}.conv2"), true)?;
    }
    Ok(conv_named(g, x, "backbone.head", false)?)
}

/// Normalized two-channel input `[2, X, Y, Z]` (PET first).
pub fn concat_modalities(pet: &Volume, ct: &Volume) -> Result<Tensor<f32>, VolumeError> {
    if pet.dims != ct.dims {
        return Err(VolumeError::DimMismatch(pet.dims, ct.dims));
    }
    let p = normalize(pet, NormalizationSpec::for_modality(Modality::Pet).expect("pet spec"))?;
    let c = normalize(ct, NormalizationSpec::for_modality(Modality::Ct).expect("ct spec"))?;
    let [x, y, z] = pet.dims;
    let mut data = p.voxels;
    data.extend_from_slice(&c.voxels);
    Ok(Tensor::new(vec![2, x, y, z], data).expect("two volumes of equal dims"))
}

/// Stacks equally shaped samples along a new leading batch axis.
pub fn stack_batch<F: Real>(samples: &[&Tensor<F>]) -> Result<Tensor<F>, TensorError> {
    let Some(first) = samples.first() else {
        return Err(TensorError::ZeroExtent(vec![0]));
    };
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * samples.len());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "stack_batch",
                detail: format!("{:?} vs {:?}", s.shape(), first.shape()),
            });
        }
        data.extend_from_slice(s.data());
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features_for(cfg: &BackboneConfig, params: &ParamSet<f64>, input: Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        g.bind(params).unwrap();
        let x = g.constant(input);
        let f = forward_features(&mut g, cfg, x).unwrap();
        g.value(f).clone()
    }

    #[test]
    fn output_shape_and_width() {
        let cfg = BackboneConfig {
            channels: vec![8, 16],
            ..Default::default()
        };
        let params = init_backbone::<f64>(&cfg, 0).unwrap();
        let out = features_for(&cfg, &params, Tensor::zeros(&[1, 2, 16, 16, 16]));
        assert_eq!(out.shape(), [1, 8, 16, 16, 16]);
    }

    #[test]
    fn five_level_widths_keep_dims() {
        let cfg = BackboneConfig {
            channels: vec![8, 16, 32, 64, 128],
            ..Default::default()
        };
        assert_eq!(cfg.required_multiple(), 16);
        assert!(cfg.check_dims([32, 32, 32]).is_ok());
    }

    #[test]
    fn first_conv_weight_count() {
        let cfg = BackboneConfig {
            channels: vec![4, 8],
            ..Default::default()
        };
        let params = init_backbone::<f32>(&cfg, 1).unwrap();
        assert_eq!(params.get("backbone.enc0.conv1.weight").unwrap().len(), 216);
        assert_eq!(params.element_count(), cfg.param_count());
    }

    #[test]
    fn indivisible_dims_report_padding() {
        let cfg = BackboneConfig::default();
        let err = cfg.check_dims([30, 32, 33]).unwrap_err();
        assert_eq!(
            err,
            BackboneError::IndivisibleDims {
                dims: [30, 32, 33],
                multiple: 4,
                padding: [2, 0, 3]
            }
        );
    }

    #[test]
    fn zero_skip_weights_change_output() {
        // the finest decoder conv sees [skip, up]; silencing the skip half of
        // its weights must alter the features
        let cfg = BackboneConfig {
            channels: vec![2, 4],
            ..Default::default()
        };
        let params = init_backbone::<f64>(&cfg, 3).unwrap();
        let n = 2 * 8 * 8 * 8;
        let input: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64) / 11.0).collect();
        let input = Tensor::from_f64_slice(&[1, 2, 8, 8, 8], &input).unwrap();
        let base = features_for(&cfg, &params, input.clone());
        let mut cut = params.clone();
        let w = cut.get_mut("backbone.dec0.conv1.weight").unwrap();
        let kk = 27;
        for co in 0..2 {
            for ci in 0..2 {
                let off = (co * 4 + ci) * kk;
                w.data_mut()[off..off + kk].fill(0.0);
            }
        }
        let changed = features_for(&cfg, &cut, input);
        let diff: f64 = base.data().iter().zip(changed.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn concat_modalities_layout() {
        let pet = Volume::new([8, 8, 8], [1.0; 3], Modality::Pet, vec![10.0; 512]).unwrap();
        let ct = Volume::new([8, 8, 8], [1.0; 3], Modality::Ct, vec![0.0; 512]).unwrap();
        let t = concat_modalities(&pet, &ct).unwrap();
        assert_eq!(t.shape(), [2, 8, 8, 8]);
        assert!((t.data()[0] - 1.0).abs() < 1e-6);
        assert!((t.data()[512] - 0.5).abs() < 1e-6);
        let small = Volume::new([8, 8, 4], [1.0; 3], Modality::Ct, vec![0.0; 256]).unwrap();
        assert!(concat_modalities(&pet, &small).is_err());
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let cfg = BackboneConfig::default();
        let params = init_backbone::<f64>(&cfg, 0).unwrap();
        let mut g = Graph::new();
        g.bind(&params).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8, 8]));
        assert!(forward_features(&mut g, &cfg, x).is_err());
    }
}
