//! Synthetic PET/CT subjects with ellipsoidal hot lesions.
//!
//! CT: an elliptic body of soft tissue (smoothly varying around 0 HU) in
//! -1000 HU air, plus Gaussian noise. PET: low background uptake inside the
//! body plus one Gaussian blob per lesion, plus noise. The mask marks voxels
//! where some lesion's noise-free intensity exceeds a fixed fraction of that
//! lesion's peak.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::volume::{Modality, PatientCase, Volume};

pub const MIN_EXTENT: usize = 16;
pub const MAX_LESIONS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    /// inclusive
    pub lesion_count: [usize; 2],
    pub peak_suv: [f64; 2],
    /// per-axis Gaussian width of a lesion, voxels
    pub lesion_sigma: [f64; 2],
    pub pet_background: f64,
    pub pet_noise: f64,
    pub ct_noise: f64,
    /// mask threshold as a fraction of each lesion's peak
    pub mask_fraction: f64,
    pub spacing: [f64; 3],
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            lesion_count: [1, 3],
            peak_suv: [4.0, 15.0],
            lesion_sigma: [2.5, 4.0],
            pet_background: 1.0,
            pet_noise: 0.1,
            ct_noise: 20.0,
            mask_fraction: 0.4,
            spacing: [4.0, 4.0, 4.0],
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("every extent must be at least {MIN_EXTENT}, got {0:?}")]
    InvalidDims([usize; 3]),
    #[error("lesion count range {0:?} must lie within [0, {MAX_LESIONS}]")]
    InvalidLesionRange([usize; 2]),
    #[error("invalid parameter: {0}")]
    InvalidParams(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lesion {
    pub center: [f64; 3],
    pub sigma: [f64; 3],
    pub peak: f64,
}

impl Lesion {
    /// Noise-free SUV contribution at voxel `p`.
    pub fn intensity(&self, p: [f64; 3]) -> f64 {
        let q: f64 = (0..3)
            .map(|k| ((p[k] - self.center[k]) / self.sigma[k]).powi(2))
            .sum();
        self.peak * (-0.5 * q).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub case: PatientCase,
    pub lesions: Vec<Lesion>,
}

fn inside_body(p: [f64; 3], dims: [usize; 3]) -> bool {
    let q: f64 = (0..3)
        .map(|k| {
            let c = (dims[k] as f64 - 1.0) / 2.0;
            let r = 0.46 * dims[k] as f64;
            ((p[k] - c) / r).powi(2)
        })
        .sum();
    q <= 1.0
}

pub fn generate_phantom(
    id: impl Into<String>,
    seed: u64,
    dims: [usize; 3],
    params: &PhantomParams,
) -> Result<Phantom, PhantomError> {
    if dims.iter().any(|&d| d < MIN_EXTENT) {
        return Err(PhantomError::InvalidDims(dims));
    }
    let [lo, hi] = params.lesion_count;
    if lo > hi || hi > MAX_LESIONS {
        return Err(PhantomError::InvalidLesionRange(params.lesion_count));
    }
    if !(params.peak_suv[0] > 0.0 && params.peak_suv[0] <= params.peak_suv[1]) {
        return Err(PhantomError::InvalidParams("peak_suv"));
    }
    if !(params.lesion_sigma[0] > 0.0 && params.lesion_sigma[0] <= params.lesion_sigma[1]) {
        return Err(PhantomError::InvalidParams("lesion_sigma"));
    }
    if !(params.mask_fraction > 0.0 && params.mask_fraction < 1.0) {
        return Err(PhantomError::InvalidParams("mask_fraction"));
    }
    if !(params.pet_noise >= 0.0 && params.ct_noise >= 0.0) {
        return Err(PhantomError::InvalidParams("noise"));
    }

    let mut rng = rng_for(seed, "phantom.layout");
    let count = rng.random_range(lo..=hi);
    let mut lesions = Vec::with_capacity(count);
    while lesions.len() < count {
        let sigma = [0; 3].map(|_| rng.random_range(params.lesion_sigma[0]..=params.lesion_sigma[1]));
        let center: [f64; 3] = std::array::from_fn(|k| {
            let margin = (1.5 * sigma[k]).min(dims[k] as f64 / 3.0);
            rng.random_range(margin..=dims[k] as f64 - 1.0 - margin)
        });
        if !inside_body(center, dims) {
            continue;
        }
        let peak = rng.random_range(params.peak_suv[0]..=params.peak_suv[1]);
        lesions.push(Lesion { center, sigma, peak });
    }
    // smooth tissue texture
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));

    let n = dims[0] * dims[1] * dims[2];
    let mut ct = Vec::with_capacity(n);
    let mut pet = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut noise = rng_for(seed, "phantom.noise");
    let ct_noise = Normal::new(0.0, params.ct_noise).expect("finite sigma");
    let pet_noise = Normal::new(0.0, params.pet_noise).expect("finite sigma");
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let p = [x as f64, y as f64, z as f64];
                let u: [f64; 3] = std::array::from_fn(|k| 2.0 * PI * p[k] / dims[k] as f64 + phase[k]);
                let body = inside_body(p, dims);
                let texture = u[0].sin() * u[1].cos() + 0.5 * u[2].sin();
                let ct_base = if body { 30.0 + 45.0 * texture } else { -1000.0 };
                let pet_base = if body {
                    params.pet_background * (1.0 + 0.15 * texture)
                } else {
                    0.05 * params.pet_background
                };
                let mut uptake = 0.0;
                let mut in_mask = false;
                for l in &lesions {
                    let v = l.intensity(p);
                    uptake += v;
                    in_mask |= v > params.mask_fraction * l.peak;
                }
                ct.push((ct_base + ct_noise.sample(&mut noise)) as f32);
                pet.push((pet_base + uptake + pet_noise.sample(&mut noise)).max(0.0) as f32);
                mask.push(if in_mask { 1.0 } else { 0.0 });
            }
        }
    }

    let sp = params.spacing;
    let vol = |m, v| Volume::new(dims, sp, m, v).expect("generated volumes are valid");
    let case = PatientCase::new(id, vol(Modality::Pet, pet), vol(Modality::Ct, ct), vol(Modality::Mask, mask))
        .expect("shared dims");
    Ok(Phantom { case, lesions })
}
