//! Train/validation/test partitioning and the on-disk dataset layout:
//! `<root>/cases/<id>/` per subject plus `<root>/splits.json`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantom::{generate_phantom, PhantomError, PhantomParams};
use crate::seed::{derive_seed, rng_for};
use crate::volume::{io_err, PatientCase, VolumeError};

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no cases to split")]
    Empty,
    #[error("ratios {0:?} must be nonnegative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("split {0} has a nonzero ratio but would receive no case")]
    EmptySplit(&'static str),
    #[error("split `{0}` missing from manifest")]
    MissingSplit(String),
    #[error("split `{0}` is empty")]
    EmptyNamedSplit(String),
    #[error("malformed split manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

/// Case counts per split by largest remainder; ties go to the earlier split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios));
    }
    let exact = ratios.map(|r| r * n as f64);
    let mut sizes = exact.map(|e| e.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[k] > 0.0 {
            sizes[k] += 1;
            left -= 1;
        }
    }
    for (k, name) in ["train", "val", "test"].into_iter().enumerate() {
        if ratios[k] > 0.0 && sizes[k] == 0 {
            return Err(DatasetError::EmptySplit(name));
        }
    }
    Ok(sizes)
}

/// Deterministic shuffled partition into (train, val, test).
pub fn split_dataset<T: Clone>(
    cases: &[T],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), DatasetError> {
    if cases.is_empty() {
        return Err(DatasetError::Empty);
    }
    let [a, b, _] = split_sizes(cases.len(), ratios)?;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut rng_for(seed, "dataset.split"));
    let pick = |idx: &[usize]| idx.iter().map(|&i| cases[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..a]), pick(&order[a..a + b]), pick(&order[a + b..])))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self, DatasetError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn split(&self, name: &str) -> Result<&[String], DatasetError> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(DatasetError::MissingSplit(other.to_string())),
        }
    }
}

/// `count` phantoms named `case0000`, `case0001`, ... each seeded from
/// `seed` and its index, split by `ratios`.
pub fn phantom_cohort(
    count: usize,
    dims: [usize; 3],
    seed: u64,
    params: &PhantomParams,
    ratios: [f64; 3],
) -> Result<(Vec<PatientCase>, SplitManifest), DatasetError> {
    let cases = (0..count)
        .into_par_iter()
        .map(|i| {
            let id = format!("case{i:04}");
            let s = derive_seed(seed, &format!("phantom.{id}"));
            Ok(generate_phantom(id, s, dims, params)?.case)
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let (train, val, test) = split_dataset(&ids, ratios, seed)?;
    Ok((cases, SplitManifest { train, val, test }))
}

pub fn write_dataset(root: impl AsRef<Path>, cases: &[PatientCase], manifest: &SplitManifest) -> Result<(), DatasetError> {
    let root = root.as_ref();
    for c in cases {
        c.write_dir(root.join("cases").join(&c.id))?;
    }
    let p = root.join("splits.json");
    let body = serde_json::to_vec_pretty(manifest)?;
    fs::write(&p, body).map_err(io_err(&p))?;
    Ok(())
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<SplitManifest, DatasetError> {
    let p = root.as_ref().join("splits.json");
    let bytes = fs::read(&p).map_err(io_err(&p))?;
    SplitManifest::from_json(&bytes)
}

/// Loads every case of one named split.
pub fn load_split(root: impl AsRef<Path>, name: &str) -> Result<Vec<PatientCase>, DatasetError> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let ids = manifest.split(name)?;
    if ids.is_empty() {
        return Err(DatasetError::EmptyNamedSplit(name.to_string()));
    }
    ids.iter()
        .map(|id| Ok(PatientCase::read_dir(root.join("cases").join(id))?))
        .collect()
}
