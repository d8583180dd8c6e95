//! Seeded sampling of projected, partially occluded shapes.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::shapes::{builtin, BasisShapeModel};
use super::Dataset;
use crate::error::{Error, Result};
use crate::keypoints::{KeypointSet2D, KeypointSet3D, Sample, VisibilityMask};
use crate::kv;
use crate::procrustes::random_rotation;

#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpec {
    pub model: BasisShapeModel,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub categories: Vec<CategorySpec>,
    pub noise_std: f64,
    pub occlusion_rate: f64,
    pub min_visible: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(categories: Vec<CategorySpec>, seed: u64) -> Self {
        Self {
            categories,
            noise_std: 0.0,
            occlusion_rate: 0.0,
            min_visible: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.iter().any(|c| c.count == 0) {
            return Err(Error::Spec("category counts must be positive".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Spec(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(Error::Spec(format!(
                "occlusion_rate must lie in [0, 1), got {}",
                self.occlusion_rate
            )));
        }
        if self.min_visible < 3 {
            return Err(Error::Spec(format!(
                "min_visible must be at least 3, got {}",
                self.min_visible
            )));
        }
        if let Some(c) = self.categories.iter().find(|c| c.model.num_joints() < self.min_visible) {
            return Err(Error::Spec(format!(
                "category `{}` has {} joints, fewer than min_visible = {}",
                c.model.category_id,
                c.model.num_joints(),
                self.min_visible
            )));
        }
        let mut names: Vec<&str> = self.categories.iter().map(|c| c.model.category_id.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Spec("category names must be unique".into()));
        }
        Ok(())
    }

    /// Parses a flat spec file:
    ///
    /// ```text
    /// seed = 7
    /// noise_std = 0.01
    /// occlusion_rate = 0.1
    /// min_visible = 3
    /// category = chain8 100
    /// category = humanoid17 50 0.5   # optional coefficient scale
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::new(Vec::new(), 0);
        for e in kv::parse(text)? {
            match e.key.as_str() {
                "seed" => spec.seed = e.parsed()?,
                "noise_std" => spec.noise_std = e.parsed()?,
                "occlusion_rate" => spec.occlusion_rate = e.parsed()?,
                "min_visible" => spec.min_visible = e.parsed()?,
                "category" => {
                    let parts: Vec<&str> = e.value.split_whitespace().collect();
                    let bad = |m: String| Error::Parse {
                        line: e.line,
                        message: m,
                    };
                    if !(2..=3).contains(&parts.len()) {
                        return Err(bad("expected `category = <name> <count> [coeff_scale]`".into()));
                    }
                    let mut model = builtin(parts[0]).map_err(|err| bad(err.to_string()))?;
                    let count = parts[1].parse().map_err(|_| bad(format!("bad count `{}`", parts[1])))?;
                    if let Some(s) = parts.get(2) {
                        model.coeff_scale = s.parse().map_err(|_| bad(format!("bad coefficient scale `{s}`")))?;
                    }
                    spec.categories.push(CategorySpec { model, count });
                }
                _ => return Err(e.unknown()),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn total(&self) -> usize {
        self.categories.iter().map(|c| c.count).sum()
    }
}

/// Seed of the `index`-th category stream.
pub fn category_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_category(model: &BasisShapeModel, count: usize, spec: &DatasetSpec, seed: u64) -> Result<Vec<Sample>> {
    let n = model.num_joints();
    if spec.min_visible > n {
        return Err(Error::Spec(format!(
            "min_visible = {} cannot be met by `{}` with {n} joints",
            spec.min_visible, model.category_id
        )));
    }
    if !(0.0..1.0).contains(&spec.occlusion_rate) {
        return Err(Error::Spec(format!(
            "occlusion_rate must lie in [0, 1), got {}",
            spec.occlusion_rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeff = Normal::new(0.0, model.coeff_scale).map_err(|e| Error::Spec(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Spec(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let c: Vec<f64> = (0..model.bases.len()).map(|_| coeff.sample(&mut rng)).collect();
        let s = model.shape_for(&c);
        let r = random_rotation(&mut rng);
        let mut cam = Array2::zeros((n, 3));
        for i in 0..n {
            for k in 0..3 {
                cam[[i, k]] = (0..3).map(|t| s[[i, t]] * r[(t, k)]).sum::<f64>();
            }
        }
        let mut w = Array2::zeros((n, 2));
        for i in 0..n {
            for k in 0..2 {
                w[[i, k]] = cam[[i, k]]
                    + if spec.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
            }
        }
        let flags = loop {
            let f: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= spec.occlusion_rate).collect();
            if f.iter().filter(|&&v| v).count() >= spec.min_visible {
                break f;
            }
        };
        out.push(Sample {
            w2d: KeypointSet2D::new(w)?,
            s3d_gt: Some(KeypointSet3D::new(cam)?),
            mask: VisibilityMask::new(flags),
            skeleton: model.skeleton.clone(),
            category_id: model.category_id.clone(),
        });
    }
    Ok(out)
}

/// All categories of `spec`, in spec order. Each category draws from its
/// own derived seed, so categories generate independently.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let parts: Vec<Result<Vec<Sample>>> = spec
        .categories
        .par_iter()
        .enumerate()
        .map(|(i, c)| generate_category(&c.model, c.count, spec, category_seed(spec.seed, i)))
        .collect();
    let mut samples = Vec::with_capacity(spec.total());
    for p in parts {
        samples.extend(p?);
    }
    Dataset::new(samples)
}

/// Train set without `holdout`, test set with only `holdout`. Samples are
/// drawn exactly as [`generate`] would draw them.
pub fn make_ood_split(spec: &DatasetSpec, holdout: &str) -> Result<(Dataset, Dataset)> {
    if !spec.categories.iter().any(|c| c.model.category_id == holdout) {
        return Err(Error::Spec(format!("holdout category `{holdout}` is not in the spec")));
    }
    let all = generate(spec)?;
    let n_max = all.n_max;
    let (test, train): (Vec<Sample>, Vec<Sample>) = all.samples.into_iter().partition(|s| s.category_id == holdout);
    Ok((Dataset::with_n_max(train, n_max)?, Dataset::with_n_max(test, n_max)?))
}
