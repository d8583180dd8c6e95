//! Synthetic deformable-shape datasets, their JSON Lines file format and
//! split construction.
//!
//! File layout: the first line is a header `{"n_max": .., "categories": [..]}`,
//! every later line one sample
//! `{"category", "w2d": [[x, y]..], "s3d": [[x, y, z]..] | null, "mask": [0|1..], "edges": [[i, j]..]}`.
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

mod shapes;
mod synth;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use shapes::{
    builtin, chain, humanoid15, humanoid17, shape_diameter, star, BasisShapeModel, HUMANOID15_EDGES, HUMANOID15_KEEP,
    HUMANOID17_EDGES, HUMANOID17_JOINTS,
};
pub use synth::{category_seed, generate, generate_category, make_ood_split, CategorySpec, DatasetSpec};

use crate::error::{Error, Result};
use crate::keypoints::{KeypointSet2D, KeypointSet3D, Sample, SkeletonGraph, VisibilityMask};

/// Every stored sample must keep at least this many visible joints.
pub const MIN_VISIBLE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_max: usize,
    /// Category names in order of first appearance.
    pub categories: Vec<String>,
}

fn category_order(samples: &[Sample]) -> Vec<String> {
    let mut seen = Vec::new();
    for s in samples {
        if !seen.contains(&s.category_id) {
            seen.push(s.category_id.clone());
        }
    }
    seen
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let n_max = samples.iter().map(Sample::len).max().unwrap_or(0);
        Self::with_n_max(samples, n_max)
    }

    pub fn with_n_max(samples: Vec<Sample>, n_max: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            s.validate(MIN_VISIBLE)
                .map_err(|e| Error::Validation(format!("sample {i}: {e}")))?;
            if s.len() > n_max {
                return Err(Error::Validation(format!(
                    "sample {i} has {} joints, dataset n_max is {n_max}",
                    s.len()
                )));
            }
        }
        let categories = category_order(&samples);
        Ok(Self {
            samples,
            n_max,
            categories,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by category.
    pub fn category_index(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut idx: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            idx.entry(s.category_id.as_str()).or_default().push(i);
        }
        idx
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n_max: usize,
    categories: Vec<String>,
}

/// One sample line. Prediction files reuse this layout with extra fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub category: String,
    pub w2d: Vec<[f64; 2]>,
    pub s3d: Option<Vec<[f64; 3]>>,
    pub mask: Vec<u8>,
    pub edges: Vec<[usize; 2]>,
}

pub fn rows<const K: usize>(a: &Array2<f64>) -> Vec<[f64; K]> {
    a.rows().into_iter().map(|r| std::array::from_fn(|k| r[k])).collect()
}

pub fn from_rows<const K: usize>(rows: &[[f64; K]]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), K), |(i, k)| rows[i][k])
}

impl SampleRecord {
    pub fn from_sample(s: &Sample) -> Self {
        Self {
            category: s.category_id.clone(),
            w2d: rows(s.w2d.coords()),
            s3d: s.s3d_gt.as_ref().map(|g| rows(g.coords())),
            mask: s.mask.to_bits(),
            edges: s.skeleton.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }

    pub fn to_sample(&self) -> Result<Sample> {
        let n = self.w2d.len();
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        let sample = Sample {
            w2d: KeypointSet2D::new(from_rows(&self.w2d))?,
            s3d_gt: self
                .s3d
                .as_ref()
                .map(|g| KeypointSet3D::new(from_rows(g)))
                .transpose()?,
            mask: VisibilityMask::from_bits(&self.mask)?,
            skeleton: SkeletonGraph::from_edges(n, &edges)?,
            category_id: self.category.clone(),
        };
        sample.validate(MIN_VISIBLE)?;
        Ok(sample)
    }
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        n_max: d.n_max,
        categories: d.categories.clone(),
    };
    let mut write_line = |v: String| writeln!(out, "{v}").map_err(|e| Error::io(path, e));
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for s in &d.samples {
        write_line(serde_json::to_string(&SampleRecord::from_sample(s)).expect("sample serializes"))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads sample lines of a dataset or prediction file. Fields beyond the
/// dataset schema are ignored.
pub(crate) fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(usize, Vec<(usize, T)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header record".into(),
            })
        }
    };
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push((idx + 1, rec));
    }
    Ok((header.n_max, records))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (n_max, records) = read_records::<SampleRecord>(path)?;
    let samples = records
        .into_iter()
        .map(|(line, r)| {
            r.to_sample()
                .map_err(|e| Error::Validation(format!("line {line}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::with_n_max(samples, n_max)
}

/// Restricts every sample to `keep_joints` and installs `remap_skeleton`
/// (edges in the new indices). Samples left with fewer than three visible
/// joints are dropped; the number dropped is returned and logged. Category
/// names gain a `-sub<k>` suffix unless the rig is left untouched.
pub fn rig_subset(d: &Dataset, keep_joints: &[usize], remap_skeleton: &[(usize, usize)]) -> Result<(Dataset, usize)> {
    if keep_joints.is_empty() {
        return Err(Error::Spec("keep list is empty".into()));
    }
    let mut sorted = keep_joints.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Spec("keep list repeats a joint".into()));
    }
    let k = keep_joints.len();
    let skeleton = SkeletonGraph::from_edges(k, remap_skeleton).map_err(|e| Error::Spec(e.to_string()))?;
    let mut samples = Vec::with_capacity(d.len());
    let mut dropped = 0;
    for (i, s) in d.samples.iter().enumerate() {
        if let Some(&bad) = keep_joints.iter().find(|&&j| j >= s.len()) {
            return Err(Error::Spec(format!(
                "sample {i} has {} joints, cannot keep joint {bad}",
                s.len()
            )));
        }
        let mask = VisibilityMask::new(keep_joints.iter().map(|&j| s.mask.is_visible(j)).collect());
        if mask.count_visible() < MIN_VISIBLE {
            dropped += 1;
            continue;
        }
        let unchanged = k == s.len() && keep_joints.iter().enumerate().all(|(a, &b)| a == b) && skeleton == s.skeleton;
        samples.push(Sample {
            w2d: KeypointSet2D::new(s.w2d.coords().select(Axis(0), keep_joints))?,
            s3d_gt: s
                .s3d_gt
                .as_ref()
                .map(|g| KeypointSet3D::new(g.coords().select(Axis(0), keep_joints)))
                .transpose()?,
            mask,
            skeleton: skeleton.clone(),
            category_id: if unchanged {
                s.category_id.clone()
            } else {
                format!("{}-sub{k}", s.category_id)
            },
        });
    }
    if dropped > 0 {
        log::warn!("rig subset dropped {dropped} samples with fewer than {MIN_VISIBLE} visible joints");
    }
    let n_max = samples.iter().map(Sample::len).max().unwrap_or(0);
    Ok((Dataset::with_n_max(samples, n_max)?, dropped))
}
