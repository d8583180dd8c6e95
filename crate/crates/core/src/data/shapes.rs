//! Linear basis shape models and the built-in category library.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::keypoints::SkeletonGraph;

/// `S = mean_shape + Σ_k c_k B_k` with `c_k ~ N(0, coeff_scale²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisShapeModel {
    pub mean_shape: Array2<f64>,
    pub bases: Vec<Array2<f64>>,
    pub coeff_scale: f64,
    pub skeleton: SkeletonGraph,
    pub category_id: String,
}

fn centered(a: Array2<f64>) -> Array2<f64> {
    let mean = a.mean_axis(Axis(0)).expect("non-empty shape");
    a - &mean.insert_axis(Axis(0))
}

impl BasisShapeModel {
    /// Centers the mean shape and every basis at the origin before
    /// validating.
    pub fn new(
        category_id: impl Into<String>,
        mean_shape: Array2<f64>,
        bases: Vec<Array2<f64>>,
        coeff_scale: f64,
        skeleton: SkeletonGraph,
    ) -> Result<Self> {
        let n = mean_shape.nrows();
        if n == 0 || mean_shape.ncols() != 3 {
            return Err(Error::Spec(format!(
                "mean shape must be n x 3, got {:?}",
                mean_shape.dim()
            )));
        }
        if bases.is_empty() {
            return Err(Error::Spec("a shape model needs at least one basis".into()));
        }
        if let Some(b) = bases.iter().find(|b| b.dim() != (n, 3)) {
            return Err(Error::Spec(format!("basis is {:?}, mean shape is ({n}, 3)", b.dim())));
        }
        if skeleton.len() != n {
            return Err(Error::Spec(format!(
                "skeleton has {} joints, shape has {n}",
                skeleton.len()
            )));
        }
        if !(coeff_scale.is_finite() && coeff_scale >= 0.0) {
            return Err(Error::Spec(format!(
                "coefficient scale must be finite and >= 0, got {coeff_scale}"
            )));
        }
        Ok(Self {
            mean_shape: centered(mean_shape),
            bases: bases.into_iter().map(centered).collect(),
            coeff_scale,
            skeleton,
            category_id: category_id.into(),
        })
    }

    pub fn num_joints(&self) -> usize {
        self.mean_shape.nrows()
    }

    pub fn shape_for(&self, coeffs: &[f64]) -> Array2<f64> {
        let mut s = self.mean_shape.clone();
        for (b, &c) in self.bases.iter().zip(coeffs) {
            s.scaled_add(c, b);
        }
        s
    }

    /// Largest pairwise joint distance of the mean shape.
    pub fn diameter(&self) -> f64 {
        shape_diameter(&self.mean_shape)
    }
}

pub fn shape_diameter(s: &Array2<f64>) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..s.nrows() {
        for j in i + 1..s.nrows() {
            let diff = &s.row(i) - &s.row(j);
            d = d.max(diff.dot(&diff).sqrt());
        }
    }
    d
}

/// FNV-1a, used to give every named category its own fixed random stream.
fn name_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn unit(rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(3, |_| rng.sample::<f64, _>(StandardNormal));
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Deformation bases that move each joint together with its parent, so
/// limbs bend instead of jittering independently.
fn articulated_bases(rng: &mut ChaCha8Rng, parents: &[Option<usize>], k: usize, bone: f64) -> Vec<Array2<f64>> {
    let n = parents.len();
    (0..k)
        .map(|_| {
            let mut b = Array2::<f64>::zeros((n, 3));
            for i in 0..n {
                let local = unit(rng) * (0.5 * bone);
                let base = match parents[i] {
                    Some(p) => b.row(p).to_owned(),
                    None => Array1::zeros(3),
                };
                b.row_mut(i).assign(&(base + local));
            }
            b
        })
        .collect()
}

/// Grows a tree from the given parent table with seeded, smoothly turning
/// bone directions.
fn grow(rng: &mut ChaCha8Rng, parents: &[Option<usize>], bone: f64) -> Array2<f64> {
    let n = parents.len();
    let mut pos = Array2::<f64>::zeros((n, 3));
    let mut dir = Array2::<f64>::zeros((n, 3));
    for i in 0..n {
        match parents[i] {
            None => dir.row_mut(i).assign(&unit(rng)),
            Some(p) => {
                let mut d = dir.row(p).to_owned();
                if d.iter().all(|&v| v == 0.0) {
                    d = unit(rng);
                }
                let turned = &d + &(unit(rng) * 0.8);
                let turned = &turned / turned.dot(&turned).sqrt();
                dir.row_mut(i).assign(&turned);
                let next = &pos.row(p) + &(&turned * bone);
                pos.row_mut(i).assign(&next);
            }
        }
    }
    pos
}

fn edges_from_parents(parents: &[Option<usize>]) -> Vec<(usize, usize)> {
    parents
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (p, i)))
        .collect()
}

/// Articulated chain of `n` joints.
pub fn chain(n: usize) -> Result<BasisShapeModel> {
    if !(2..=64).contains(&n) {
        return Err(Error::Spec(format!("chain length must be in 2..=64, got {n}")));
    }
    let name = format!("chain{n}");
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(&name));
    let parents: Vec<Option<usize>> = (0..n).map(|i| i.checked_sub(1)).collect();
    let bone = 2.0 / (n - 1) as f64;
    let mean = grow(&mut rng, &parents, bone);
    let bases = articulated_bases(&mut rng, &parents, 4, bone);
    let skeleton = SkeletonGraph::from_edges(n, &edges_from_parents(&parents))?;
    BasisShapeModel::new(name, mean, bases, 0.5, skeleton)
}

/// Root joint with `arms` chains of `len` joints each.
pub fn star(arms: usize, len: usize) -> Result<BasisShapeModel> {
    if arms < 2 || len == 0 || 1 + arms * len > 64 {
        return Err(Error::Spec(format!("unsupported star rig {arms}x{len}")));
    }
    let name = format!("star{arms}x{len}");
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(&name));
    let mut parents = vec![None];
    for _ in 0..arms {
        for k in 0..len {
            let p = if k == 0 { 0 } else { parents.len() - 1 };
            parents.push(Some(p));
        }
    }
    let bone = 1.0 / len as f64;
    let mean = grow(&mut rng, &parents, bone);
    let bases = articulated_bases(&mut rng, &parents, 4, bone);
    let skeleton = SkeletonGraph::from_edges(parents.len(), &edges_from_parents(&parents))?;
    BasisShapeModel::new(name, mean, bases, 0.5, skeleton)
}

/// Joint order of the 17-joint humanoid.
pub const HUMANOID17_JOINTS: [&str; 17] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

pub const HUMANOID17_EDGES: [(usize, usize); 16] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (8, 11),
    (11, 12),
    (12, 13),
    (8, 14),
    (14, 15),
    (15, 16),
];

/// Joints of the 17-joint humanoid kept by the 15-joint sub-rig (spine
/// and head top removed).
pub const HUMANOID15_KEEP: [usize; 15] = [0, 1, 2, 3, 4, 5, 6, 8, 9, 11, 12, 13, 14, 15, 16];

/// Skeleton of the 15-joint sub-rig in its own indices; pelvis connects
/// straight to the thorax.
pub const HUMANOID15_EDGES: [(usize, usize); 14] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (7, 9),
    (9, 10),
    (10, 11),
    (7, 12),
    (12, 13),
    (13, 14),
];

const HUMANOID17_MEAN: [[f64; 3]; 17] = [
    [0.0, 0.95, 0.0],
    [-0.12, 0.92, 0.0],
    [-0.13, 0.50, 0.02],
    [-0.13, 0.08, 0.0],
    [0.12, 0.92, 0.0],
    [0.13, 0.50, 0.02],
    [0.13, 0.08, 0.0],
    [0.0, 1.18, 0.01],
    [0.0, 1.42, 0.0],
    [0.0, 1.55, 0.05],
    [0.0, 1.70, 0.0],
    [0.18, 1.42, 0.0],
    [0.22, 1.15, 0.0],
    [0.24, 0.90, 0.02],
    [-0.18, 1.42, 0.0],
    [-0.22, 1.15, 0.0],
    [-0.24, 0.90, 0.02],
];

fn sparse_basis(n: usize, moves: &[(usize, [f64; 3])]) -> Array2<f64> {
    let mut b = Array2::zeros((n, 3));
    for &(j, d) in moves {
        for c in 0..3 {
            b[[j, c]] += d[c];
        }
    }
    b
}

/// 17-joint humanoid with pose bases for arm raising, alternating leg and
/// arm swings, a torso lean and elbow flexion.
pub fn humanoid17() -> Result<BasisShapeModel> {
    let mean = Array2::from_shape_fn((17, 3), |(i, c)| HUMANOID17_MEAN[i][c]);
    let bases = vec![
        sparse_basis(
            17,
            &[
                (12, [0.2, 0.25, 0.0]),
                (13, [0.45, 0.5, 0.0]),
                (15, [-0.2, 0.25, 0.0]),
                (16, [-0.45, 0.5, 0.0]),
            ],
        ),
        sparse_basis(
            17,
            &[
                (5, [0.0, 0.05, 0.3]),
                (6, [0.0, 0.1, 0.45]),
                (15, [0.0, 0.03, 0.2]),
                (16, [0.0, 0.08, 0.4]),
            ],
        ),
        sparse_basis(
            17,
            &[
                (2, [0.0, 0.05, 0.3]),
                (3, [0.0, 0.1, 0.45]),
                (12, [0.0, 0.03, 0.2]),
                (13, [0.0, 0.08, 0.4]),
            ],
        ),
        sparse_basis(
            17,
            &[
                (7, [0.0, 0.0, 0.08]),
                (8, [0.0, -0.03, 0.2]),
                (9, [0.0, -0.05, 0.27]),
                (10, [0.0, -0.08, 0.33]),
                (11, [0.0, -0.03, 0.2]),
                (12, [0.0, -0.03, 0.2]),
                (13, [0.0, -0.03, 0.2]),
                (14, [0.0, -0.03, 0.2]),
                (15, [0.0, -0.03, 0.2]),
                (16, [0.0, -0.03, 0.2]),
            ],
        ),
        sparse_basis(17, &[(13, [-0.1, 0.2, 0.2]), (16, [0.1, 0.2, 0.2])]),
    ];
    let skeleton = SkeletonGraph::from_edges(17, &HUMANOID17_EDGES)?;
    BasisShapeModel::new("humanoid17", mean, bases, 0.7, skeleton)
}

/// The 15-joint sub-rig of [`humanoid17`] as a shape model of its own.
pub fn humanoid15() -> Result<BasisShapeModel> {
    let full = humanoid17()?;
    let take = |a: &Array2<f64>| a.select(Axis(0), &HUMANOID15_KEEP);
    let skeleton = SkeletonGraph::from_edges(15, &HUMANOID15_EDGES)?;
    BasisShapeModel::new(
        "humanoid15",
        take(&full.mean_shape),
        full.bases.iter().map(take).collect(),
        full.coeff_scale,
        skeleton,
    )
}

/// Resolves a library name: `chain<N>`, `star<A>x<L>`, `humanoid17`,
/// `humanoid15`.
pub fn builtin(name: &str) -> Result<BasisShapeModel> {
    let bad = || Error::Spec(format!("unknown category `{name}`"));
    match name {
        "humanoid17" => humanoid17(),
        "humanoid15" => humanoid15(),
        _ => {
            if let Some(n) = name.strip_prefix("chain") {
                chain(n.parse().map_err(|_| bad())?)
            } else if let Some(rest) = name.strip_prefix("star") {
                let (a, l) = rest.split_once('x').ok_or_else(bad)?;
                star(a.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?)
            } else {
                Err(bad())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_models_are_centered_and_consistent() {
        for name in ["chain5", "chain17", "star4x2", "star3x6", "humanoid17", "humanoid15"] {
            let m = builtin(name).unwrap();
            assert_eq!(m.category_id, name);
            let mean = m.mean_shape.mean_axis(Axis(0)).unwrap();
            assert!(mean.iter().all(|v| v.abs() < 1e-12), "{name}");
            for b in &m.bases {
                assert!(b.mean_axis(Axis(0)).unwrap().iter().all(|v| v.abs() < 1e-12));
            }
            assert!(m.diameter() > 0.5);
        }
        assert_eq!(builtin("star4x2").unwrap().num_joints(), 9);
        assert!(builtin("blob").is_err());
        assert!(builtin("chain1").is_err());
    }

    #[test]
    fn sub_rig_keeps_the_listed_joints() {
        let full = humanoid17().unwrap();
        let sub = humanoid15().unwrap();
        let picked = full.mean_shape.select(Axis(0), &HUMANOID15_KEEP);
        let offset = &picked.row(0) - &sub.mean_shape.row(0);
        for (i, row) in picked.rows().into_iter().enumerate() {
            let d = &row - &sub.mean_shape.row(i) - &offset;
            assert!(d.iter().all(|v| v.abs() < 1e-12));
        }
        assert!(sub.skeleton.adjacent(0, 7));
    }

    #[test]
    fn rejects_malformed_models() {
        let sk = SkeletonGraph::empty(2);
        assert!(BasisShapeModel::new("x", Array2::zeros((2, 3)), vec![], 1.0, sk.clone()).is_err());
        assert!(
            BasisShapeModel::new("x", Array2::zeros((2, 3)), vec![Array2::zeros((3, 3))], 1.0, sk.clone()).is_err()
        );
        assert!(BasisShapeModel::new("x", Array2::zeros((3, 3)), vec![Array2::zeros((3, 3))], 1.0, sk).is_err());
    }
}
