//! Keypoint containers, visibility masks, skeleton graphs and the
//! deterministic 2D preprocessing chain (mask, zero-center, scale).
//!
//! Every stage keeps masked rows exactly zero, so occluded or padded joints
//! never carry information into the network.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} contains non-finite entries")))
    }
}

fn permute_rows(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    a.select(Axis(0), perm)
}

/// 2D keypoints, one row per joint, in image units.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet2D(Array2<f64>);

impl KeypointSet2D {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        if coords.ncols() != 2 {
            return Err(Error::Dimension(format!(
                "2D keypoints need 2 columns, got {}",
                coords.ncols()
            )));
        }
        check_finite(&coords, "2D keypoints")?;
        Ok(Self(coords))
    }

    pub fn from_rows(rows: &[[f64; 2]]) -> Result<Self> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let coords = Array2::from_shape_vec((rows.len(), 2), flat).map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(coords)
    }

    pub fn zeros(n: usize) -> Self {
        Self(Array2::zeros((n, 2)))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> [f64; 2] {
        [self.0[[i, 0]], self.0[[i, 1]]]
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(permute_rows(&self.0, perm))
    }
}

/// 3D keypoints, one row per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet3D(Array2<f64>);

impl KeypointSet3D {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        if coords.ncols() != 3 {
            return Err(Error::Dimension(format!(
                "3D keypoints need 3 columns, got {}",
                coords.ncols()
            )));
        }
        check_finite(&coords, "3D keypoints")?;
        Ok(Self(coords))
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let coords = Array2::from_shape_vec((rows.len(), 3), flat).map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(coords)
    }

    pub fn zeros(n: usize) -> Self {
        Self(Array2::zeros((n, 3)))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> [f64; 3] {
        [self.0[[i, 0]], self.0[[i, 1]], self.0[[i, 2]]]
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(permute_rows(&self.0, perm))
    }

    /// Subtracts the mean of the visible rows from the visible rows; masked
    /// rows are set to zero.
    pub fn centered(&self, mask: &VisibilityMask) -> Result<Self> {
        check_len(self.len(), mask.len(), "3D keypoints vs mask")?;
        let n_vis = mask.count_visible();
        if n_vis == 0 {
            return Err(Error::EmptyMask);
        }
        let mut mean = [0.0; 3];
        for i in mask.visible_indices() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += self.0[[i, c]];
            }
        }
        for m in &mut mean {
            *m /= n_vis as f64;
        }
        let mut out = Array2::zeros(self.0.raw_dim());
        for i in mask.visible_indices() {
            for c in 0..3 {
                out[[i, c]] = self.0[[i, c]] - mean[c];
            }
        }
        Ok(Self(out))
    }
}

/// Per-joint visibility; `false` marks occluded or padded joints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask(Vec<bool>);

impl VisibilityMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn all_visible(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Validation(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn count_visible(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn visible_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(perm.iter().map(|&p| self.0[p]).collect())
    }
}

/// Undirected skeleton over `n` joints. Self-loops are implicit: every joint
/// is its own neighbour when attention gathers a neighbourhood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonGraph {
    n: usize,
    adjacency: Vec<bool>,
}

impl SkeletonGraph {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            adjacency: vec![false; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Validation(format!(
                    "edge ({i}, {j}) out of range for {n} joints"
                )));
            }
            g.adjacency[i * n + j] = true;
            g.adjacency[j * n + i] = true;
        }
        Ok(g)
    }

    /// Row-major `n*n` adjacency; must be symmetric.
    pub fn from_adjacency(n: usize, adjacency: Vec<bool>) -> Result<Self> {
        if adjacency.len() != n * n {
            return Err(Error::Dimension(format!(
                "adjacency has {} entries, expected {}",
                adjacency.len(),
                n * n
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if adjacency[i * n + j] != adjacency[j * n + i] {
                    return Err(Error::Validation(format!("adjacency is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, adjacency })
    }

    pub fn complete(n: usize) -> Self {
        Self {
            n,
            adjacency: vec![true; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    /// Neighbours of `i` including `i` itself.
    pub fn neighborhood(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| j == i || self.adjacent(i, j))
    }

    /// Edges with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.adjacent(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Relabels joints so that new joint `k` is old joint `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut adjacency = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                adjacency[a * n + b] = self.adjacent(perm[a], perm[b]);
            }
        }
        Self { n, adjacency }
    }
}

/// One lifting instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub w2d: KeypointSet2D,
    pub s3d_gt: Option<KeypointSet3D>,
    pub mask: VisibilityMask,
    pub skeleton: SkeletonGraph,
    pub category_id: String,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.w2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w2d.is_empty()
    }

    /// Shape consistency plus a minimum number of visible joints.
    pub fn validate(&self, min_visible: usize) -> Result<()> {
        let n = self.w2d.len();
        check_len(n, self.mask.len(), "mask")?;
        check_len(n, self.skeleton.len(), "skeleton")?;
        if let Some(s) = &self.s3d_gt {
            check_len(n, s.len(), "3D ground truth")?;
        }
        let vis = self.mask.count_visible();
        if vis < min_visible {
            return Err(Error::Validation(format!(
                "sample has {vis} visible joints, needs at least {min_visible}"
            )));
        }
        Ok(())
    }

    /// Relabels joints so that new joint `k` is old joint `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            w2d: self.w2d.permuted(perm),
            s3d_gt: self.s3d_gt.as_ref().map(|s| s.permuted(perm)),
            mask: self.mask.permuted(perm),
            skeleton: self.skeleton.permuted(perm),
            category_id: self.category_id.clone(),
        }
    }
}

/// Statistics removed by [`preprocess`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessRecord {
    pub centroid: [f64; 2],
    pub scale: f64,
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what}: expected {expected} rows, got {got}")))
    }
}

pub fn apply_mask(w: &KeypointSet2D, m: &VisibilityMask) -> Result<KeypointSet2D> {
    check_len(w.len(), m.len(), "mask")?;
    let mut out = w.0.clone();
    for (mut row, &vis) in out.rows_mut().into_iter().zip(m.flags()) {
        if !vis {
            row.fill(0.0);
        }
    }
    Ok(KeypointSet2D(out))
}

/// Subtracts the mean of the visible rows. Masked rows stay exactly zero.
pub fn zero_center(w_m: &KeypointSet2D, m: &VisibilityMask) -> Result<(KeypointSet2D, [f64; 2])> {
    check_len(w_m.len(), m.len(), "mask")?;
    let n_vis = m.count_visible();
    if n_vis == 0 {
        return Err(Error::EmptyMask);
    }
    let mut centroid = [0.0; 2];
    for i in m.visible_indices() {
        centroid[0] += w_m.0[[i, 0]];
        centroid[1] += w_m.0[[i, 1]];
    }
    centroid[0] /= n_vis as f64;
    centroid[1] /= n_vis as f64;

    let mut out = Array2::zeros(w_m.0.raw_dim());
    for i in m.visible_indices() {
        out[[i, 0]] = w_m.0[[i, 0]] - centroid[0];
        out[[i, 1]] = w_m.0[[i, 1]] - centroid[1];
    }
    Ok((KeypointSet2D(out), centroid))
}

/// Divides both axes by the largest absolute visible coordinate. A zero
/// extent leaves the input untouched and records a scale of 1.
pub fn normalize_scale(w_c: &KeypointSet2D, m: &VisibilityMask) -> Result<(KeypointSet2D, f64)> {
    check_len(w_c.len(), m.len(), "mask")?;
    let extent = m
        .visible_indices()
        .flat_map(|i| [w_c.0[[i, 0]].abs(), w_c.0[[i, 1]].abs()])
        .fold(0.0_f64, f64::max);
    if extent > 0.0 {
        Ok((KeypointSet2D(&w_c.0 / extent), extent))
    } else {
        Ok((w_c.clone(), 1.0))
    }
}

pub fn preprocess(sample: &Sample) -> Result<(KeypointSet2D, PreprocessRecord)> {
    let masked = apply_mask(&sample.w2d, &sample.mask)?;
    let (centered, centroid) = zero_center(&masked, &sample.mask)?;
    let (scaled, scale) = normalize_scale(&centered, &sample.mask)?;
    Ok((scaled, PreprocessRecord { centroid, scale }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(bits: &[u8]) -> VisibilityMask {
        VisibilityMask::from_bits(bits).unwrap()
    }

    fn kp(rows: &[[f64; 2]]) -> KeypointSet2D {
        KeypointSet2D::from_rows(rows).unwrap()
    }

    fn sample(rows: &[[f64; 2]], bits: &[u8]) -> Sample {
        Sample {
            w2d: kp(rows),
            s3d_gt: None,
            mask: m(bits),
            skeleton: SkeletonGraph::empty(rows.len()),
            category_id: "t".into(),
        }
    }

    #[test]
    fn apply_mask_cases() {
        let w = kp(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(apply_mask(&w, &m(&[1, 1])).unwrap(), w);
        assert_eq!(apply_mask(&w, &m(&[0, 0])).unwrap(), KeypointSet2D::zeros(2));
        assert_eq!(apply_mask(&w, &m(&[1, 0])).unwrap(), kp(&[[1.0, 2.0], [0.0, 0.0]]));
        assert!(matches!(apply_mask(&w, &m(&[1])), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_center_cases() {
        let (out, c) = zero_center(&kp(&[[-1.0, -1.0], [1.0, 1.0]]), &m(&[1, 1])).unwrap();
        assert_eq!(out, kp(&[[-1.0, -1.0], [1.0, 1.0]]));
        assert_eq!(c, [0.0, 0.0]);

        let (out, c) = zero_center(&kp(&[[2.0, 2.0], [4.0, 4.0]]), &m(&[1, 1])).unwrap();
        assert_eq!(out, kp(&[[-1.0, -1.0], [1.0, 1.0]]));
        assert_eq!(c, [3.0, 3.0]);

        let (out, c) = zero_center(&kp(&[[5.0, 7.0], [0.0, 0.0]]), &m(&[1, 0])).unwrap();
        assert_eq!(out, KeypointSet2D::zeros(2));
        assert_eq!(c, [5.0, 7.0]);

        assert!(matches!(
            zero_center(&kp(&[[5.0, 7.0]]), &m(&[0])),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn normalize_scale_cases() {
        let (out, s) = normalize_scale(&kp(&[[-1.0, 0.0], [1.0, 0.0]]), &m(&[1, 1])).unwrap();
        assert_eq!(out, kp(&[[-1.0, 0.0], [1.0, 0.0]]));
        assert_eq!(s, 1.0);

        let (out, s) = normalize_scale(&kp(&[[-2.0, -1.0], [2.0, 1.0]]), &m(&[1, 1])).unwrap();
        assert_eq!(out, kp(&[[-1.0, -0.5], [1.0, 0.5]]));
        assert_eq!(s, 2.0);

        let (out, s) = normalize_scale(&KeypointSet2D::zeros(3), &m(&[1, 1, 0])).unwrap();
        assert_eq!(out, KeypointSet2D::zeros(3));
        assert_eq!(s, 1.0);
    }

    #[test]
    fn preprocess_chain() {
        let (out, rec) = preprocess(&sample(&[[2.0, 2.0], [4.0, 4.0], [9.0, 9.0]], &[1, 1, 0])).unwrap();
        assert_eq!(out, kp(&[[-1.0, -1.0], [1.0, 1.0], [0.0, 0.0]]));
        assert_eq!(rec.centroid, [3.0, 3.0]);
        assert_eq!(rec.scale, 1.0);

        let ident = sample(&[[-1.0, 0.5], [1.0, -0.5]], &[1, 1]);
        assert_eq!(preprocess(&ident).unwrap().0, ident.w2d);

        let empty = sample(&[[1.0, 1.0]], &[0]);
        assert!(matches!(preprocess(&empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let adj = vec![true, true, false, true];
        assert!(matches!(
            SkeletonGraph::from_adjacency(2, adj),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn centered_3d_over_visible_rows() {
        let s = KeypointSet3D::from_rows(&[[1.0, 0.0, 0.0], [3.0, 2.0, 2.0], [100.0, 1.0, 1.0]]).unwrap();
        let c = s.centered(&m(&[1, 1, 0])).unwrap();
        assert_eq!(
            c,
            KeypointSet3D::from_rows(&[[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]).unwrap()
        );
    }
}
