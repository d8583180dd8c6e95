//! Shared fixtures and loop-based reference implementations used as
//! independent oracles for the network layers.
#![allow(dead_code)]

use lfm3d::keypoints::{KeypointSet2D, KeypointSet3D, Sample, SkeletonGraph, VisibilityMask};
use lfm3d::model::{AttnMode, Encoding, GaParams, LayerNormParams, LayerParams, MhsaParams, ModelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i][t] * b[t][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn add_bias(a: &mut Mat, b: &[f64]) {
    for row in a.iter_mut() {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn layer_norm(u: &Mat, p: &LayerNormParams) -> Mat {
    u.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * p.gain[j] + p.shift[j])
                .collect()
        })
        .collect()
}

pub fn naive_ga(x: &Mat, a: &SkeletonGraph, p: &GaParams, m: &VisibilityMask) -> Mat {
    let z = matmul(x, &to_mat(&p.value));
    let b = z[0].len();
    let n = x.len();
    let mut out = vec![vec![0.0; b]; n];
    for i in 0..n {
        if !m.is_visible(i) {
            continue;
        }
        let mut scores = Vec::new();
        for j in 0..n {
            if (i == j || a.adjacent(i, j)) && m.is_visible(j) {
                let mut e = 0.0;
                for c in 0..b {
                    e += p.attn[c] * z[i][c] + p.attn[b + c] * z[j][c];
                }
                let e = if e > 0.0 { e } else { 0.2 * e };
                scores.push((j, e.exp()));
            }
        }
        let total: f64 = scores.iter().map(|s| s.1).sum();
        for (j, s) in scores {
            for c in 0..b {
                out[i][c] += s / total * z[j][c];
            }
        }
    }
    out
}

pub fn naive_mhsa(x: &Mat, p: &MhsaParams, m: &VisibilityMask) -> Mat {
    let q = matmul(x, &to_mat(&p.query));
    let k = matmul(x, &to_mat(&p.key));
    let v = matmul(x, &to_mat(&p.value));
    let n = x.len();
    let width = q[0].len();
    let dh = width / p.heads;
    let mut o = vec![vec![0.0; width]; n];
    for h in 0..p.heads {
        for i in 0..n {
            let mut w = Vec::new();
            for j in 0..n {
                if m.is_visible(j) {
                    let dot: f64 = (h * dh..(h + 1) * dh).map(|c| q[i][c] * k[j][c]).sum();
                    w.push((j, dot / (dh as f64).sqrt()));
                }
            }
            let max = w.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = w.iter().map(|e| (e.1 - max).exp()).sum();
            for (j, l) in w {
                let a = (l - max).exp() / total;
                for c in h * dh..(h + 1) * dh {
                    o[i][c] += a * v[j][c];
                }
            }
        }
    }
    let mut g = matmul(&o, &to_mat(&p.out.weight));
    add_bias(&mut g, p.out.bias.as_slice().unwrap());
    for (i, row) in g.iter_mut().enumerate() {
        if !m.is_visible(i) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    g
}

pub fn naive_layer(x: &Mat, a: &SkeletonGraph, m: &VisibilityMask, p: &LayerParams) -> Mat {
    let l = p.ga.as_ref().map(|w| naive_ga(x, a, w, m));
    let g = p.mhsa.as_ref().map(|w| naive_mhsa(x, w, m));
    let u: Mat = match (l, g) {
        (Some(l), Some(g)) => l
            .into_iter()
            .zip(g)
            .map(|(mut a, b)| {
                a.extend(b);
                a
            })
            .collect(),
        (Some(l), None) => l,
        (None, Some(g)) => g,
        _ => unreachable!(),
    };
    let n1 = layer_norm(&u, &p.norm1);
    let mut xp: Mat = n1
        .iter()
        .zip(&u)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    for (i, row) in xp.iter_mut().enumerate() {
        if !m.is_visible(i) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut h1 = matmul(&xp, &to_mat(&p.mlp_in.weight));
    add_bias(&mut h1, p.mlp_in.bias.as_slice().unwrap());
    let a1: Mat = h1.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let mut h2 = matmul(&a1, &to_mat(&p.mlp_out.weight));
    add_bias(&mut h2, p.mlp_out.bias.as_slice().unwrap());
    let n2 = layer_norm(&h2, &p.norm2);
    let mut y: Mat = n2
        .iter()
        .zip(&xp)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    for (i, row) in y.iter_mut().enumerate() {
        if !m.is_visible(i) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    y
}

pub fn max_abs_diff(a: &Mat, b: &Array2<f64>) -> f64 {
    let mut d: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            d = d.max((v - b[[i, j]]).abs());
        }
    }
    d
}

pub fn tiny_config(n_max: usize, dim: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        n_max,
        dim,
        heads,
        layers,
        ff_mult: 2,
        attn_mode: AttnMode::Hybrid,
        encoding: Encoding::Tpe,
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Random sample on a chain skeleton with a few occluded joints.
pub fn random_sample(seed: u64, n: usize, occluded: &[usize]) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian(&mut rng, (n, 2));
    let s = gaussian(&mut rng, (n, 3));
    let mut flags = vec![true; n];
    for &i in occluded {
        flags[i] = false;
    }
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    Sample {
        w2d: KeypointSet2D::new(w).unwrap(),
        s3d_gt: Some(KeypointSet3D::new(s).unwrap()),
        mask: VisibilityMask::new(flags),
        skeleton: SkeletonGraph::from_edges(n, &edges).unwrap(),
        category_id: "random".into(),
    }
}

/// Random permutation of `0..n` from a seeded shuffle.
pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
