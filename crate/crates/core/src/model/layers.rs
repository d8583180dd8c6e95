//! Forward and reverse passes of the building blocks: linear maps, layer
//! normalization, graph attention, masked multi-head self-attention, the
//! hybrid layer and the shape decoder.
//!
//! Each `*_forward` returns its output together with the intermediates its
//! `*_backward` needs. Backward functions accumulate parameter gradients
//! into a `Params`-shaped buffer and return the gradient of their input.

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::config::AttnMode;
use super::params::{DecoderParams, GaParams, LayerNormParams, LayerParams, Linear, MhsaParams};
use crate::error::{Error, Result};
use crate::keypoints::{KeypointSet3D, SkeletonGraph, VisibilityMask};

pub type FeatureMatrix = Array2<f64>;

pub const LN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Additive logit applied to masked keys.
pub const MASKED_LOGIT: f64 = -1e9;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub(crate) fn mask_rows(a: &mut Array2<f64>, m: &VisibilityMask) {
    for (mut row, &vis) in a.rows_mut().into_iter().zip(m.flags()) {
        if !vis {
            row.fill(0.0);
        }
    }
}

fn expect_cols(x: &Array2<f64>, cols: usize, what: &str) -> Result<()> {
    if x.ncols() == cols {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what}: expected {cols} feature columns, got {}",
            x.ncols()
        )))
    }
}

fn expect_rows(n: usize, got: usize, what: &str) -> Result<()> {
    if n == got {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what}: expected {n} rows, got {got}")))
    }
}

pub(crate) fn linear_forward(x: &Array2<f64>, p: &Linear) -> Array2<f64> {
    x.dot(&p.weight) + &p.bias
}

pub(crate) fn linear_backward(x: &Array2<f64>, p: &Linear, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
    grad.weight += &x.t().dot(dy);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&p.weight.t())
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm_forward(u: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, NormCache) {
    let d = u.ncols() as f64;
    let mut xhat = u.clone();
    let mut inv_std = Array1::zeros(u.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let k = *is;
        row.mapv_inplace(|v| (v - mean) * k);
    }
    let y = &xhat * &p.gain + &p.shift;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    p: &LayerNormParams,
    dy: &Array2<f64>,
    grad: &mut LayerNormParams,
) -> Array2<f64> {
    grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.shift += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut du = dy * &p.gain;
    for ((mut row, xhat), &is) in du
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = is * (*g - mean_d - xh * mean_dx));
    }
    du
}

pub(crate) struct GaCache {
    x: Array2<f64>,
    z: Array2<f64>,
    /// Per receiving node: `(neighbour, attention weight, pre-activation score)`.
    edges: Vec<Vec<(usize, f64, f64)>>,
}

pub(crate) fn ga_forward(
    x: &Array2<f64>,
    graph: &SkeletonGraph,
    p: &GaParams,
    m: &VisibilityMask,
) -> Result<(Array2<f64>, GaCache)> {
    let n = x.nrows();
    expect_cols(x, p.value.nrows(), "graph attention input")?;
    expect_rows(n, graph.len(), "skeleton")?;
    expect_rows(n, m.len(), "mask")?;
    let width = p.value.ncols();
    if p.attn.len() != 2 * width {
        return Err(Error::Dimension(format!(
            "edge-scoring vector has {} entries, expected {}",
            p.attn.len(),
            2 * width
        )));
    }
    let z = x.dot(&p.value);
    let src = z.dot(&p.attn.slice(s![..width]));
    let dst = z.dot(&p.attn.slice(s![width..]));

    let mut out = Array2::zeros((n, width));
    let mut edges = vec![Vec::new(); n];
    for i in m.visible_indices() {
        let mut nb: Vec<(usize, f64, f64)> = graph
            .neighborhood(i)
            .filter(|&j| m.is_visible(j))
            .map(|j| {
                let pre = src[i] + dst[j];
                (j, leaky(pre), pre)
            })
            .collect();
        let max = nb.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for e in &mut nb {
            e.1 = (e.1 - max).exp();
            total += e.1;
        }
        let mut row = out.row_mut(i);
        for e in &mut nb {
            e.1 /= total;
            row.scaled_add(e.1, &z.row(e.0));
        }
        edges[i] = nb;
    }
    Ok((out, GaCache { x: x.clone(), z, edges }))
}

pub(crate) fn ga_backward(cache: &GaCache, p: &GaParams, dout: &Array2<f64>, grad: &mut GaParams) -> Array2<f64> {
    let (n, width) = cache.z.dim();
    let z = &cache.z;
    let mut dz = Array2::zeros((n, width));
    let mut dsrc = Array1::<f64>::zeros(n);
    let mut ddst = Array1::<f64>::zeros(n);
    for (i, nb) in cache.edges.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let g = dout.row(i);
        let dalpha: Vec<f64> = nb.iter().map(|&(j, _, _)| g.dot(&z.row(j))).collect();
        let weighted: f64 = nb.iter().zip(&dalpha).map(|(e, da)| e.1 * da).sum();
        for (&(j, alpha, pre), &da) in nb.iter().zip(&dalpha) {
            dz.row_mut(j).scaled_add(alpha, &g);
            let de = alpha * (da - weighted);
            let dpre = if pre > 0.0 { de } else { LEAKY_SLOPE * de };
            dsrc[i] += dpre;
            ddst[j] += dpre;
        }
    }
    let a_src = p.attn.slice(s![..width]);
    let a_dst = p.attn.slice(s![width..]);
    {
        let mut ga = grad.attn.slice_mut(s![..width]);
        ga += &z.t().dot(&dsrc);
    }
    {
        let mut ga = grad.attn.slice_mut(s![width..]);
        ga += &z.t().dot(&ddst);
    }
    for ((mut row, &ds), &dd) in dz.rows_mut().into_iter().zip(dsrc.iter()).zip(ddst.iter()) {
        row.scaled_add(ds, &a_src);
        row.scaled_add(dd, &a_dst);
    }
    grad.value += &cache.x.t().dot(&dz);
    dz.dot(&p.value.t())
}

/// Graph attention: each visible node attends over its visible skeleton
/// neighbours (itself included); masked nodes output zero rows.
pub fn graph_attention(
    x: &FeatureMatrix,
    a: &SkeletonGraph,
    w: &GaParams,
    m: &VisibilityMask,
) -> Result<FeatureMatrix> {
    ga_forward(x, a, w, m).map(|(out, _)| out)
}

pub(crate) struct MhsaCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
}

pub(crate) fn mhsa_forward(x: &Array2<f64>, p: &MhsaParams, m: &VisibilityMask) -> Result<(Array2<f64>, MhsaCache)> {
    let n = x.nrows();
    expect_cols(x, p.query.nrows(), "self-attention input")?;
    expect_rows(n, m.len(), "mask")?;
    let width = p.query.ncols();
    if p.heads == 0 || width % p.heads != 0 {
        return Err(Error::Config(format!(
            "self-attention width {width} not divisible by {} heads",
            p.heads
        )));
    }
    let dh = width / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.dot(&p.query);
    let k = x.dot(&p.key);
    let v = x.dot(&p.value);
    let mut o = Array2::zeros((n, width));
    let mut probs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for (j, &vis) in m.flags().iter().enumerate() {
            if !vis {
                logits.column_mut(j).mapv_inplace(|l| l + MASKED_LOGIT);
            }
        }
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|l| (l - max).exp());
            let total = row.sum();
            row /= total;
        }
        o.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
        probs.push(logits);
    }
    let mut out = linear_forward(&o, &p.out);
    mask_rows(&mut out, m);
    Ok((
        out,
        MhsaCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            o,
        },
    ))
}

pub(crate) fn mhsa_backward(
    cache: &MhsaCache,
    p: &MhsaParams,
    m: &VisibilityMask,
    dout: &Array2<f64>,
    grad: &mut MhsaParams,
) -> Array2<f64> {
    let mut dg = dout.clone();
    mask_rows(&mut dg, m);
    let d_o = linear_backward(&cache.o, &p.out, &dg, &mut grad.out);
    let width = p.query.ncols();
    let dh = width / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = cache.x.nrows();
    let mut dq = Array2::zeros((n, width));
    let mut dk = Array2::zeros((n, width));
    let mut dv = Array2::zeros((n, width));
    for (h, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = d_o.slice(cols);
        let dp = doh.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&doh));
        let mut ds = dp;
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
            let inner = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum::<f64>();
            Zip::from(&mut drow)
                .and(&prow)
                .for_each(|d, &pr| *d = pr * (*d - inner));
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let xt = cache.x.t();
    grad.query += &xt.dot(&dq);
    grad.key += &xt.dot(&dk);
    grad.value += &xt.dot(&dv);
    dq.dot(&p.query.t()) + dk.dot(&p.key.t()) + dv.dot(&p.value.t())
}

/// Scaled dot-product attention over visible tokens, heads concatenated
/// and projected. Masked query rows output zero.
pub fn multi_head_self_attention(x: &FeatureMatrix, w: &MhsaParams, m: &VisibilityMask) -> Result<FeatureMatrix> {
    mhsa_forward(x, w, m).map(|(out, _)| out)
}

pub(crate) struct LayerCache {
    ga: Option<GaCache>,
    mhsa: Option<MhsaCache>,
    norm1: NormCache,
    xp: Array2<f64>,
    h1: Array2<f64>,
    a1: Array2<f64>,
    norm2: NormCache,
}

fn check_mode(p: &LayerParams, mode: AttnMode) -> Result<()> {
    let ok = match mode {
        AttnMode::Hybrid => p.ga.is_some() && p.mhsa.is_some(),
        AttnMode::GaOnly => p.ga.is_some() && p.mhsa.is_none(),
        AttnMode::MhsaOnly => p.ga.is_none() && p.mhsa.is_some(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "layer weights do not match attention mode {mode:?}"
        )))
    }
}

pub(crate) fn layer_forward(
    x: &Array2<f64>,
    graph: &SkeletonGraph,
    m: &VisibilityMask,
    p: &LayerParams,
    mode: AttnMode,
) -> Result<(Array2<f64>, LayerCache)> {
    check_mode(p, mode)?;
    let d = x.ncols();
    let ga = p.ga.as_ref().map(|w| ga_forward(x, graph, w, m)).transpose()?;
    let mhsa = p.mhsa.as_ref().map(|w| mhsa_forward(x, w, m)).transpose()?;
    let u = match (&ga, &mhsa) {
        (Some((l, _)), Some((g, _))) => {
            ndarray::concatenate(Axis(1), &[l.view(), g.view()]).map_err(|e| Error::Dimension(e.to_string()))?
        }
        (Some((l, _)), None) => l.clone(),
        (None, Some((g, _))) => g.clone(),
        (None, None) => unreachable!("checked by check_mode"),
    };
    if u.ncols() != d || p.norm1.gain.len() != d {
        return Err(Error::Config(format!(
            "attention branches emit {} features, layer width is {d}",
            u.ncols()
        )));
    }
    let (n1, norm1) = layer_norm_forward(&u, &p.norm1);
    let mut xp = n1 + &u;
    mask_rows(&mut xp, m);
    let h1 = linear_forward(&xp, &p.mlp_in);
    let a1 = h1.mapv(gelu);
    let h2 = linear_forward(&a1, &p.mlp_out);
    let (n2, norm2) = layer_norm_forward(&h2, &p.norm2);
    let mut y = n2 + &xp;
    mask_rows(&mut y, m);
    Ok((
        y,
        LayerCache {
            ga: ga.map(|(_, c)| c),
            mhsa: mhsa.map(|(_, c)| c),
            norm1,
            xp,
            h1,
            a1,
            norm2,
        },
    ))
}

pub(crate) fn layer_backward(
    cache: &LayerCache,
    p: &LayerParams,
    m: &VisibilityMask,
    dy: &Array2<f64>,
    grad: &mut LayerParams,
) -> Array2<f64> {
    let mut dy = dy.clone();
    mask_rows(&mut dy, m);
    let dh2 = layer_norm_backward(&cache.norm2, &p.norm2, &dy, &mut grad.norm2);
    let mut da1 = linear_backward(&cache.a1, &p.mlp_out, &dh2, &mut grad.mlp_out);
    Zip::from(&mut da1).and(&cache.h1).for_each(|g, &h| *g *= gelu_grad(h));
    let mut dxp = linear_backward(&cache.xp, &p.mlp_in, &da1, &mut grad.mlp_in) + &dy;
    mask_rows(&mut dxp, m);
    let du = layer_norm_backward(&cache.norm1, &p.norm1, &dxp, &mut grad.norm1) + &dxp;

    let mut dx = Array2::zeros(cache.xp.raw_dim());
    let split = match (&cache.ga, &cache.mhsa) {
        (Some(_), Some(_)) => du.ncols() / 2,
        (Some(_), None) => du.ncols(),
        _ => 0,
    };
    if let (Some(c), Some(w), Some(g)) = (&cache.ga, &p.ga, grad.ga.as_mut()) {
        dx += &ga_backward(c, w, &du.slice(s![.., ..split]).to_owned(), g);
    }
    if let (Some(c), Some(w), Some(g)) = (&cache.mhsa, &p.mhsa, grad.mhsa.as_mut()) {
        dx += &mhsa_backward(c, w, m, &du.slice(s![.., split..]).to_owned(), g);
    }
    dx
}

/// `X' = LN(U) + U`, `X_next = LN(MLP(X')) + X'` with `U` the concatenated
/// attention branches. Masked rows are zero on output.
pub fn hybrid_layer(
    x: &FeatureMatrix,
    a: &SkeletonGraph,
    m: &VisibilityMask,
    w: &LayerParams,
    mode: AttnMode,
) -> Result<FeatureMatrix> {
    layer_forward(x, a, m, w, mode).map(|(y, _)| y)
}

pub(crate) struct DecoderCache {
    x: Array2<f64>,
    h: Array2<f64>,
    a: Array2<f64>,
}

pub(crate) fn decoder_forward(x: &Array2<f64>, p: &DecoderParams) -> Result<(Array2<f64>, DecoderCache)> {
    expect_cols(x, p.hidden.weight.nrows(), "decoder input")?;
    let h = linear_forward(x, &p.hidden);
    let a = h.mapv(gelu);
    let out = linear_forward(&a, &p.out);
    Ok((out, DecoderCache { x: x.clone(), h, a }))
}

pub(crate) fn decoder_backward(
    cache: &DecoderCache,
    p: &DecoderParams,
    dout: &Array2<f64>,
    grad: &mut DecoderParams,
) -> Array2<f64> {
    let mut da = linear_backward(&cache.a, &p.out, dout, &mut grad.out);
    Zip::from(&mut da).and(&cache.h).for_each(|g, &h| *g *= gelu_grad(h));
    linear_backward(&cache.x, &p.hidden, &da, &mut grad.hidden)
}

/// Per-token GeLU MLP from features to 3D coordinates.
pub fn decode_shape(x_l: &FeatureMatrix, w: &DecoderParams) -> Result<KeypointSet3D> {
    if w.out.weight.ncols() != 3 {
        return Err(Error::Dimension("decoder must emit 3 columns".into()));
    }
    let (out, _) = decoder_forward(x_l, w)?;
    KeypointSet3D::new(out)
}
