//! The lifting network: token encoding, `L` hybrid graph/self-attention
//! layers and a per-token shape decoder, with exact reverse-mode gradients.

mod checkpoint;
mod config;
mod layers;
mod params;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Dtype};
pub use config::{AttnMode, Encoding, ModelConfig};
pub use layers::{
    decode_shape, gelu, gelu_grad, graph_attention, hybrid_layer, multi_head_self_attention, FeatureMatrix,
    LEAKY_SLOPE, LN_EPS, MASKED_LOGIT,
};
pub use params::{DecoderParams, GaParams, LayerNormParams, LayerParams, Linear, MhsaParams, Params};

use crate::error::{Error, Result};
use crate::keypoints::{preprocess, KeypointSet2D, KeypointSet3D, PreprocessRecord, Sample, VisibilityMask};
use crate::tpe::{encode_learnable, encode_tpe, init_rff_params_with, PhaseDist, RffParams};
use layers::{decoder_backward, decoder_forward, layer_backward, layer_forward, mask_rows, DecoderCache, LayerCache};

/// How the frozen Fourier projection is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RffSettings {
    pub sigma: f64,
    pub seed: u64,
    pub phase_dist: PhaseDist,
}

impl Default for RffSettings {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            seed: 0,
            phase_dist: PhaseDist::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub rff: RffParams,
    pub params: Params,
}

impl ModelWeights {
    pub fn init(config: ModelConfig, rff: RffSettings, seed: u64) -> Result<Self> {
        config.validate()?;
        let rff = init_rff_params_with(config.dim, rff.sigma, rff.seed, rff.phase_dist)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&config, &mut rng);
        Ok(Self { config, rff, params })
    }
}

/// Intermediates of one forward pass, consumed by [`Trace::backward`].
pub struct Trace {
    wn: KeypointSet2D,
    mask: VisibilityMask,
    layers: Vec<LayerCache>,
    decoder: DecoderCache,
}

/// Result of a traced forward pass.
pub struct Forward {
    /// Canonical shape, one row per joint.
    pub shape: KeypointSet3D,
    pub record: PreprocessRecord,
    pub trace: Trace,
}

fn check_sample(sample: &Sample, config: &ModelConfig) -> Result<()> {
    sample.validate(1)?;
    if sample.len() > config.n_max {
        return Err(Error::Dimension(format!(
            "sample has {} joints, model supports at most {}",
            sample.len(),
            config.n_max
        )));
    }
    Ok(())
}

/// Token features `X⁰` with masked rows zeroed.
pub fn encode(wn: &KeypointSet2D, mask: &VisibilityMask, w: &ModelWeights) -> Result<FeatureMatrix> {
    let mut x = match w.config.encoding {
        Encoding::Tpe => encode_tpe(wn, &w.rff)?,
        Encoding::Learnable => {
            let emb = w
                .params
                .embedding
                .as_ref()
                .ok_or_else(|| Error::Config("learnable encoding selected but no embedding present".into()))?;
            encode_learnable(wn, emb)?
        }
    };
    mask_rows(&mut x, mask);
    Ok(x)
}

pub fn forward_traced(sample: &Sample, w: &ModelWeights) -> Result<Forward> {
    check_sample(sample, &w.config)?;
    let (wn, record) = preprocess(sample)?;
    let mut x = encode(&wn, &sample.mask, w)?;
    let mut caches = Vec::with_capacity(w.params.layers.len());
    for layer in &w.params.layers {
        let (y, cache) = layer_forward(&x, &sample.skeleton, &sample.mask, layer, w.config.attn_mode)?;
        caches.push(cache);
        x = y;
    }
    let (out, decoder) = decoder_forward(&x, &w.params.decoder)?;
    Ok(Forward {
        shape: KeypointSet3D::new(out)?,
        record,
        trace: Trace {
            wn,
            mask: sample.mask.clone(),
            layers: caches,
            decoder,
        },
    })
}

/// Canonical 3D shape for one sample.
pub fn forward(sample: &Sample, w: &ModelWeights) -> Result<KeypointSet3D> {
    forward_traced(sample, w).map(|f| f.shape)
}

impl Trace {
    /// Gradient of `Σ upstream ⊙ shape` with respect to every trainable
    /// tensor. The Fourier projection is frozen and receives none.
    pub fn backward(&self, w: &ModelWeights, upstream: &Array2<f64>) -> Result<Params> {
        let n = self.wn.len();
        if upstream.dim() != (n, 3) {
            return Err(Error::Dimension(format!(
                "upstream gradient is {:?}, expected ({n}, 3)",
                upstream.dim()
            )));
        }
        let mut grad = w.params.zeros_like();
        let mut dx = decoder_backward(&self.decoder, &w.params.decoder, upstream, &mut grad.decoder);
        for ((cache, p), g) in self
            .layers
            .iter()
            .zip(&w.params.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            dx = layer_backward(cache, p, &self.mask, &dx, g);
        }
        if let Some(g) = grad.embedding.as_mut() {
            mask_rows(&mut dx, &self.mask);
            let mut rows = g.table.slice_mut(s![..n, ..]);
            rows += &dx;
            g.proj += &self.wn.coords().t().dot(&dx);
        }
        if let Some(name) = grad.first_non_finite() {
            return Err(Error::NumericFault(name));
        }
        Ok(grad)
    }
}

pub fn backward(sample: &Sample, w: &ModelWeights, upstream: &Array2<f64>) -> Result<Params> {
    forward_traced(sample, w)?.trace.backward(w, upstream)
}
