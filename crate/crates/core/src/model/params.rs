use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{AttnMode, Encoding, ModelConfig};
use crate::tpe::LearnableEmbedding;

/// `y = x W + b`
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: gaussian(rng, (fan_in, fan_out), (1.0 / fan_in as f64).sqrt()),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNormParams {
    fn identity(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }
}

/// Single-head graph attention over the skeleton neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct GaParams {
    /// `D x B` value transform shared by scoring and aggregation.
    pub value: Array2<f64>,
    /// `2B` edge-scoring vector: first half scores the receiving node,
    /// second half the neighbour.
    pub attn: Array1<f64>,
}

/// Multi-head self-attention. Heads occupy contiguous column blocks of
/// the query/key/value maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaParams {
    pub heads: usize,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ga: Option<GaParams>,
    pub mhsa: Option<MhsaParams>,
    pub norm1: LayerNormParams,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub norm2: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub hidden: Linear,
    pub out: Linear,
}

/// Every trainable tensor of the network. Also used as the gradient and
/// optimizer-moment container, since those share the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embedding: Option<LearnableEmbedding>,
    pub layers: Vec<LayerParams>,
    pub decoder: DecoderParams,
}

fn gaussian<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn(shape, |_| dist.sample(rng))
}

impl Params {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.dim;
        let b = config.branch_width();
        let embedding = match config.encoding {
            Encoding::Tpe => None,
            Encoding::Learnable => {
                let std = (1.0 / d as f64).sqrt();
                Some(LearnableEmbedding {
                    table: gaussian(rng, (config.n_max, d), std),
                    proj: gaussian(rng, (2, d), std),
                })
            }
        };
        let layers = (0..config.layers)
            .map(|_| {
                let ga = config.attn_mode.has_ga().then(|| GaParams {
                    value: gaussian(rng, (d, b), (1.0 / d as f64).sqrt()),
                    attn: gaussian(rng, (1, 2 * b), (1.0 / b as f64).sqrt())
                        .into_shape_with_order(2 * b)
                        .expect("flat"),
                });
                let mhsa = config.attn_mode.has_mhsa().then(|| {
                    let std = (1.0 / d as f64).sqrt();
                    MhsaParams {
                        heads: config.heads,
                        query: gaussian(rng, (d, b), std),
                        key: gaussian(rng, (d, b), std),
                        value: gaussian(rng, (d, b), std),
                        out: Linear::init(rng, b, b),
                    }
                });
                LayerParams {
                    ga,
                    mhsa,
                    norm1: LayerNormParams::identity(d),
                    mlp_in: Linear::init(rng, d, d * config.ff_mult),
                    mlp_out: Linear::init(rng, d * config.ff_mult, d),
                    norm2: LayerNormParams::identity(d),
                }
            })
            .collect();
        let decoder = DecoderParams {
            hidden: Linear::init(rng, d, d),
            out: Linear::init(rng, d, 3),
        };
        Self {
            embedding,
            layers,
            decoder,
        }
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, mut t| t.fill(0.0));
        z
    }

    /// Named views in a fixed order shared by every `Params` of the same
    /// configuration.
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding.table".to_string(), e.table.view().into_dyn()));
            out.push(("embedding.proj".to_string(), e.proj.view().into_dyn()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            if let Some(ga) = &layer.ga {
                out.push((p("ga.value"), ga.value.view().into_dyn()));
                out.push((p("ga.attn"), ga.attn.view().into_dyn()));
            }
            if let Some(m) = &layer.mhsa {
                out.push((p("mhsa.query"), m.query.view().into_dyn()));
                out.push((p("mhsa.key"), m.key.view().into_dyn()));
                out.push((p("mhsa.value"), m.value.view().into_dyn()));
                out.push((p("mhsa.out.weight"), m.out.weight.view().into_dyn()));
                out.push((p("mhsa.out.bias"), m.out.bias.view().into_dyn()));
            }
            out.push((p("norm1.gain"), layer.norm1.gain.view().into_dyn()));
            out.push((p("norm1.shift"), layer.norm1.shift.view().into_dyn()));
            out.push((p("mlp_in.weight"), layer.mlp_in.weight.view().into_dyn()));
            out.push((p("mlp_in.bias"), layer.mlp_in.bias.view().into_dyn()));
            out.push((p("mlp_out.weight"), layer.mlp_out.weight.view().into_dyn()));
            out.push((p("mlp_out.bias"), layer.mlp_out.bias.view().into_dyn()));
            out.push((p("norm2.gain"), layer.norm2.gain.view().into_dyn()));
            out.push((p("norm2.shift"), layer.norm2.shift.view().into_dyn()));
        }
        let d = &self.decoder;
        out.push(("decoder.hidden.weight".into(), d.hidden.weight.view().into_dyn()));
        out.push(("decoder.hidden.bias".into(), d.hidden.bias.view().into_dyn()));
        out.push(("decoder.out.weight".into(), d.out.weight.view().into_dyn()));
        out.push(("decoder.out.bias".into(), d.out.bias.view().into_dyn()));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(("embedding.table".to_string(), e.table.view_mut().into_dyn()));
            out.push(("embedding.proj".to_string(), e.proj.view_mut().into_dyn()));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            if let Some(ga) = &mut layer.ga {
                out.push((p("ga.value"), ga.value.view_mut().into_dyn()));
                out.push((p("ga.attn"), ga.attn.view_mut().into_dyn()));
            }
            if let Some(m) = &mut layer.mhsa {
                out.push((p("mhsa.query"), m.query.view_mut().into_dyn()));
                out.push((p("mhsa.key"), m.key.view_mut().into_dyn()));
                out.push((p("mhsa.value"), m.value.view_mut().into_dyn()));
                out.push((p("mhsa.out.weight"), m.out.weight.view_mut().into_dyn()));
                out.push((p("mhsa.out.bias"), m.out.bias.view_mut().into_dyn()));
            }
            out.push((p("norm1.gain"), layer.norm1.gain.view_mut().into_dyn()));
            out.push((p("norm1.shift"), layer.norm1.shift.view_mut().into_dyn()));
            out.push((p("mlp_in.weight"), layer.mlp_in.weight.view_mut().into_dyn()));
            out.push((p("mlp_in.bias"), layer.mlp_in.bias.view_mut().into_dyn()));
            out.push((p("mlp_out.weight"), layer.mlp_out.weight.view_mut().into_dyn()));
            out.push((p("mlp_out.bias"), layer.mlp_out.bias.view_mut().into_dyn()));
            out.push((p("norm2.gain"), layer.norm2.gain.view_mut().into_dyn()));
            out.push((p("norm2.shift"), layer.norm2.shift.view_mut().into_dyn()));
        }
        let d = &mut self.decoder;
        out.push(("decoder.hidden.weight".into(), d.hidden.weight.view_mut().into_dyn()));
        out.push(("decoder.hidden.bias".into(), d.hidden.bias.view_mut().into_dyn()));
        out.push(("decoder.out.weight".into(), d.out.weight.view_mut().into_dyn()));
        out.push(("decoder.out.bias".into(), d.out.bias.view_mut().into_dyn()));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (name, view) in self.named_mut() {
            f(&name, view);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, v)| v.len()).sum()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &Params, alpha: f64) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            Zip::from(&mut a).and(&b).for_each(|a, &b| *a += alpha * b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.for_each_mut(|_, mut t| t.mapv_inplace(|v| v * alpha));
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }
}

impl AttnMode {
    pub fn has_ga(self) -> bool {
        matches!(self, AttnMode::Hybrid | AttnMode::GaOnly)
    }

    pub fn has_mhsa(self) -> bool {
        matches!(self, AttnMode::Hybrid | AttnMode::MhsaOnly)
    }
}
