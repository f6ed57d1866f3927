//! Randomly initialised single-head transformer stack used to watch the
//! singular-value spectrum of hidden states evolve with depth.
//!
//! Two variants: the full block (attention, ReLU MLP, residual, layer norm)
//! and a pure-attention block with no residual, MLP or normalisation.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{cosine, svd, EmbeddingMatrix};
use crate::metrics::{explained_variance, spectrum_stats, token_uniformity, SpectrumStats};

pub const MAX_LAYERS: usize = 64;
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    PureAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub layers: usize,
    pub dim: usize,
    pub tokens: usize,
    pub seed: u64,
    pub variant: Variant,
    /// When false only the input and the final layer are recorded.
    pub record_every_layer: bool,
}

impl SimConfig {
    pub fn new(layers: usize, dim: usize, tokens: usize, seed: u64, variant: Variant) -> Self {
        Self {
            layers,
            dim,
            tokens,
            seed,
            variant,
            record_every_layer: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens < 2 {
            return Err(Error::InvalidParam(format!(
                "simulation needs at least 2 tokens, got {}",
                self.tokens
            )));
        }
        if self.tokens >= self.dim {
            return Err(Error::InvalidParam(format!(
                "tokens ({}) must be smaller than dim ({})",
                self.tokens, self.dim
            )));
        }
        if self.layers > MAX_LAYERS {
            return Err(Error::InvalidParam(format!(
                "at most {MAX_LAYERS} layers, got {}",
                self.layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub w_mlp: Array2<f64>,
    pub b_mlp: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackParams {
    pub blocks: Vec<BlockParams>,
    /// Initial hidden state, `tokens x dim`.
    pub input: Array2<f64>,
}

/// Draws all weights N(0, 1/dim) and the input N(0, 1) from one seeded stream.
pub fn init_stack(cfg: &SimConfig) -> Result<StackParams> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Array2::from_shape_simple_fn((r, c), || w.sample(rng))
    };
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let wq = mat(&mut rng, d, d);
        let wk = mat(&mut rng, d, d);
        let wv = mat(&mut rng, d, d);
        let w_mlp = mat(&mut rng, d, d);
        let b_mlp = mat(&mut rng, 1, d).remove_axis(Axis(0));
        blocks.push(BlockParams {
            wq,
            wk,
            wv,
            w_mlp,
            b_mlp,
            ln_gain: Array1::ones(d),
            ln_bias: Array1::zeros(d),
        });
    }
    let input = Array2::from_shape_simple_fn((cfg.tokens, d), || StandardNormal.sample(&mut rng));
    Ok(StackParams { blocks, input })
}

/// Row-stochastic attention matrix `softmax(Q K^T / sqrt(dim))`.
pub fn attention_weights(x: &EmbeddingMatrix, p: &BlockParams) -> Result<Array2<f64>> {
    check_shape(x, p)?;
    let a = x.as_array();
    let q = a.dot(&p.wq);
    let k = a.dot(&p.wk);
    let mut scores = q.dot(&k.t()) / (x.cols() as f64).sqrt();
    for mut row in scores.rows_mut() {
        let top = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - top).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(scores)
}

fn check_shape(x: &EmbeddingMatrix, p: &BlockParams) -> Result<()> {
    if x.cols() != p.wq.nrows() {
        return Err(Error::Dimension(format!(
            "hidden state has {} features, block expects {}",
            x.cols(),
            p.wq.nrows()
        )));
    }
    Ok(())
}

/// One block. Full: `LayerNorm(ReLU(v W + b) + x)` with `v` the attention
/// output. Pure attention: `v` alone.
pub fn forward_block(
    x: &EmbeddingMatrix,
    p: &BlockParams,
    variant: Variant,
) -> Result<Array2<f64>> {
    let attn = attention_weights(x, p)?;
    let v = attn.dot(&x.as_array().dot(&p.wv));
    if variant == Variant::PureAttention {
        return Ok(v);
    }
    let mut h = v.dot(&p.w_mlp) + &p.b_mlp;
    h.mapv_inplace(|e| e.max(0.0));
    h += x.as_array();
    let d = h.ncols() as f64;
    for mut row in h.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|e| (e - mean) * inv);
        row *= &p.ln_gain;
        row += &p.ln_bias;
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    /// 0 is the input.
    pub layer: usize,
    pub spectrum: SpectrumStats,
    pub sigma_min: f64,
    pub ev_1: f64,
    pub token_uniformity: f64,
    /// Cosine between row 0 here and row 0 of the previous recorded layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTrace {
    pub config: SimConfig,
    pub layers: Vec<LayerRecord>,
    /// Always true: row 0 stands in for a [CLS] token, which a randomly
    /// initialised stack does not have.
    pub cls_is_proxy: bool,
}

impl LayerTrace {
    pub fn record(&self, layer: usize) -> Option<&LayerRecord> {
        self.layers.iter().find(|r| r.layer == layer)
    }
}

fn record(layer: usize, x: &EmbeddingMatrix, prev_row0: Option<&[f64]>) -> Result<LayerRecord> {
    let sigma = svd(x)?.sigma.to_vec();
    let cls_cosine = match prev_row0 {
        Some(p) => Some(cosine(p, x.row_slice(0))?),
        None => None,
    };
    Ok(LayerRecord {
        layer,
        spectrum: spectrum_stats(&sigma)?,
        sigma_min: *sigma.last().expect("non-empty"),
        ev_1: explained_variance(&sigma, 1)?,
        token_uniformity: token_uniformity(x)?,
        cls_cosine,
    })
}

/// Runs the stack and records spectrum and uniformity after each layer.
pub fn run_stack(cfg: &SimConfig) -> Result<LayerTrace> {
    let params = init_stack(cfg)?;
    let mut x = EmbeddingMatrix::new(params.input.clone())?;
    let mut layers = vec![record(0, &x, None)?];
    let mut last_row0 = x.row_slice(0).to_vec();
    for (i, block) in params.blocks.iter().enumerate() {
        let layer = i + 1;
        let out = forward_block(&x, block, cfg.variant)?;
        x = EmbeddingMatrix::new(out).map_err(|_| Error::Overflow { layer })?;
        if cfg.record_every_layer || layer == cfg.layers {
            layers.push(record(layer, &x, Some(&last_row0))?);
            last_row0 = x.row_slice(0).to_vec();
        }
    }
    Ok(LayerTrace {
        config: cfg.clone(),
        layers,
        cls_is_proxy: true,
    })
}
