//! Query-token decoder blocks and feature-volume reduction.
//!
//! Each block refines a single query vector against the key/value tokens of
//! one temporally modulated feature volume:
//!
//! ```text
//! q~ = q + MHA(LN(q), Y, Y)
//! q  = q~ + MLP(LN(q~))
//! ```
//!
//! Norms sit on the query path (pre-norm, mirroring the encoder blocks); the
//! memory Y is consumed raw so that a freshly initialized decoder sees the
//! backbone features unchanged. Dropout lives inside the MLP (after the
//! activation) and before the final classification head, nowhere else.

use crate::backbone::{BackboneConfig, LayerVolume};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;
use crate::temporal::TemporalToggles;

/// How a (T, H, W, C) feature volume is shaped into decoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Full spatiotemporal token set: T*H*W tokens.
    None,
    /// Mean over H and W: T tokens.
    SpatialAvg,
    /// Mean over T: H*W tokens.
    TemporalAvg,
    /// Per-frame class token: T tokens.
    ClsToken,
}

impl Reduction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Reduction::None),
            "spatial_avg" => Ok(Reduction::SpatialAvg),
            "temporal_avg" => Ok(Reduction::TemporalAvg),
            "cls_token" => Ok(Reduction::ClsToken),
            other => Err(Error::Config(format!(
                "unknown reduction {other:?} (expected none|spatial_avg|temporal_avg|cls_token)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Reduction::None => "none",
            Reduction::SpatialAvg => "spatial_avg",
            Reduction::TemporalAvg => "temporal_avg",
            Reduction::ClsToken => "cls_token",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Number of decoder blocks (M).
    pub blocks: usize,
    /// Backbone layer feeding each block, signed 1-based (length M).
    pub feature_layers: Vec<i64>,
    pub heads: usize,
    pub mlp_factor: usize,
    pub dropout: f32,
    pub num_classes: usize,
    /// Frames per view (T); also the number of temporal-embedding rows.
    pub frames: usize,
    pub reduction: Reduction,
    pub toggles: TemporalToggles,
}

impl DecoderConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        if self.feature_layers.len() != self.blocks {
            return Err(Error::Config(format!(
                "{} feature layers for {} decoder blocks",
                self.feature_layers.len(),
                self.blocks
            )));
        }
        let n = backbone.depth as i64;
        for &l in &self.feature_layers {
            if l == 0 || l > n || l < -n {
                return Err(Error::Config(format!(
                    "feature layer {l} outside [-{n}, -1] u [1, {n}]"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames per view must be >= 1".into()));
        }
        if self.heads == 0 || backbone.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by decoder heads {}",
                backbone.width, self.heads
            )));
        }
        if self.toggles.use_attn && self.reduction != Reduction::None {
            return Err(Error::Config(
                "cross-frame attention requires the full spatiotemporal feature shape".into(),
            ));
        }
        if self.toggles.any() && self.reduction == Reduction::TemporalAvg {
            return Err(Error::Config(
                "temporal modules need a time axis; disable them for temporal_avg".into(),
            ));
        }
        Ok(())
    }
}

/// Graph leaves for one decoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: VarId,
    pub ln1_bias: VarId,
    pub q_weight: VarId,
    pub q_bias: VarId,
    pub k_weight: VarId,
    pub v_weight: VarId,
    pub v_bias: VarId,
    pub out_weight: VarId,
    pub out_bias: VarId,
    pub ln2_gain: VarId,
    pub ln2_bias: VarId,
    pub fc1_weight: VarId,
    pub fc1_bias: VarId,
    pub fc2_weight: VarId,
    pub fc2_bias: VarId,
}

pub struct BlockOutput {
    pub query: VarId,
    /// Per-head attention probabilities over the kv tokens, each (1, S).
    pub attn_probs: Vec<VarId>,
}

/// One decoder block: query (1, C) against kv tokens (S, C).
pub fn decoder_block(
    g: &mut Graph,
    query: VarId,
    kv: VarId,
    vars: &BlockVars,
    heads: usize,
    dropout: f32,
) -> Result<BlockOutput> {
    let c = {
        let qs = g.shape(query);
        let ks = g.shape(kv);
        if qs.len() != 2 || qs[0] != 1 || ks.len() != 2 || ks[1] != qs[1] {
            return Err(Error::Shape(format!(
                "decoder_block expects query (1, C) and kv (S, C), got {qs:?} / {ks:?}"
            )));
        }
        if ks[0] == 0 {
            return Err(Error::Shape("empty key/value token set".into()));
        }
        qs[1]
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "width {c} not divisible by {heads} heads"
        )));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();

    let normed_q = g.layer_norm(query, vars.ln1_gain, vars.ln1_bias, 1e-5)?;
    let qp = g.matmul(normed_q, vars.q_weight)?;
    let qp = g.add_bias(qp, vars.q_bias)?;
    // No key bias: through the row-wise softmax a shared key offset cancels,
    // so with a single query token it could never influence the output.
    let kp = g.matmul(kv, vars.k_weight)?;
    let vp = g.matmul(kv, vars.v_weight)?;
    let vp = g.add_bias(vp, vars.v_bias)?;

    let mut head_outs = Vec::with_capacity(heads);
    let mut attn_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * dh, dh)?;
        let kh = g.slice_cols(kp, h * dh, dh)?;
        let vh = g.slice_cols(vp, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let probs = g.softmax(logits, 1)?;
        attn_probs.push(probs);
        head_outs.push(g.matmul(probs, vh)?);
    }
    let merged = g.concat_cols(&head_outs)?;
    let mixed = g.matmul(merged, vars.out_weight)?;
    let mixed = g.add_bias(mixed, vars.out_bias)?;
    let mid = g.add(query, mixed)?;

    let normed_mid = g.layer_norm(mid, vars.ln2_gain, vars.ln2_bias, 1e-5)?;
    let hidden = g.matmul(normed_mid, vars.fc1_weight)?;
    let hidden = g.add_bias(hidden, vars.fc1_bias)?;
    let hidden = g.gelu(hidden);
    let hidden = g.dropout(hidden, dropout)?;
    let expanded = g.matmul(hidden, vars.fc2_weight)?;
    let expanded = g.add_bias(expanded, vars.fc2_bias)?;
    let out = g.add(mid, expanded)?;

    Ok(BlockOutput {
        query: out,
        attn_probs,
    })
}

/// Reduce a backbone layer volume to the decoder's token layout, returning a
/// (T', S', C) tensor plus the positional-table row per remaining frame slot.
pub fn reduce_volume(lv: &LayerVolume, reduction: Reduction) -> Result<(Tensor, Vec<usize>)> {
    let shape = lv.volume.shape();
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    match reduction {
        Reduction::None => Ok((lv.volume.reshaped(&[t, hw, c])?, (0..t).collect())),
        Reduction::SpatialAvg => {
            let src = lv.volume.data();
            let mut out = vec![0.0f32; t * c];
            for ti in 0..t {
                for ci in 0..c {
                    let mut sum = 0.0f64;
                    for si in 0..hw {
                        sum += src[(ti * hw + si) * c + ci] as f64;
                    }
                    out[ti * c + ci] = (sum / hw as f64) as f32;
                }
            }
            Ok((Tensor::new(vec![t, 1, c], out)?, (0..t).collect()))
        }
        Reduction::TemporalAvg => {
            let src = lv.volume.data();
            let mut out = vec![0.0f32; hw * c];
            for si in 0..hw {
                for ci in 0..c {
                    let mut sum = 0.0f64;
                    for ti in 0..t {
                        sum += src[(ti * hw + si) * c + ci] as f64;
                    }
                    out[si * c + ci] = (sum / t as f64) as f32;
                }
            }
            Ok((Tensor::new(vec![1, hw, c], out)?, vec![0]))
        }
        Reduction::ClsToken => {
            let cls = lv.cls.as_ref().ok_or_else(|| {
                Error::Contract("cls_token reduction requires stored class tokens".into())
            })?;
            Ok((cls.reshaped(&[t, 1, c])?, (0..t).collect()))
        }
    }
}
