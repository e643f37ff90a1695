//! Temporal modulation of stacked frame features.
//!
//! Three optional modules refine a raw (T, S, C) feature volume before it
//! reaches the decoder: a depthwise width-3 convolution over time, a learned
//! per-frame positional embedding broadcast over spatial positions, and
//! cross-frame attention read out through relative-position weights. Their
//! outputs blend residually: Y = X + Y_conv + Y_pos + Y_attn, with disabled
//! modules contributing exactly nothing (the add is skipped, not zeroed).
//!
//! Cross-frame attention maps are built from the backbone's own query/key
//! projections of adjacent frames, per head with 1/sqrt(C/heads) scaling,
//! then averaged over heads. At clip boundaries the missing neighbor clamps
//! to the frame itself, which keeps every attention row stochastic.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{AttnMaps, Graph, VarId};
use crate::kernels::{matmul_raw, softmax_raw, transpose_raw};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TemporalToggles {
    pub use_conv: bool,
    pub use_pos: bool,
    pub use_attn: bool,
}

impl TemporalToggles {
    pub fn all() -> Self {
        TemporalToggles {
            use_conv: true,
            use_pos: true,
            use_attn: true,
        }
    }

    pub fn none() -> Self {
        TemporalToggles::default()
    }

    pub fn any(&self) -> bool {
        self.use_conv || self.use_pos || self.use_attn
    }
}

/// Graph leaves for one decoder layer's temporal parameters.
#[derive(Debug, Clone, Copy)]
pub struct TemporalVars {
    pub conv_weight: VarId,
    pub conv_bias: VarId,
    pub pos_table: VarId,
    pub w_prev: VarId,
    pub w_next: VarId,
}

/// Heads-averaged attention between each frame and its two neighbors.
///
/// `q_proj` / `k_proj` are (T, S, C) with S = grid_h * grid_w. Returns
/// (A_prev, A_next), each (T, S, S) row-stochastic. Boundary frames attend
/// to themselves in place of the missing neighbor.
pub fn cross_frame_attention_maps(
    q_proj: &Tensor,
    k_proj: &Tensor,
    grid_h: usize,
    grid_w: usize,
    heads: usize,
) -> Result<(AttnMaps, AttnMaps)> {
    if q_proj.rank() != 3 || k_proj.shape() != q_proj.shape() {
        return Err(Error::Shape(format!(
            "projections must be equal-shaped (T, S, C): {:?} vs {:?}",
            q_proj.shape(),
            k_proj.shape()
        )));
    }
    let (t, s, c) = (q_proj.shape()[0], q_proj.shape()[1], q_proj.shape()[2]);
    if s != grid_h * grid_w {
        return Err(Error::Shape(format!(
            "spatial size {s} does not match {grid_h}x{grid_w} grid"
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "channel width {c} not divisible by {heads} heads"
        )));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();

    fn frame(src: &Tensor, idx: usize, s: usize, c: usize) -> &[f32] {
        &src.data()[idx * s * c..(idx + 1) * s * c]
    }

    let pair = |qt: usize, kt: usize| -> Vec<f32> {
        let q = frame(q_proj, qt, s, c);
        let k = frame(k_proj, kt, s, c);
        let mut avg = vec![0.0f64; s * s];
        let mut qh = vec![0.0f32; s * dh];
        let mut kh = vec![0.0f32; s * dh];
        for h in 0..heads {
            for r in 0..s {
                qh[r * dh..(r + 1) * dh].copy_from_slice(&q[r * c + h * dh..r * c + (h + 1) * dh]);
                kh[r * dh..(r + 1) * dh].copy_from_slice(&k[r * c + h * dh..r * c + (h + 1) * dh]);
            }
            let kt_ = transpose_raw(&kh, s, dh);
            let mut logits = matmul_raw(&qh, &kt_, s, dh, s);
            for l in logits.iter_mut() {
                *l *= scale;
            }
            let probs = softmax_raw(&logits, &[s, s], 1);
            for (a, p) in avg.iter_mut().zip(&probs) {
                *a += *p as f64;
            }
        }
        let inv = 1.0 / heads as f64;
        avg.iter().map(|&v| (v * inv) as f32).collect()
    };

    let mut prev = Vec::with_capacity(t * s * s);
    let mut next = Vec::with_capacity(t * s * s);
    for ti in 0..t {
        prev.extend_from_slice(&pair(ti, ti.saturating_sub(1)));
        next.extend_from_slice(&pair(ti, (ti + 1).min(t - 1)));
    }
    let mk = |data: Vec<f32>| AttnMaps {
        frames: t,
        grid_h,
        grid_w,
        data,
    };
    Ok((mk(prev), mk(next)))
}

/// Residual temporal blend on the graph. `x` is a (T, S, C) node;
/// `pos_rows[t]` selects the positional-table row for frame slot t.
/// Cross-frame maps must be supplied whenever the attention toggle is on.
pub fn blend(
    g: &mut Graph,
    x: VarId,
    toggles: TemporalToggles,
    vars: &TemporalVars,
    pos_rows: &[usize],
    attn: Option<(&Arc<AttnMaps>, &Arc<AttnMaps>)>,
) -> Result<VarId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "temporal blend expects (T, S, C), got {shape:?}"
        )));
    }
    let (t, s) = (shape[0], shape[1]);
    if pos_rows.len() != t {
        return Err(Error::Shape(format!(
            "{} position rows for {t} frames",
            pos_rows.len()
        )));
    }
    let mut y = x;
    if toggles.use_conv {
        let conv = g.temporal_conv(x, vars.conv_weight, vars.conv_bias)?;
        y = g.add(y, conv)?;
    }
    if toggles.use_pos {
        let pos = g.pos_broadcast(vars.pos_table, pos_rows, s)?;
        y = g.add(y, pos)?;
    }
    if toggles.use_attn {
        let (prev, next) = attn.ok_or_else(|| {
            Error::Contract("cross-frame attention enabled but no projections supplied".into())
        })?;
        if prev.frames != t || prev.spatial() != s || next.frames != t || next.spatial() != s {
            return Err(Error::Shape(format!(
                "attention maps of {}x{} do not match volume of {t}x{s}",
                prev.frames,
                prev.spatial()
            )));
        }
        let from_prev = g.relpos_project(Arc::clone(prev), vars.w_prev)?;
        let from_next = g.relpos_project(Arc::clone(next), vars.w_next)?;
        let attn_sum = g.add(from_prev, from_next)?;
        y = g.add(y, attn_sum)?;
    }
    Ok(y)
}
