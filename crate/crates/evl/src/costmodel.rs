//! Analytic FLOPS accounting for encoder and decoder blocks.
//!
//! Matrix products count as 2 FLOPS per multiply-accumulate; norms, softmax
//! and activations are ignored. A transformer block with q query tokens,
//! k key/value tokens, width C and MLP factor alpha costs
//!
//! ```text
//! 2qC^2 + 2kC^2 + 2qkC + 2*alpha*qC^2
//! ```
//!
//! The decoder/encoder block ratio is reported both exactly and in the
//! simplified closed form C / (6C + hw), which is frame-count independent
//! and tends to 1/6 as C grows.
//!
//! Two add-on figures are reported deliberately. Published GFLOPS totals for
//! this architecture family count the decoder blocks (and classifier) but
//! not the cross-frame-attention products, whose hw^2 terms are of the same
//! order as a decoder block; `decoder_addon_pct` reproduces that accounting
//! while `total_addon_pct` includes every temporal module.

use crate::backbone::BackboneConfig;
use crate::decoder::{DecoderConfig, Reduction};
use crate::error::{Error, Result};
use crate::temporal::TemporalToggles;

/// Token counts and width for one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCostInput {
    /// Query tokens.
    pub q: u64,
    /// Key/value tokens.
    pub k: u64,
    /// Embedding width.
    pub c: u64,
    /// MLP expansion factor.
    pub alpha: u64,
}

/// Exact FLOPS of one transformer block.
pub fn block_flops(input: BlockCostInput) -> Result<u64> {
    let BlockCostInput { q, k, c, alpha } = input;
    if q == 0 || k == 0 || c == 0 || alpha == 0 {
        return Err(Error::InvalidParam(format!(
            "block cost inputs must be positive: {input:?}"
        )));
    }
    let c2 = c
        .checked_mul(c)
        .ok_or_else(|| Error::InvalidParam("width overflow".into()))?;
    let term = |a: u64, b: u64| -> Result<u64> {
        2u64.checked_mul(a)
            .and_then(|v| v.checked_mul(b))
            .ok_or_else(|| Error::InvalidParam("FLOPS overflow".into()))
    };
    let qk = q
        .checked_mul(k)
        .ok_or_else(|| Error::InvalidParam("token-count overflow".into()))?;
    let total = term(q, c2)?
        .checked_add(term(k, c2)?)
        .and_then(|v| v.checked_add(term(qk, c).ok()?))
        .and_then(|v| v.checked_add(term(alpha.checked_mul(q)?, c2).ok()?))
        .ok_or_else(|| Error::InvalidParam("FLOPS overflow".into()))?;
    Ok(total)
}

#[derive(Debug, Clone, Copy)]
pub struct BlockRatio {
    /// block(q=1, k=hwt) / (t * block(q=k=hw))
    pub exact: f64,
    /// C / (6C + hw)
    pub simplified: f64,
}

/// Per-block cost of a single-query decoder relative to one frame-worth of
/// encoder blocks.
pub fn decoder_encoder_ratio(h: u64, w: u64, t: u64, c: u64, alpha: u64) -> Result<BlockRatio> {
    if h == 0 || w == 0 || t == 0 || c == 0 || alpha == 0 {
        return Err(Error::InvalidParam(
            "ratio inputs must be positive".into(),
        ));
    }
    let hw = h * w;
    let dec = block_flops(BlockCostInput {
        q: 1,
        k: hw * t,
        c,
        alpha,
    })? as f64;
    let enc = block_flops(BlockCostInput {
        q: hw,
        k: hw,
        c,
        alpha,
    })? as f64;
    Ok(BlockRatio {
        exact: dec / (t as f64 * enc),
        simplified: c as f64 / (6.0 * c as f64 + hw as f64),
    })
}

/// Everything `model_flops` needs; unlike [`DecoderConfig`] this allows a
/// headless model (zero decoder blocks).
#[derive(Debug, Clone, Copy)]
pub struct ModelCostInput {
    pub backbone: BackboneConfig,
    pub decoder_blocks: usize,
    pub reduction: Reduction,
    pub toggles: TemporalToggles,
    pub num_classes: usize,
    pub frames: usize,
    pub views: usize,
}

impl ModelCostInput {
    pub fn from_configs(
        backbone: &BackboneConfig,
        decoder: &DecoderConfig,
        frames: usize,
        views: usize,
    ) -> Self {
        ModelCostInput {
            backbone: *backbone,
            decoder_blocks: decoder.blocks,
            reduction: decoder.reduction,
            toggles: decoder.toggles,
            num_classes: decoder.num_classes,
            frames,
            views,
        }
    }
}

/// Itemized FLOPS for one video (all views).
#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub frames: usize,
    pub views: usize,
    pub patch_embed: u64,
    pub backbone_blocks: u64,
    pub per_decoder_block: u64,
    pub decoder_blocks: u64,
    pub temporal_conv: u64,
    pub temporal_pos: u64,
    pub temporal_attn: u64,
    pub head: u64,
}

impl FlopsReport {
    pub fn backbone_total(&self) -> u64 {
        self.patch_embed + self.backbone_blocks
    }

    /// Decoder blocks + classifier relative to the backbone (the accounting
    /// used by published totals for this architecture family).
    pub fn decoder_addon_pct(&self) -> f64 {
        100.0 * (self.decoder_blocks + self.head) as f64 / self.backbone_total() as f64
    }

    /// Full add-on including temporal modules, relative to the backbone.
    pub fn addon_total(&self) -> u64 {
        self.decoder_blocks + self.temporal_conv + self.temporal_pos + self.temporal_attn
            + self.head
    }

    pub fn total_addon_pct(&self) -> f64 {
        100.0 * self.addon_total() as f64 / self.backbone_total() as f64
    }

    pub fn total(&self) -> u64 {
        self.backbone_total() + self.addon_total()
    }

    /// Machine-readable component -> FLOPS rows (plus derived percentages),
    /// the schema behind the `flops` subcommand's TSV output.
    pub fn kv_rows(&self) -> Vec<(String, String)> {
        let mut rows: Vec<(String, String)> = vec![
            ("frames".into(), self.frames.to_string()),
            ("views".into(), self.views.to_string()),
            ("patch_embed".into(), self.patch_embed.to_string()),
            ("backbone_blocks".into(), self.backbone_blocks.to_string()),
            ("backbone_total".into(), self.backbone_total().to_string()),
        ];
        if self.decoder_blocks > 0 {
            rows.push(("per_decoder_block".into(), self.per_decoder_block.to_string()));
            rows.push(("decoder_blocks".into(), self.decoder_blocks.to_string()));
        }
        if self.temporal_conv > 0 {
            rows.push(("temporal_conv".into(), self.temporal_conv.to_string()));
        }
        if self.temporal_pos > 0 {
            rows.push(("temporal_pos".into(), self.temporal_pos.to_string()));
        }
        if self.temporal_attn > 0 {
            rows.push(("temporal_attn".into(), self.temporal_attn.to_string()));
        }
        rows.push(("head".into(), self.head.to_string()));
        rows.push(("addon_total".into(), self.addon_total().to_string()));
        rows.push(("total".into(), self.total().to_string()));
        rows.push((
            "decoder_addon_pct".into(),
            format!("{:.6}", self.decoder_addon_pct()),
        ));
        rows.push((
            "total_addon_pct".into(),
            format!("{:.6}", self.total_addon_pct()),
        ));
        rows
    }
}

/// Analytic cost of a full model run over one video.
pub fn model_flops(input: &ModelCostInput) -> Result<FlopsReport> {
    input.backbone.validate()?;
    if input.frames == 0 || input.views == 0 {
        return Err(Error::InvalidParam("frames and views must be positive".into()));
    }
    let bb = &input.backbone;
    let hw = bb.patches() as u64;
    let c = bb.width as u64;
    let alpha = bb.mlp_factor as u64;
    let t = input.frames as u64;
    let views = input.views as u64;
    let per_frame = views * t;

    let enc_block = block_flops(BlockCostInput {
        q: hw,
        k: hw,
        c,
        alpha,
    })?;
    let backbone_blocks = per_frame * bb.depth as u64 * enc_block;
    let patch_dim = 3 * (bb.patch_size * bb.patch_size) as u64;
    let patch_embed = per_frame * 2 * hw * patch_dim * c;

    // Key/value tokens per decoder block after reduction.
    let kv_tokens = match input.reduction {
        Reduction::None => t * hw,
        Reduction::SpatialAvg | Reduction::ClsToken => t,
        Reduction::TemporalAvg => hw,
    };
    let m = input.decoder_blocks as u64;
    let per_decoder_block = if m > 0 {
        block_flops(BlockCostInput {
            q: 1,
            k: kv_tokens,
            c,
            alpha,
        })?
    } else {
        0
    };
    let decoder_blocks = views * m * per_decoder_block;

    // Temporal modules operate on the reduced volume (spatial size 1 for
    // frame-level reductions, hw for the full shape).
    let spatial = match input.reduction {
        Reduction::None => hw,
        Reduction::SpatialAvg | Reduction::ClsToken => 1,
        Reduction::TemporalAvg => 0, // no time axis, modules disabled
    };
    let temporal_conv = if input.toggles.use_conv {
        views * m * 2 * 3 * t * spatial * c
    } else {
        0
    };
    let temporal_pos = if input.toggles.use_pos {
        views * m * t * spatial * c
    } else {
        0
    };
    // Cross-frame attention: the two QK^T products plus the relative-offset
    // projection, both hw^2-sized, for both neighbor directions.
    let temporal_attn = if input.toggles.use_attn {
        let qk = 2 * 2 * t * hw * hw * c;
        let projection = 2 * 2 * t * hw * hw * c;
        views * m * (qk + projection)
    } else {
        0
    };
    let head = views * 2 * c * input.num_classes as u64;

    Ok(FlopsReport {
        frames: input.frames,
        views: input.views,
        patch_embed,
        backbone_blocks,
        per_decoder_block,
        decoder_blocks,
        temporal_conv,
        temporal_pos,
        temporal_attn,
        head,
    })
}

/// The 12-block ViT-B/16 geometry used for published-scale estimates.
pub fn vit_b16() -> BackboneConfig {
    BackboneConfig {
        image_size: 224,
        patch_size: 16,
        depth: 12,
        width: 768,
        heads: 12,
        mlp_factor: 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full_config_input(frames: usize) -> ModelCostInput {
        // One decoder block per encoder output, all temporal modules, full
        // spatiotemporal feature shape.
        ModelCostInput {
            backbone: vit_b16(),
            decoder_blocks: 12,
            reduction: Reduction::None,
            toggles: TemporalToggles::all(),
            num_classes: 400,
            frames,
            views: 1,
        }
    }

    #[test]
    fn unit_block_is_eight_flops() {
        assert_eq!(
            block_flops(BlockCostInput { q: 1, k: 1, c: 1, alpha: 1 }).unwrap(),
            8
        );
    }

    #[test]
    fn encoder_block_vit_b16() {
        let f = block_flops(BlockCostInput {
            q: 196,
            k: 196,
            c: 768,
            alpha: 4,
        })
        .unwrap();
        assert_eq!(f, 1_446_273_024);
    }

    #[test]
    fn decoder_block_eight_frames() {
        let f = block_flops(BlockCostInput {
            q: 1,
            k: 8 * 196,
            c: 768,
            alpha: 4,
        })
        .unwrap();
        assert_eq!(f, 1_857_994_752);
    }

    #[test]
    fn zero_inputs_rejected() {
        assert!(block_flops(BlockCostInput { q: 0, k: 1, c: 1, alpha: 1 }).is_err());
        assert!(decoder_encoder_ratio(14, 14, 0, 768, 4).is_err());
    }

    #[test]
    fn ratio_at_paper_configuration() {
        let r = decoder_encoder_ratio(14, 14, 8, 768, 4).unwrap();
        assert!((r.exact - 0.1606).abs() < 5e-4, "exact {}", r.exact);
        // Simplified form equals 768/4804 to 6 decimals.
        assert!((r.simplified - 768.0 / 4804.0).abs() < 5e-7);
        // Both land near 1/6.
        assert!(r.exact > 0.15 && r.exact < 0.17);
        assert!((r.exact - r.simplified).abs() / r.exact < 0.01);
    }

    #[test]
    fn simplified_ratio_limits() {
        // C -> infinity tends to 1/6: C/(6C + hw) with hw fixed.
        let big = decoder_encoder_ratio(14, 14, 8, 1 << 25, 4).unwrap();
        assert!((big.simplified - 1.0 / 6.0).abs() < 1e-6);
        // Frame count cancels out of the simplified form.
        let a = decoder_encoder_ratio(14, 14, 1, 768, 4).unwrap();
        let b = decoder_encoder_ratio(14, 14, 8, 768, 4).unwrap();
        assert_eq!(a.simplified, b.simplified);
    }

    #[test]
    fn full_configuration_decoder_addon_within_twenty_pct() {
        let report = model_flops(&full_config_input(8)).unwrap();
        let pct = report.decoder_addon_pct();
        assert!(pct <= 20.0, "decoder add-on {pct:.2}%");
        assert!(pct > 10.0, "suspiciously small add-on {pct:.2}%");
        // The temporal-inclusive figure is larger and reported separately.
        assert!(report.total_addon_pct() > pct);
    }

    #[test]
    fn doubling_frames_doubles_total_within_one_pct() {
        let r8 = model_flops(&full_config_input(8)).unwrap();
        let r16 = model_flops(&full_config_input(16)).unwrap();
        let r32 = model_flops(&full_config_input(32)).unwrap();
        let ratio_a = r16.total() as f64 / r8.total() as f64;
        let ratio_b = r32.total() as f64 / r16.total() as f64;
        assert!((ratio_a - 2.0).abs() < 0.02, "{ratio_a}");
        assert!((ratio_b - 2.0).abs() < 0.02, "{ratio_b}");
    }

    #[test]
    fn headless_model_is_head_only_addon() {
        let mut input = full_config_input(8);
        input.decoder_blocks = 0;
        input.toggles = TemporalToggles::none();
        let report = model_flops(&input).unwrap();
        assert_eq!(report.decoder_blocks, 0);
        assert_eq!(report.addon_total(), report.head);
        assert!(report.total_addon_pct() < 0.001);
        // Decoder rows must be absent from the machine-readable output.
        assert!(report.kv_rows().iter().all(|(k, _)| k != "decoder_blocks"));
    }

    #[test]
    fn default_four_block_addon_below_full_configuration() {
        let mut four = full_config_input(8);
        four.decoder_blocks = 4;
        let four = model_flops(&four).unwrap();
        let full = model_flops(&full_config_input(8)).unwrap();
        assert!(four.total_addon_pct() < full.total_addon_pct());
        assert!(four.decoder_addon_pct() < full.decoder_addon_pct());
    }

    proptest! {
        #[test]
        fn block_flops_monotone_in_each_argument(
            q in 1u64..64, k in 1u64..64, c in 1u64..64, alpha in 1u64..8,
        ) {
            let base = block_flops(BlockCostInput { q, k, c, alpha }).unwrap();
            for bumped in [
                BlockCostInput { q: q + 1, k, c, alpha },
                BlockCostInput { q, k: k + 1, c, alpha },
                BlockCostInput { q, k, c: c + 1, alpha },
                BlockCostInput { q, k, c, alpha: alpha + 1 },
            ] {
                prop_assert!(block_flops(bumped).unwrap() > base);
            }
        }
    }
}
