//! Frozen per-frame image encoder.
//!
//! A standard pre-norm ViT: patch embedding, learned positional embedding,
//! a class token and `depth` attention/MLP blocks. Weights are held in a
//! [`ParamStore`] with `trainable = false` and the forward pass runs on the
//! plain kernels, entirely outside the autodiff graph: features leave this
//! module as detached constants and can never appear in a gradient record.
//!
//! Per requested layer the encoder returns the block output taken after the
//! residual sum (before the next block's norm), the query/key projections
//! that block's attention computed for the patch tokens, and the class token
//! row. Cross-frame attention downstream reuses those projections.

use crate::checkpoint::CheckpointArchive;
use crate::error::{Error, Result};
use crate::kernels::{gelu_scalar, layer_norm_raw, matmul_raw, softmax_raw, transpose_raw};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Input image side length in pixels.
    pub image_size: usize,
    /// Patch side length in pixels.
    pub patch_size: usize,
    /// Number of encoder blocks (N).
    pub depth: usize,
    /// Channel width (C).
    pub width: usize,
    pub heads: usize,
    /// MLP expansion factor (alpha).
    pub mlp_factor: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || self.depth == 0
            || self.width == 0
            || self.heads == 0
            || self.mlp_factor == 0
        {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Patch-grid side length (h = w = image_size / patch_size).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Output of one encoder layer for one frame.
#[derive(Debug, Clone)]
pub struct LayerFeatures {
    /// Patch features, shape (H, W, C).
    pub features: Tensor,
    /// Query projection the block computed for the patch tokens, (H*W, C).
    pub q_proj: Tensor,
    /// Key projection for the patch tokens, (H*W, C).
    pub k_proj: Tensor,
    /// Class-token row of the block output, (C).
    pub cls: Tensor,
}

/// One layer's features stacked over the frames of a clip.
#[derive(Debug, Clone)]
pub struct LayerVolume {
    /// (T, H, W, C)
    pub volume: Tensor,
    /// Per-frame query projections, (T, H*W, C).
    pub q_proj: Tensor,
    /// Per-frame key projections, (T, H*W, C).
    pub k_proj: Tensor,
    /// Per-frame class tokens, (T, C); dropped by caches that do not
    /// need the token reduction mode.
    pub cls: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

impl Backbone {
    /// Build with zeroed weights; call [`Backbone::init_random`] or
    /// [`Backbone::load_weights`] before encoding.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = config.width;
        let pd = 3 * config.patch_size * config.patch_size;
        let tokens = config.patches() + 1;
        let mut ins = |name: String, shape: &[usize]| {
            params
                .insert(&name, Tensor::zeros(shape), false)
                .expect("manifest names unique");
        };
        ins("backbone.patch_embed.weight".into(), &[pd, c]);
        ins("backbone.patch_embed.bias".into(), &[c]);
        ins("backbone.pos_embed".into(), &[tokens, c]);
        ins("backbone.cls_token".into(), &[c]);
        for b in 0..config.depth {
            let p = format!("backbone.blocks.{b}");
            ins(format!("{p}.ln1.gain"), &[c]);
            ins(format!("{p}.ln1.bias"), &[c]);
            for proj in ["q", "k", "v", "out"] {
                ins(format!("{p}.attn.{proj}.weight"), &[c, c]);
                ins(format!("{p}.attn.{proj}.bias"), &[c]);
            }
            ins(format!("{p}.ln2.gain"), &[c]);
            ins(format!("{p}.ln2.bias"), &[c]);
            ins(format!("{p}.mlp.fc1.weight"), &[c, c * config.mlp_factor]);
            ins(format!("{p}.mlp.fc1.bias"), &[c * config.mlp_factor]);
            ins(format!("{p}.mlp.fc2.weight"), &[c * config.mlp_factor, c]);
            ins(format!("{p}.mlp.fc2.bias"), &[c]);
        }
        Ok(Backbone { config, params })
    }

    /// Deterministic random initialization: 1/sqrt(fan_in) weights, zero
    /// biases, unit norm gains. The positional table and class token get a
    /// larger scale so that the frozen spatial signal stays comparable to
    /// content features at desk-scale widths.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = Rng::new(seed);
        for p in self.params.iter_mut() {
            let shape = p.value.shape().to_vec();
            let name = p.name.clone();
            let mut child = rng.split();
            p.value = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.ends_with("pos_embed") || name.ends_with("cls_token") {
                Tensor::randn(&shape, 0.5, &mut child)
            } else {
                let fan_in = shape[0] as f32;
                Tensor::randn(&shape, 1.0 / fan_in.sqrt(), &mut child)
            };
        }
    }

    pub fn load_weights(&mut self, archive: &CheckpointArchive) -> Result<()> {
        self.params.load_archive(archive)?;
        Ok(())
    }

    pub fn to_archive(&self) -> CheckpointArchive {
        self.params.to_archive()
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params.manifest()
    }

    /// Map a 1-based signed layer index (negative counts from the last
    /// block) to a 0-based block index.
    pub fn resolve_layer(&self, index: i64) -> Result<usize> {
        let n = self.config.depth as i64;
        let resolved = if index >= 1 && index <= n {
            index - 1
        } else if index <= -1 && index >= -n {
            n + index
        } else {
            return Err(Error::Range(format!(
                "layer index {index} outside [-{n}, -1] u [1, {n}]"
            )));
        };
        Ok(resolved as usize)
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .map(|p| &p.value)
            .expect("manifest name")
    }

    /// Split an image (S, S, 3) into row-major patch vectors (H*W, 3*p*p).
    fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.config.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::Shape(format!(
                "expected image of shape [{s}, {s}, 3], got {:?}",
                image.shape()
            )));
        }
        let p = self.config.patch_size;
        let g = self.config.grid();
        let mut out = vec![0.0f32; g * g * p * p * 3];
        let src = image.data();
        let mut w = 0;
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    for px in 0..p {
                        let base = ((gy * p + py) * s + gx * p + px) * 3;
                        out[w..w + 3].copy_from_slice(&src[base..base + 3]);
                        w += 3;
                    }
                }
            }
        }
        Tensor::new(vec![g * g, 3 * p * p], out)
    }

    /// Forward one block over (tokens, C); returns the block output and the
    /// q/k projections of the patch rows (class row dropped).
    fn block_forward(&self, block: usize, tokens: &Tensor) -> (Tensor, Tensor, Tensor) {
        let cfg = &self.config;
        let (n, c) = (tokens.shape()[0], cfg.width);
        let pfx = format!("backbone.blocks.{block}");
        let normed = layer_norm_raw(
            tokens.data(),
            self.p(&format!("{pfx}.ln1.gain")).data(),
            self.p(&format!("{pfx}.ln1.bias")).data(),
            1e-5,
        );
        let project = |what: &str| -> Vec<f32> {
            let mut out = matmul_raw(
                &normed,
                self.p(&format!("{pfx}.attn.{what}.weight")).data(),
                n,
                c,
                c,
            );
            let bias = self.p(&format!("{pfx}.attn.{what}.bias")).data();
            for row in out.chunks_mut(c) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            out
        };
        let q = project("q");
        let k = project("k");
        let v = project("v");

        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let scale = 1.0 / (dh as f32).sqrt();
        let mut attn_out = vec![0.0f32; n * c];
        let mut qh = vec![0.0f32; n * dh];
        let mut kh = vec![0.0f32; n * dh];
        let mut vh = vec![0.0f32; n * dh];
        for h in 0..heads {
            for r in 0..n {
                let src = r * c + h * dh;
                qh[r * dh..(r + 1) * dh].copy_from_slice(&q[src..src + dh]);
                kh[r * dh..(r + 1) * dh].copy_from_slice(&k[src..src + dh]);
                vh[r * dh..(r + 1) * dh].copy_from_slice(&v[src..src + dh]);
            }
            let kt = transpose_raw(&kh, n, dh);
            let mut logits = matmul_raw(&qh, &kt, n, dh, n);
            for l in logits.iter_mut() {
                *l *= scale;
            }
            let probs = softmax_raw(&logits, &[n, n], 1);
            let oh = matmul_raw(&probs, &vh, n, n, dh);
            for r in 0..n {
                attn_out[r * c + h * dh..r * c + (h + 1) * dh]
                    .copy_from_slice(&oh[r * dh..(r + 1) * dh]);
            }
        }
        let mut mixed = matmul_raw(
            &attn_out,
            self.p(&format!("{pfx}.attn.out.weight")).data(),
            n,
            c,
            c,
        );
        let out_bias = self.p(&format!("{pfx}.attn.out.bias")).data();
        let mut resid: Vec<f32> = tokens.data().to_vec();
        for (row, rrow) in mixed.chunks_mut(c).zip(resid.chunks_mut(c)) {
            for ((m, b), r) in row.iter_mut().zip(out_bias).zip(rrow.iter_mut()) {
                *r += *m + b;
            }
        }

        let normed2 = layer_norm_raw(
            &resid,
            self.p(&format!("{pfx}.ln2.gain")).data(),
            self.p(&format!("{pfx}.ln2.bias")).data(),
            1e-5,
        );
        let hidden_w = self.p(&format!("{pfx}.mlp.fc1.weight"));
        let hidden_dim = hidden_w.shape()[1];
        let mut hidden = matmul_raw(&normed2, hidden_w.data(), n, c, hidden_dim);
        let b1 = self.p(&format!("{pfx}.mlp.fc1.bias")).data();
        for row in hidden.chunks_mut(hidden_dim) {
            for (v, b) in row.iter_mut().zip(b1) {
                *v = gelu_scalar((*v + b) as f64) as f32;
            }
        }
        let mlp = matmul_raw(
            &hidden,
            self.p(&format!("{pfx}.mlp.fc2.weight")).data(),
            n,
            hidden_dim,
            c,
        );
        let b2 = self.p(&format!("{pfx}.mlp.fc2.bias")).data();
        for (row, rrow) in mlp.chunks(c).zip(resid.chunks_mut(c)) {
            for ((m, b), r) in row.iter().zip(b2).zip(rrow.iter_mut()) {
                *r += *m + b;
            }
        }

        let out = Tensor::new(vec![n, c], resid).expect("shape");
        // Patch rows only (row 0 is the class token).
        let strip_cls = |m: &[f32]| {
            Tensor::new(vec![n - 1, c], m[c..].to_vec()).expect("shape")
        };
        (out, strip_cls(&q), strip_cls(&k))
    }

    /// Encode one frame, returning features for each requested layer in the
    /// given order. Deterministic; outputs are detached constants.
    pub fn encode_frame(&self, image: &Tensor, layers: &[i64]) -> Result<Vec<LayerFeatures>> {
        let resolved: Vec<usize> = layers
            .iter()
            .map(|&l| self.resolve_layer(l))
            .collect::<Result<_>>()?;
        let cfg = &self.config;
        let (g, c) = (cfg.grid(), cfg.width);

        let patches = self.patchify(image)?;
        let hw = cfg.patches();
        let mut embedded = matmul_raw(
            patches.data(),
            self.p("backbone.patch_embed.weight").data(),
            hw,
            3 * cfg.patch_size * cfg.patch_size,
            c,
        );
        let pe_bias = self.p("backbone.patch_embed.bias").data();
        for row in embedded.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(pe_bias) {
                *v += b;
            }
        }
        let mut tokens = vec![0.0f32; (hw + 1) * c];
        tokens[..c].copy_from_slice(self.p("backbone.cls_token").data());
        tokens[c..].copy_from_slice(&embedded);
        for (v, pe) in tokens.iter_mut().zip(self.p("backbone.pos_embed").data()) {
            *v += pe;
        }
        let mut current = Tensor::new(vec![hw + 1, c], tokens)?;

        let mut taps: Vec<Option<LayerFeatures>> = vec![None; cfg.depth];
        for block in 0..cfg.depth {
            let (out, q_patch, k_patch) = self.block_forward(block, &current);
            if resolved.contains(&block) {
                let data = out.data();
                let features = Tensor::new(vec![g, g, c], data[c..].to_vec())?;
                let cls = Tensor::new(vec![c], data[..c].to_vec())?;
                taps[block] = Some(LayerFeatures {
                    features,
                    q_proj: q_patch,
                    k_proj: k_patch,
                    cls,
                });
            }
            current = out;
        }
        Ok(resolved
            .iter()
            .map(|&b| taps[b].clone().expect("tapped"))
            .collect())
    }

    /// Encode a clip: per requested layer, frame features stacked over time.
    /// Frames are encoded independently, so the stacking order is exactly the
    /// input order and no gradient can flow into the encoder.
    pub fn encode_clip(&self, frames: &[Tensor], layers: &[i64]) -> Result<Vec<LayerVolume>> {
        if frames.is_empty() {
            return Err(Error::Shape("encode_clip needs at least one frame".into()));
        }
        let first_shape = frames[0].shape().to_vec();
        if let Some(bad) = frames.iter().find(|f| f.shape() != first_shape) {
            return Err(Error::Shape(format!(
                "inconsistent frame sizes: {:?} vs {:?}",
                first_shape,
                bad.shape()
            )));
        }
        let per_frame: Vec<Vec<LayerFeatures>> = frames
            .iter()
            .map(|f| self.encode_frame(f, layers))
            .collect::<Result<_>>()?;

        let cfg = &self.config;
        let (g, c, hw, t) = (cfg.grid(), cfg.width, cfg.patches(), frames.len());
        let mut out = Vec::with_capacity(layers.len());
        for li in 0..layers.len() {
            let mut volume = Vec::with_capacity(t * hw * c);
            let mut q = Vec::with_capacity(t * hw * c);
            let mut k = Vec::with_capacity(t * hw * c);
            let mut cls = Vec::with_capacity(t * c);
            for frame in &per_frame {
                let lf = &frame[li];
                volume.extend_from_slice(lf.features.data());
                q.extend_from_slice(lf.q_proj.data());
                k.extend_from_slice(lf.k_proj.data());
                cls.extend_from_slice(lf.cls.data());
            }
            out.push(LayerVolume {
                volume: Tensor::new(vec![t, g, g, c], volume)?,
                q_proj: Tensor::new(vec![t, hw, c], q)?,
                k_proj: Tensor::new(vec![t, hw, c], k)?,
                cls: Some(Tensor::new(vec![t, c], cls)?),
            });
        }
        Ok(out)
    }
}
