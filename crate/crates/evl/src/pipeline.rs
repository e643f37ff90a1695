//! Video-level plumbing: cached frozen features, the training loop,
//! multi-view prediction, evaluation and score ensembling.
//!
//! Because the backbone never trains, per-frame features (and the q/k
//! projections cross-frame attention needs) are encoded once per clip and
//! reused for every step and view that samples those frames. Training is
//! strictly sequential and seeded; evaluation fans out over a small worker
//! pool capped by the EVL_THREADS environment variable.

use std::sync::Mutex;

use crate::backbone::LayerVolume;
use crate::dataset::VideoClip;
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::model::EvlModel;
use crate::optim::{mean_gradients, AdamW, AdamWConfig, CosineSchedule};
use crate::rng::Rng;
use crate::sampling::{sample_frames, SampleMode, SamplingSpec};
use crate::tensor::Tensor;

/// Worker count for read-only fan-out: capped by EVL_THREADS when set.
pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    std::env::var("EVL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |cap| cap.min(available))
}

/// Run `f` over 0..n on the worker pool, preserving index order of results.
fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                *results[i].lock().unwrap() = Some(f(i));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

/// Per-frame features of one clip for each decoder layer.
struct FrameEntry {
    /// Per layer: (features (H*W*C), q (H*W*C), k (H*W*C), cls (C)).
    layers: Vec<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)>,
}

/// Frozen-feature cache over a clip set.
pub struct FeatureCache {
    clips: Vec<Vec<FrameEntry>>,
    grid: usize,
    width: usize,
}

impl FeatureCache {
    /// Encode every frame of every clip once.
    pub fn build(model: &EvlModel, clips: &[VideoClip]) -> Result<FeatureCache> {
        let layers = model.feature_layers().to_vec();
        let threads = worker_threads();
        let encoded = parallel_map(clips.len(), threads, |i| -> Result<Vec<FrameEntry>> {
            clips[i]
                .frames
                .iter()
                .map(|frame| {
                    let per_layer = model.backbone.encode_frame(frame, &layers)?;
                    Ok(FrameEntry {
                        layers: per_layer
                            .into_iter()
                            .map(|lf| {
                                (
                                    lf.features.into_data(),
                                    lf.q_proj.into_data(),
                                    lf.k_proj.into_data(),
                                    lf.cls.into_data(),
                                )
                            })
                            .collect(),
                    })
                })
                .collect()
        });
        let clips = encoded.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(FeatureCache {
            clips,
            grid: model.backbone.config.grid(),
            width: model.backbone.config.width,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Assemble per-layer volumes for the given frame indices of one clip.
    pub fn volumes(&self, clip: usize, frame_idx: &[usize]) -> Result<Vec<LayerVolume>> {
        let entries = &self.clips[clip];
        let (g, c) = (self.grid, self.width);
        let hw = g * g;
        let t = frame_idx.len();
        let n_layers = entries[0].layers.len();
        (0..n_layers)
            .map(|li| {
                let mut volume = Vec::with_capacity(t * hw * c);
                let mut q = Vec::with_capacity(t * hw * c);
                let mut k = Vec::with_capacity(t * hw * c);
                let mut cls = Vec::with_capacity(t * c);
                for &fi in frame_idx {
                    let entry = entries
                        .get(fi)
                        .ok_or_else(|| Error::Range(format!("frame {fi} beyond clip length")))?;
                    let (f, qq, kk, cc) = &entry.layers[li];
                    volume.extend_from_slice(f);
                    q.extend_from_slice(qq);
                    k.extend_from_slice(kk);
                    cls.extend_from_slice(cc);
                }
                Ok(LayerVolume {
                    volume: Tensor::new(vec![t, g, g, c], volume)?,
                    q_proj: Tensor::new(vec![t, hw, c], q)?,
                    k_proj: Tensor::new(vec![t, hw, c], k)?,
                    cls: Some(Tensor::new(vec![t, c], cls)?),
                })
            })
            .collect()
    }
}

// ── Training ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f32,
    pub train_acc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
}

/// Train the head with AdamW under a half-period cosine schedule. The
/// backbone is never touched: its parameters enter each step's graph as
/// constants, and the optimizer only walks the head store.
pub fn train(
    model: &mut EvlModel,
    clips: &[VideoClip],
    sampling: &SamplingSpec,
    schedule: &TrainSchedule,
    cache: &FeatureCache,
) -> Result<TrainReport> {
    if clips.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if sampling.mode != SampleMode::Train {
        return Err(Error::Config("training requires a train-mode sampling spec".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let cosine = CosineSchedule {
        peak: schedule.peak_lr,
        total_steps: schedule.steps,
    };
    let mut optimizer = AdamW::new(AdamWConfig {
        weight_decay: schedule.weight_decay,
        ..AdamWConfig::default()
    });
    let mut order_rng = Rng::new(schedule.seed ^ 0x0BAD_5EED);
    let mut sample_rng = Rng::new(schedule.seed ^ 0x5A5A_A5A5);
    let mut dropout_rng = Rng::new(schedule.seed ^ 0x00D0_0D00);

    let mut order: Vec<usize> = (0..clips.len()).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut report = TrainReport::default();
    for step in 0..schedule.steps {
        let lr = cosine.lr_at(step);
        let mut records = Vec::with_capacity(schedule.batch_size);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for _ in 0..schedule.batch_size {
            if cursor >= order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            let clip_idx = order[cursor];
            cursor += 1;
            let clip = &clips[clip_idx];
            let view = sample_frames(clip.source_len, sampling, &mut sample_rng)?
                .pop()
                .expect("train mode yields one view");
            let volumes = cache.volumes(clip_idx, &view)?;
            let prepared = model.prepare(&volumes)?;
            let mut fwd = model.forward(&prepared, Mode::Train, dropout_rng.next_u64())?;
            let loss = fwd.graph.cross_entropy(fwd.logits, clip.label)?;
            let loss_val = fwd.graph.value(loss).item()? as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite { step });
            }
            loss_sum += loss_val;
            let logits = fwd.logits_tensor();
            let pred = argmax(logits.data());
            if pred == clip.label {
                correct += 1;
            }
            records.push(fwd.graph.backward(loss)?);
        }
        let grads = mean_gradients(&records);
        optimizer.step(&mut model.head, &grads, lr)?;
        report.metrics.push(StepMetrics {
            step,
            loss: loss_sum / schedule.batch_size as f64,
            lr,
            train_acc: correct as f64 / schedule.batch_size as f64,
        });
    }
    Ok(report)
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let _ = values;
    best
}

// ── Prediction and evaluation ───────────────────────────────────────────────

/// Per-view softmax scores averaged uniformly over views.
pub fn predict_video(
    model: &EvlModel,
    clip_idx: usize,
    clip: &VideoClip,
    sampling: &SamplingSpec,
    cache: &FeatureCache,
) -> Result<Tensor> {
    if sampling.mode != SampleMode::Eval {
        return Err(Error::Config("predict_video requires an eval-mode spec".into()));
    }
    let mut rng = Rng::new(0); // unused in eval mode
    let views = sample_frames(clip.source_len, sampling, &mut rng)?;
    let k = model.config.num_classes;
    let mut mean = vec![0.0f64; k];
    for view in &views {
        let volumes = cache.volumes(clip_idx, view)?;
        let prepared = model.prepare(&volumes)?;
        let probs = model.predict(&prepared)?;
        for (m, &p) in mean.iter_mut().zip(probs.data()) {
            *m += p as f64;
        }
    }
    let inv = 1.0 / views.len() as f64;
    Tensor::new(vec![k], mean.iter().map(|&v| (v * inv) as f32).collect())
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub top1: f64,
    /// (label, accuracy, clip count) per class present in the set.
    pub per_class: Vec<(usize, f64, usize)>,
    /// Mean-of-softmax score vector per clip, in input order.
    pub scores: Vec<Tensor>,
}

pub fn evaluate(
    model: &EvlModel,
    clips: &[VideoClip],
    sampling: &SamplingSpec,
    cache: &FeatureCache,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let threads = worker_threads();
    let scores = parallel_map(clips.len(), threads, |i| {
        predict_video(model, i, &clips[i], sampling, cache)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(score_report(&scores, clips))
}

fn score_report(scores: &[Tensor], clips: &[VideoClip]) -> EvalReport {
    let k = scores[0].numel();
    let mut per_class_total = vec![0usize; k];
    let mut per_class_hit = vec![0usize; k];
    let mut hits = 0usize;
    for (score, clip) in scores.iter().zip(clips) {
        per_class_total[clip.label] += 1;
        if argmax(score.data()) == clip.label {
            per_class_hit[clip.label] += 1;
            hits += 1;
        }
    }
    let per_class = (0..k)
        .filter(|&c| per_class_total[c] > 0)
        .map(|c| {
            (
                c,
                per_class_hit[c] as f64 / per_class_total[c] as f64,
                per_class_total[c],
            )
        })
        .collect();
    EvalReport {
        top1: hits as f64 / clips.len() as f64,
        per_class,
        scores: scores.to_vec(),
    }
}

/// Accuracy of score vectors against labels.
pub fn accuracy(scores: &[Tensor], labels: &[usize]) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| argmax(s.data()) == l)
        .count();
    hits as f64 / labels.len() as f64
}

// ── Ensembling ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub alpha: f64,
    pub accuracy: f64,
    pub combined: Vec<Tensor>,
}

/// Combine two models' class-probability vectors as alpha*a + (1-alpha)*b,
/// searching alpha over {0.0, 0.1, ..., 1.0} for the best validation
/// accuracy. Ties break toward 0.5.
pub fn ensemble(
    scores_a: &[Tensor],
    scores_b: &[Tensor],
    labels: &[usize],
) -> Result<EnsembleResult> {
    if scores_a.is_empty() || scores_a.len() != scores_b.len() || scores_a.len() != labels.len() {
        return Err(Error::InvalidParam(
            "ensemble needs equal, non-empty score and label lists".into(),
        ));
    }
    if scores_a
        .iter()
        .zip(scores_b)
        .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Shape("ensemble members disagree on class count".into()));
    }
    let combine = |alpha: f64| -> Vec<Tensor> {
        scores_a
            .iter()
            .zip(scores_b)
            .map(|(a, b)| {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (alpha * x as f64 + (1.0 - alpha) * y as f64) as f32)
                    .collect();
                Tensor::new(a.shape().to_vec(), data).expect("same shape")
            })
            .collect()
    };
    // Grid visited from the center outward so exact ties resolve toward 0.5.
    let mut best: Option<EnsembleResult> = None;
    for step in [5i64, 4, 6, 3, 7, 2, 8, 1, 9, 0, 10] {
        let alpha = step as f64 / 10.0;
        let combined = combine(alpha);
        let acc = accuracy(&combined, labels);
        if best.as_ref().map_or(true, |b| acc > b.accuracy) {
            best = Some(EnsembleResult {
                alpha,
                accuracy: acc,
                combined,
            });
        }
    }
    Ok(best.expect("grid non-empty"))
}
