// Scratch calibration harness (deleted before finalizing).
use evl::backbone::{Backbone, BackboneConfig};
use evl::dataset::{synth_dataset, SynthSpec};
use evl::decoder::{DecoderConfig, Reduction};
use evl::model::EvlModel;
use evl::pipeline::{evaluate, train, FeatureCache, TrainSchedule};
use evl::sampling::{SampleMode, SamplingScheme, SamplingSpec};
use evl::temporal::TemporalToggles;

fn smoke_model(toggles: TemporalToggles, dropout: f32, head_seed: u64) -> EvlModel {
    let mut backbone = Backbone::new(BackboneConfig {
        image_size: 32, patch_size: 8, depth: 2, width: 32, heads: 4, mlp_factor: 2,
    }).unwrap();
    backbone.init_random(900);
    let config = DecoderConfig {
        blocks: 2, feature_layers: vec![-2, -1], heads: 4, mlp_factor: 2,
        dropout, num_classes: 6, frames: 8, reduction: Reduction::None, toggles,
    };
    let mut m = EvlModel::new(backbone, config).unwrap();
    m.init_head(head_seed);
    m
}

fn group_acc(report: &evl::pipeline::EvalReport) -> (f64, f64) {
    let mut app = (0.0, 0usize);
    let mut mot = (0.0, 0usize);
    for &(label, acc, count) in &report.per_class {
        if label < 2 { app.0 += acc * count as f64; app.1 += count; }
        else { mot.0 += acc * count as f64; mot.1 += count; }
    }
    (app.0 / app.1 as f64, mot.0 / mot.1 as f64)
}

fn run2(label: &str, seed: u64, toggles: TemporalToggles, reduction: Reduction, lr: f32, dropout: f32) {
    let spec = SynthSpec {
        image_size: 40, speed: 4, decoys: 2, motion_radius: (4, 5),
        ..SynthSpec::default()
    };
    let train_clips = synth_dataset(11, 480, &spec);
    let eval_clips = synth_dataset(12, 240, &spec);
    let mut backbone = Backbone::new(BackboneConfig {
        image_size: 40, patch_size: 8, depth: 2, width: 32, heads: 4, mlp_factor: 2,
    }).unwrap();
    backbone.init_random(900);
    let config = DecoderConfig {
        blocks: 2, feature_layers: vec![-2, -1], heads: 4, mlp_factor: 2,
        dropout, num_classes: 6, frames: 8, reduction, toggles,
    };
    let mut model = EvlModel::new(backbone, config).unwrap();
    model.init_head(901);
    let cache = FeatureCache::build(&model, &train_clips).unwrap();
    let ecache = FeatureCache::build(&model, &eval_clips).unwrap();
    let sampling = SamplingSpec { scheme: SamplingScheme::Segment, frames_per_view: 8, views: 1, mode: SampleMode::Train };
    let schedule = TrainSchedule { steps: 2000, batch_size: 8, peak_lr: lr, weight_decay: 0.05, seed };
    train(&mut model, &train_clips, &sampling, &schedule, &cache).unwrap();
    let esp = SamplingSpec { scheme: SamplingScheme::Segment, frames_per_view: 8, views: 1, mode: SampleMode::Eval };
    let ev = evaluate(&model, &eval_clips, &esp, &ecache).unwrap();
    let tr = evaluate(&model, &train_clips, &esp, &cache).unwrap();
    let (app, mot) = group_acc(&ev);
    println!("CAL {label}: app={app:.3} mot={mot:.3} train={:.3}", tr.top1);
}

#[allow(dead_code)]
fn run(label: &str, seed: u64, head_seed: u64, lr: f32, dropout: f32) {
    let spec = SynthSpec { motion_radius: (4, 5), ..SynthSpec::default() };
    let train_clips = synth_dataset(11, 480, &spec);
    let eval_clips = synth_dataset(12, 240, &spec);
    let pe_ca = TemporalToggles { use_conv: false, use_pos: true, use_attn: true };
    let mut model = smoke_model(pe_ca, dropout, head_seed);
    let cache = FeatureCache::build(&model, &train_clips).unwrap();
    let ecache = FeatureCache::build(&model, &eval_clips).unwrap();
    let sampling = SamplingSpec { scheme: SamplingScheme::Segment, frames_per_view: 8, views: 1, mode: SampleMode::Train };
    let schedule = TrainSchedule { steps: 2000, batch_size: 8, peak_lr: lr, weight_decay: 0.05, seed };
    train(&mut model, &train_clips, &sampling, &schedule, &cache).unwrap();
    let esp = SamplingSpec { scheme: SamplingScheme::Segment, frames_per_view: 8, views: 1, mode: SampleMode::Eval };
    let ev = evaluate(&model, &eval_clips, &esp, &ecache).unwrap();
    let (app, mot) = group_acc(&ev);
    println!("CAL {label}: app={app:.3} mot={mot:.3}");
}

#[test]
fn calibrate() {
    let blind = TemporalToggles::none();
    let pe_ca = TemporalToggles { use_conv: false, use_pos: true, use_attn: true };
    let pe_conv = TemporalToggles { use_conv: true, use_pos: true, use_attn: false };
    let _ = blind;
    for seed in [7u64, 8, 9] {
        run2(&format!("pe+ca s{seed}"), seed, pe_ca, Reduction::None, 8e-3, 0.1);
    }
    run2("pe+conv none s7", 7, pe_conv, Reduction::None, 8e-3, 0.1);
    run2("pe+conv spatial s7", 7, pe_conv, Reduction::SpatialAvg, 8e-3, 0.1);
}
