mod support;

use candle_core::{DType, Device, Tensor};
use orbitkd::backbone::{masked_softmax, modality_attention_summary, AttentionStack, FrameBatch, SeriesBatch, Student, Teacher};
use orbitkd::config::{GateMode, ModelConfig, SummaryMode};
use orbitkd::nn::ParamStore;
use support::{literal_normalization, pyramid_shapes_for, random_series, toy_config};

#[test]
fn level_sizes_halve_per_level() {
    let cfg = ModelConfig {
        n_levels: 4,
        channels: vec![4, 8, 8, 8],
        ..toy_config()
    };
    for (h, w) in [(48, 48), (32, 16), (128, 128)] {
        let s = pyramid_shapes_for(&cfg, h, w, 2);
        for (l, e) in s.expected.iter().enumerate() {
            assert_eq!((e.height, e.width), (h >> l, w >> l));
            assert_eq!(e.channels, cfg.channels[l]);
        }
        assert_eq!(s.teacher_decoded, s.expected);
        assert_eq!(s.teacher_fused, s.expected);
        assert_eq!(s.student, s.teacher_decoded);
    }
}

#[test]
fn indivisible_input_is_rejected() {
    let cfg = ModelConfig {
        n_levels: 3,
        channels: vec![4, 8, 8],
        ..toy_config()
    };
    let store = ParamStore::new(DType::F32, 0);
    let teacher = Teacher::new(&cfg, store.root()).unwrap();
    let s = random_series("odd", 2, &cfg, 18, 16, 0);
    let batch = SeriesBatch::new(&[&s], DType::F32, &Device::Cpu).unwrap();
    assert!(teacher.forward(&batch).is_err());
}

#[test]
fn literal_attention_is_normalized() {
    let n = literal_normalization();
    assert!(n.attention_sum <= 1e-6, "{n:?}");
    assert!(n.summary <= 1e-6, "{n:?}");
}

#[test]
fn presoftmax_summary_varies_over_space() {
    let cfg = ModelConfig {
        summary_mode: SummaryMode::Presoftmax,
        ..toy_config()
    };
    let store = ParamStore::new(DType::F64, 3);
    let teacher = Teacher::new(&cfg, store.root()).unwrap();
    let s = random_series("p", 4, &cfg, 8, 8, 1);
    let batch = SeriesBatch::new(&[&s], DType::F64, &Device::Cpu).unwrap();
    let out = teacher.forward(&batch).unwrap();
    let summary = modality_attention_summary(&out.attention_ms, SummaryMode::Presoftmax).unwrap();
    let v = summary.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(lo > 0.0 && hi < 1.0);
    assert!(hi - lo > 1e-6, "summary is flat: {lo}..{hi}");
}

#[test]
fn padded_steps_get_zero_weight() {
    let scores = Tensor::randn(0f64, 3.0, (2, 2, 4, 3, 3), &Device::Cpu).unwrap();
    let mask = Tensor::new(&[[1f64, 1., 1., 1.], [1., 1., 0., 0.]], &Device::Cpu).unwrap();
    let a = masked_softmax(&scores, &mask).unwrap();
    let padded = a.get(1).unwrap().narrow(1, 2, 2).unwrap();
    assert_eq!(padded.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    let sums = a.sum(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    let stack = AttentionStack {
        per_head: a,
        scores,
        mask,
    };
    let summary = modality_attention_summary(&stack, SummaryMode::Literal).unwrap();
    let s1 = summary.get(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(s1.iter().all(|v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn padding_does_not_change_a_series_output() {
    let cfg = toy_config();
    let store = ParamStore::new(DType::F64, 4);
    let teacher = Teacher::new(&cfg, store.root()).unwrap();
    let short = random_series("short", 2, &cfg, 8, 8, 7);
    let long = random_series("long", 3, &cfg, 8, 8, 8);
    let alone = teacher
        .forward(&SeriesBatch::new(&[&short], DType::F64, &Device::Cpu).unwrap())
        .unwrap();
    let padded = teacher
        .forward(&SeriesBatch::new(&[&short, &long], DType::F64, &Device::Cpu).unwrap())
        .unwrap();
    for (a, p) in alone.decoded.levels.iter().zip(&padded.decoded.levels) {
        let d = (a - p.get(0).unwrap().unsqueeze(0).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-12, "padding leaked into the output: {d}");
    }
}

#[test]
fn single_acquisition_series_runs() {
    let cfg = toy_config();
    let store = ParamStore::new(DType::F32, 5);
    let teacher = Teacher::new(&cfg, store.root()).unwrap();
    let s = random_series("one", 1, &cfg, 8, 8, 2);
    let batch = SeriesBatch::new(&[&s], DType::F32, &Device::Cpu).unwrap();
    let out = teacher.forward(&batch).unwrap();
    let w = out.attention_ms.per_head.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-6));
}

#[test]
fn unit_gates_leave_groups_untouched() {
    let cfg = ModelConfig {
        singleton_gate: GateMode::Ones,
        ..toy_config()
    };
    let store = ParamStore::new(DType::F32, 6);
    let student = Student::new(&cfg, store.root()).unwrap();
    let s = random_series("g", 2, &cfg, 8, 8, 3);
    let f = s.frame(1);
    let frames = FrameBatch::new(&[&f], DType::F32, &Device::Cpu).unwrap();
    let g = student.gates(&frames).unwrap();
    assert_eq!(g.dims(), &[1, cfg.n_heads, 4, 4]);
    assert!(g.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn channel_mismatch_is_a_dimension_error() {
    let cfg = toy_config();
    let store = ParamStore::new(DType::F32, 0);
    let student = Student::new(&cfg, store.root()).unwrap();
    let other = ModelConfig {
        multispec_channels: 5,
        ..cfg.clone()
    };
    let s = random_series("c", 1, &other, 8, 8, 0);
    let f = s.frame(0);
    let frames = FrameBatch::new(&[&f], DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(student.forward(&frames), Err(orbitkd::error::Error::Dimension(_))));
}
