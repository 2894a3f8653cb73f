//! Toy fixtures shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use orbitkd::backbone::{temporal_collapse, FeaturePyramid, FrameBatch, SeriesBatch, Student, Teacher};
use orbitkd::config::{GateMode, ModelConfig};
use orbitkd::data::make_centerness_target;
use orbitkd::gradcheck::{check_gradients, group_reports, GradCheckOptions, GradCheckReport};
use orbitkd::head::{DenseOutputs, PanopticHead};
use orbitkd::losses::{distillation_feature_loss, paps_total_loss, BatchTargets};
use orbitkd::nn::ParamStore;
use orbitkd::types::{AcquisitionSeries, PanopticTarget, ParcelRecord};

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_levels: 2,
        channels: vec![4, 8],
        n_heads: 2,
        shape_patch_size: 4,
        n_classes: 3,
        multispec_channels: 3,
        radar_channels: 2,
        key_dim: 4,
        date_encoding_dim: 4,
        head_channels: 4,
        shape_feature_channels: 2,
        ..ModelConfig::default()
    }
}

pub fn random_series(id: &str, t: usize, cfg: &ModelConfig, h: usize, w: usize, seed: u64) -> AcquisitionSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ms = Array4::from_shape_fn((t, cfg.multispec_channels, h, w), |_| rng.gen_range(-1.0f32..1.0));
    let sar = Array4::from_shape_fn((t, cfg.radar_channels, h, w), |_| rng.gen_range(-1.0f32..1.0));
    let mut day = 0;
    let dates: Vec<i64> = (0..t)
        .map(|_| {
            day += rng.gen_range(3..40);
            day
        })
        .collect();
    AcquisitionSeries {
        patch_id: id.to_string(),
        multispec: ms,
        radar: sar,
        radar_dates: dates.clone(),
        dates,
    }
}

/// Axis-aligned rectangles `(class, r0, c0, height, width)` as a target.
pub fn rect_target(h: usize, w: usize, rects: &[(u32, usize, usize, usize, usize)]) -> PanopticTarget {
    let mut semantic = Array2::zeros((h, w));
    let mut instance = Array2::zeros((h, w));
    let mut parcels = Vec::new();
    for (i, &(class, r0, c0, rh, rw)) in rects.iter().enumerate() {
        let id = i as u32 + 1;
        let mask = Array2::from_shape_fn((h, w), |(r, c)| r >= r0 && r < r0 + rh && c >= c0 && c < c0 + rw);
        for ((r, c), &m) in mask.indexed_iter() {
            if m {
                semantic[[r, c]] = class;
                instance[[r, c]] = id;
            }
        }
        parcels.push(ParcelRecord::from_mask(id, class, mask).unwrap());
    }
    PanopticTarget {
        semantic,
        instance,
        parcels,
    }
}

fn random_var(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Var {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Var::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random_var(shape, -1.0, 1.0, rng).as_tensor().detach()
}

/// `sum(x * r)` with a fixed random `r` per output.
fn projection(outputs: &[Tensor], probes: &[Tensor]) -> orbitkd::error::Result<Tensor> {
    let mut acc = Tensor::zeros((), DType::F64, &Device::Cpu)?;
    for (o, p) in outputs.iter().zip(probes) {
        acc = (acc + (o * p)?.sum_all()?)?;
    }
    Ok(acc)
}

fn named(vars: &[(&str, &Var)]) -> Vec<(String, Var)> {
    vars.iter().map(|(n, v)| (n.to_string(), (*v).clone())).collect()
}

/// One merged report per checked block, with names prefixed by `tag`.
fn run(tag: &str, vars: Vec<(String, Var)>, depth: usize, f: impl Fn() -> orbitkd::error::Result<Tensor>) -> Vec<GradCheckReport> {
    // loss inputs are small and sparse in gradient, so probe all of them
    let max_coords = if tag.starts_with("loss") { usize::MAX } else { 24 };
    let opts = GradCheckOptions {
        max_coords,
        ..GradCheckOptions::default()
    };
    let reports = check_gradients(&vars, f, opts).unwrap();
    group_reports(&reports, depth)
        .into_iter()
        .map(|mut r| {
            r.name = format!("{tag}/{}", r.name);
            r
        })
        .collect()
}

/// Finite-difference checks of every loss and every backbone block at f64
/// on 8x8 inputs with at most 3 time steps.
pub fn gradient_suite() -> Vec<GradCheckReport> {
    let cfg = toy_config();
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();

    // losses against their prediction inputs
    let (h, w) = (8, 8);
    let t0 = rect_target(h, w, &[(1, 0, 0, 4, 3), (3, 4, 3, 4, 5)]);
    let t1 = rect_target(h, w, &[(2, 1, 1, 5, 6)]);
    let c0 = make_centerness_target(&t0).unwrap();
    let c1 = make_centerness_target(&t1).unwrap();
    let targets = BatchTargets::new(&[&t0, &t1], &[&c0, &c1], cfg.beta, DType::F64, &dev).unwrap();
    let heat = random_var(&[2, 1, h, w], 0.05, 0.95, &mut rng);
    let size = random_var(&[2, 2, h, w], 1.3, 6.7, &mut rng);
    let logits = random_var(&[2, cfg.n_classes, h, w], -2.0, 2.0, &mut rng);
    let feats = random_var(&[2, cfg.shape_feature_channels, h, w], -1.0, 1.0, &mut rng);
    let store = ParamStore::new(DType::F64, 5);
    let head = PanopticHead::new(&cfg, store.root().pp("head")).unwrap();
    let dense = DenseOutputs {
        heatmap: heat.as_tensor().clone(),
        size: size.as_tensor().clone(),
        class_logits: logits.as_tensor().clone(),
        shape_features: feats.as_tensor().clone(),
    };
    let loss = || -> orbitkd::error::Result<_> { Ok(paps_total_loss(&head, &dense, &targets)?.expect("nonempty batch")) };
    out.extend(run("loss.center", named(&[("heatmap", &heat)]), 1, || Ok(loss()?.center)));
    out.extend(run("loss.class", named(&[("logits", &logits)]), 1, || Ok(loss()?.class)));
    out.extend(run("loss.size", named(&[("size", &size)]), 1, || Ok(loss()?.size)));
    let mut shape_vars = named(&[("features", &feats)]);
    shape_vars.extend(store.named_vars().into_iter().filter(|(n, _)| n.starts_with("head.shape_conv") || n.starts_with("head.shape_out")));
    out.extend(run("loss.shape", shape_vars, 2, || Ok(loss()?.shape)));

    let s_levels = [random_var(&[2, 4, 8, 8], -1.0, 1.0, &mut rng), random_var(&[2, 8, 4, 4], -1.0, 1.0, &mut rng)];
    let teacher_pyr = FeaturePyramid {
        levels: vec![random_tensor(&[2, 4, 8, 8], &mut rng), random_tensor(&[2, 8, 4, 4], &mut rng)],
    };
    let student_pyr = FeaturePyramid {
        levels: s_levels.iter().map(|v| v.as_tensor().clone()).collect(),
    };
    out.extend(run(
        "loss.distillation",
        named(&[("student.level1", &s_levels[0]), ("student.level2", &s_levels[1])]),
        1,
        || distillation_feature_loss(&student_pyr, &teacher_pyr, cfg.distill_norm),
    ));

    // temporal collapse on its own
    let e = random_var(&[1, 3, 4, 4, 4], -1.0, 1.0, &mut rng);
    let wts = random_var(&[1, 2, 3, 4, 4], 0.0, 1.0, &mut rng);
    let probe = random_tensor(&[1, 4, 4, 4], &mut rng);
    out.extend(run("temporal_collapse", named(&[("features", &e), ("weights", &wts)]), 1, || {
        projection(&[temporal_collapse(e.as_tensor(), wts.as_tensor())?], std::slice::from_ref(&probe))
    }));

    // teacher: encoders, L-TAE, mixing, fusion and decoder, on a padded batch
    let store = ParamStore::new(DType::F64, 7);
    let teacher = Teacher::new(&cfg, store.root()).unwrap();
    let a = random_series("a", 3, &cfg, h, w, 1);
    let b = random_series("b", 2, &cfg, h, w, 2);
    let batch = SeriesBatch::new(&[&a, &b], DType::F64, &dev).unwrap();
    let probes = [random_tensor(&[2, 4, 8, 8], &mut rng), random_tensor(&[2, 8, 4, 4], &mut rng)];
    out.extend(run("teacher", store.named_vars(), 2, || {
        projection(&teacher.forward(&batch)?.decoded.levels, &probes)
    }));

    // student with learned sigmoid gates
    let scfg = ModelConfig {
        singleton_gate: GateMode::Sigmoid,
        ..cfg.clone()
    };
    let store = ParamStore::new(DType::F64, 9);
    let student = Student::new(&scfg, store.root()).unwrap();
    let (fa, fb) = (a.frame(1), b.frame(0));
    let frames = FrameBatch::new(&[&fa, &fb], DType::F64, &dev).unwrap();
    out.extend(run("student", store.named_vars(), 2, || {
        projection(&student.forward(&frames)?.levels, &probes)
    }));
    out
}

/// Worst deviations of literal-mode attention from its normalization.
#[derive(Debug, Clone, Copy)]
pub struct Normalization {
    /// max |sum_t a - 1| over pixels, heads and levels
    pub attention_sum: f64,
    /// max |summary - 1/T| with T the real series length
    pub summary: f64,
}

/// Runs a literal-mode teacher at f32 on a padded batch (T = 6 and T = 4)
/// and measures both normalizations at every level.
pub fn literal_normalization() -> Normalization {
    use orbitkd::backbone::modality_attention_summary;
    use orbitkd::config::SummaryMode;
    let cfg = ModelConfig {
        summary_mode: SummaryMode::Literal,
        n_levels: 3,
        channels: vec![4, 8, 8],
        ..toy_config()
    };
    let store = ParamStore::new(DType::F32, 21);
    let teacher = Teacher::new(&cfg, store.root()).unwrap();
    let a = random_series("a", 6, &cfg, 16, 16, 3);
    let b = random_series("b", 4, &cfg, 16, 16, 4);
    let batch = SeriesBatch::new(&[&a, &b], DType::F32, &Device::Cpu).unwrap();
    let out = teacher.forward(&batch).unwrap();
    let mut worst = Normalization {
        attention_sum: 0.0,
        summary: 0.0,
    };
    for stack in [&out.attention_ms, &out.attention_sar] {
        for l in 0..cfg.n_levels {
            let side = 16 >> l;
            let s = stack.interpolate(side, side).unwrap();
            let sums = s.per_head.sum(2).unwrap().to_dtype(DType::F64).unwrap();
            let dev = (sums - 1.0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            worst.attention_sum = worst.attention_sum.max(dev);
            let summary = modality_attention_summary(&s, SummaryMode::Literal).unwrap();
            for (i, len) in batch.lengths.iter().enumerate() {
                let v = summary.get(i).unwrap().to_dtype(DType::F64).unwrap();
                let dev = (v - 1.0 / *len as f64).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                worst.summary = worst.summary.max(dev);
            }
        }
    }
    worst
}

/// Gradient flow facts for the online objective.
#[derive(Debug, Clone, Copy)]
pub struct DetachFlow {
    pub teacher_params: usize,
    /// max |d L_distil / d theta_teacher|; parameters without a gradient count as 0
    pub teacher_grad_from_distil: f64,
    /// L2 norm of the head gradient through the student branch alone
    pub head_grad_from_student: f64,
    /// L2 norm of the head gradient through `lambda1 * L_teacher` alone
    pub head_grad_from_teacher: f64,
}

fn grad_norm(grads: &candle_core::backprop::GradStore, vars: &[(String, Var)], max: bool) -> f64 {
    let mut acc = 0f64;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            let g = g.to_dtype(DType::F64).unwrap();
            if max {
                acc = acc.max(g.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap());
            } else {
                acc += g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            }
        }
    }
    if max {
        acc
    } else {
        acc.sqrt()
    }
}

pub fn detach_flow() -> DetachFlow {
    use orbitkd::harness::Network;
    let cfg = toy_config();
    let net = Network::new(&cfg, true, true, DType::F64, 17).unwrap();
    let dev = Device::Cpu;
    let (h, w) = (8, 8);
    let a = random_series("a", 3, &cfg, h, w, 5);
    let b = random_series("b", 3, &cfg, h, w, 6);
    let t0 = rect_target(h, w, &[(1, 0, 0, 4, 3), (3, 4, 3, 4, 5)]);
    let t1 = rect_target(h, w, &[(2, 1, 1, 5, 6)]);
    let c0 = make_centerness_target(&t0).unwrap();
    let c1 = make_centerness_target(&t1).unwrap();
    let targets = BatchTargets::new(&[&t0, &t1], &[&c0, &c1], cfg.beta, DType::F64, &dev).unwrap();
    let series = SeriesBatch::new(&[&a, &b], DType::F64, &dev).unwrap();
    let (fa, fb) = (a.frame(2), b.frame(0));
    let frames = FrameBatch::new(&[&fa, &fb], DType::F64, &dev).unwrap();

    let (t_out, t_dense) = net.teacher_forward(&series).unwrap();
    let (s_pyr, s_dense) = net.student_forward(&frames).unwrap();
    let ld = distillation_feature_loss(&s_pyr, &t_out.decoded, cfg.distill_norm).unwrap();
    let ls = paps_total_loss(net.head(), &s_dense, &targets).unwrap().unwrap();
    let lt = paps_total_loss(net.head(), &t_dense, &targets).unwrap().unwrap();

    let teacher_vars = net.teacher_vars();
    let head_vars = net.head_vars();
    DetachFlow {
        teacher_params: teacher_vars.len(),
        teacher_grad_from_distil: grad_norm(&ld.backward().unwrap(), &teacher_vars, true),
        head_grad_from_student: grad_norm(&ls.total.backward().unwrap(), &head_vars, false),
        head_grad_from_teacher: grad_norm(&(lt.total * cfg.lambda1).unwrap().backward().unwrap(), &head_vars, false),
    }
}

/// Level shapes of the decoded and fused teacher pyramids and of the
/// student pyramid for one `(h, w)` input.
pub struct PyramidShapes {
    pub expected: Vec<orbitkd::config::LevelShape>,
    pub teacher_decoded: Vec<orbitkd::config::LevelShape>,
    pub teacher_fused: Vec<orbitkd::config::LevelShape>,
    pub student: Vec<orbitkd::config::LevelShape>,
}

pub fn pyramid_shapes_for(cfg: &ModelConfig, h: usize, w: usize, t: usize) -> PyramidShapes {
    let store = ParamStore::new(DType::F32, 1);
    let teacher = Teacher::new(cfg, store.root().pp("teacher")).unwrap();
    let student = Student::new(cfg, store.root().pp("student")).unwrap();
    let s = random_series("s", t, cfg, h, w, 9);
    let batch = SeriesBatch::new(&[&s], DType::F32, &Device::Cpu).unwrap();
    let out = teacher.forward(&batch).unwrap();
    let f = s.frame(0);
    let frames = FrameBatch::new(&[&f], DType::F32, &Device::Cpu).unwrap();
    PyramidShapes {
        expected: orbitkd::config::pyramid_shapes(cfg, h, w).unwrap(),
        teacher_decoded: out.decoded.shapes().unwrap(),
        teacher_fused: out.fused.shapes().unwrap(),
        student: student.forward(&frames).unwrap().shapes().unwrap(),
    }
}

/// Ground truth of random rectangles (some void) on a `size x size` grid,
/// plus a prediction that is either a noisy copy or independent.
pub fn random_panoptic_pair(seed: u64, size: usize, n_classes: u32) -> (orbitkd::metrics::PanopticMaps, orbitkd::metrics::PanopticMaps) {
    use orbitkd::metrics::PanopticMaps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let void = n_classes + 1;
    let paint = |rng: &mut ChaCha8Rng, allow_void: bool| {
        let mut sem = Array2::<u32>::zeros((size, size));
        let mut ins = Array2::<u32>::zeros((size, size));
        for id in 1..=rng.gen_range(0..7u32) {
            let (rh, rw) = (rng.gen_range(1..=size / 2), rng.gen_range(1..=size / 2));
            let (r0, c0) = (rng.gen_range(0..=size - rh), rng.gen_range(0..=size - rw));
            let class = if allow_void && rng.gen_bool(0.15) { void } else { rng.gen_range(1..=n_classes) };
            for r in r0..r0 + rh {
                for c in c0..c0 + rw {
                    sem[[r, c]] = class;
                    ins[[r, c]] = if class == void { 0 } else { id };
                }
            }
        }
        (sem, ins)
    };
    let (gs, gi) = paint(&mut rng, true);
    let (ps, pi) = if rng.gen_bool(0.7) {
        // noisy copy: void becomes a random class, some pixels relabelled
        let flip = rng.gen_range(0.0..0.4);
        let mut ps = gs.mapv(|s| if s == void { 1 } else { s });
        let mut pi = gi.clone();
        for r in 0..size {
            for c in 0..size {
                if rng.gen_bool(flip) {
                    ps[[r, c]] = rng.gen_range(0..=n_classes);
                    pi[[r, c]] = rng.gen_range(0..4);
                }
            }
        }
        (ps, pi)
    } else {
        paint(&mut rng, false)
    };
    (PanopticMaps::new(ps, pi).unwrap(), PanopticMaps::new(gs, gi).unwrap())
}

/// Agreement between the fast evaluator and the brute-force oracle.
#[derive(Debug, Clone, Copy)]
pub struct OracleAgreement {
    pub instances: usize,
    pub tally_mismatches: usize,
    pub max_ratio_error: f64,
}

/// Compares both evaluators per instance on `n` random 16x16 instances.
pub fn oracle_agreement(n: usize, seed: u64) -> OracleAgreement {
    use orbitkd::metrics::{brute_force_oracle, evaluate_dataset, MetricReport};
    let k = 4;
    let mut out = OracleAgreement {
        instances: n,
        tally_mismatches: 0,
        max_ratio_error: 0.0,
    };
    let ratios = |r: &MetricReport| {
        let mut v: Vec<f64> = r.classes.iter().flat_map(|c| [c.sq, c.rq, c.pq]).collect();
        for a in [&r.average, &r.average_with_background] {
            v.extend([a.sq, a.rq, a.pq]);
        }
        v
    };
    for i in 0..n {
        let (p, g) = random_panoptic_pair(seed.wrapping_add(i as u64), 16, k);
        let pred = vec![(format!("p{i}"), p)];
        let gt = vec![(format!("p{i}"), g)];
        let fast = evaluate_dataset(&pred, &gt, k as usize).unwrap();
        let slow = brute_force_oracle(&pred, &gt, k as usize).unwrap();
        let same_counts = fast
            .classes
            .iter()
            .zip(&slow.classes)
            .all(|(a, b)| (a.class_id, a.tp, a.fp, a.fn_) == (b.class_id, b.tp, b.fp, b.fn_))
            && fast.classes.len() == slow.classes.len()
            && fast.evaluated_classes == slow.evaluated_classes;
        if !same_counts {
            out.tally_mismatches += 1;
        }
        for (a, b) in ratios(&fast).into_iter().zip(ratios(&slow)) {
            out.max_ratio_error = out.max_ratio_error.max((a - b).abs());
        }
    }
    out
}
