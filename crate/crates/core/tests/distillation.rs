mod support;

use candle_core::{DType, Device, Tensor};
use orbitkd::backbone::FeaturePyramid;
use orbitkd::config::DistillNorm;
use orbitkd::losses::distillation_feature_loss;
use support::detach_flow;

#[test]
fn distillation_never_reaches_the_teacher() {
    let f = detach_flow();
    assert!(f.teacher_params > 0);
    assert_eq!(f.teacher_grad_from_distil, 0.0);
}

#[test]
fn shared_head_learns_from_both_branches() {
    let f = detach_flow();
    assert!(f.head_grad_from_student > 0.0, "{f:?}");
    assert!(f.head_grad_from_teacher > 0.0, "{f:?}");
}

fn pyramid(vals: &[f64], shapes: &[(usize, usize, usize, usize)]) -> FeaturePyramid {
    let mut off = 0;
    let levels = shapes
        .iter()
        .map(|&s| {
            let n = s.0 * s.1 * s.2 * s.3;
            let t = Tensor::from_slice(&vals[off..off + n], s, &Device::Cpu).unwrap();
            off += n;
            t
        })
        .collect();
    FeaturePyramid { levels }
}

#[test]
fn feature_loss_normalizations() {
    let shapes = [(2, 1, 2, 2), (2, 2, 1, 1)];
    let s = pyramid(&[1.0; 12], &shapes);
    let t = pyramid(&[0.0; 12], &shapes);
    let mean = distillation_feature_loss(&s, &t, DistillNorm::Mean).unwrap();
    // each level contributes a mean squared error of 1
    assert!((mean.to_scalar::<f64>().unwrap() - 2.0).abs() < 1e-12);
    let sum = distillation_feature_loss(&s, &t, DistillNorm::Sum).unwrap();
    // (8 + 4) squared units over a batch of 2
    assert!((sum.to_scalar::<f64>().unwrap() - 6.0).abs() < 1e-12);
    let same = distillation_feature_loss(&s, &s, DistillNorm::Mean).unwrap();
    assert_eq!(same.to_scalar::<f64>().unwrap(), 0.0);
}

#[test]
fn mismatched_pyramids_are_rejected() {
    let a = pyramid(&[0.0; 8], &[(2, 1, 2, 2)]);
    let b = pyramid(&[0.0; 8], &[(2, 2, 2, 1)]);
    assert!(distillation_feature_loss(&a, &b, DistillNorm::Mean).is_err());
    let c = FeaturePyramid {
        levels: vec![Tensor::zeros((2, 1, 2, 2), DType::F64, &Device::Cpu).unwrap(); 2],
    };
    assert!(distillation_feature_loss(&a, &c, DistillNorm::Mean).is_err());
}
