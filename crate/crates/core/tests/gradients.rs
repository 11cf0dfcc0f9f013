mod common;

use common::*;
use fusion_lab::distillstore::ResidualPolicy;
use fusion_lab::fuse::{fusion_loss, kl_divergence, kl_divergence_with_grad, profuser_loss, KlSettings, PhaseWeights};
use fusion_lab::tinylm::{cross_entropy_grad, TinyLM};
use rand::Rng;

const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

#[test]
fn sft_gradient_matches_central_differences() {
    let mut r = rng(1);
    for _ in 0..6 {
        let m = random_model(&mut r);
        let item = random_item(&mut r, &m);
        let logits = m.teacher_forcing_logits(&item.x, &item.y).unwrap();
        let g = m.backward(&item.x, &item.y, &cross_entropy_grad(&logits, &item.y)).unwrap();
        let err = max_fd_rel_error(&m, &g.flat(), EPS, FLOOR, |mm: &TinyLM| {
            mm.sequence_cross_entropy(&item.x, &item.y).unwrap()
        });
        assert!(err < 1e-4, "sft rel err {err}");
    }
}

#[test]
fn fusion_gradient_matches_central_differences() {
    let mut r = rng(2);
    for _ in 0..6 {
        let m = random_model(&mut r);
        let item = random_item(&mut r, &m);
        let beta = r.gen_range(0.05..1.0);
        let kl = KlSettings {
            temperature: r.gen_range(0.5..2.5),
            ..Default::default()
        };
        let (_, up) = fusion_loss(&m, &item, beta, &kl).unwrap();
        let g = m.backward(&item.x, &item.y, &up).unwrap();
        let err = max_fd_rel_error(&m, &g.flat(), EPS, FLOOR, |mm: &TinyLM| fusion_loss(mm, &item, beta, &kl).unwrap().0);
        assert!(err < 1e-4, "fusion rel err {err}");
    }
}

#[test]
fn profuser_gradient_matches_central_differences() {
    let mut r = rng(3);
    for _ in 0..6 {
        let m = random_model(&mut r);
        let infer = random_item(&mut r, &m);
        let train = random_item(&mut r, &m);
        let w = PhaseWeights {
            w1: r.gen_range(0.0..1.0),
            w2: r.gen_range(0.0..1.0),
            beta: 0.0,
            beta_infer: r.gen_range(0.0..1.0),
            beta_train: r.gen_range(0.0..1.0),
        };
        let kl = KlSettings::default();
        let (_, g) = profuser_loss(&m, Some(&infer), Some(&train), &w, &kl).unwrap();
        let err = max_fd_rel_error(&m, &g.flat(), EPS, FLOOR, |mm: &TinyLM| {
            profuser_loss(mm, Some(&infer), Some(&train), &w, &kl).unwrap().0
        });
        assert!(err < 1e-4, "profuser rel err {err}");
    }
}

#[test]
fn kl_logit_gradient_under_both_residual_policies() {
    let mut r = rng(4);
    for policy in [ResidualPolicy::SingleBucket, ResidualPolicy::UniformOverRest] {
        for _ in 0..50 {
            let v = r.gen_range(2..12);
            let teacher = random_sparse(&mut r, v);
            let z = random_logits(&mut r, v, 3.0);
            let s = KlSettings {
                temperature: r.gen_range(0.5..3.0),
                residual_policy: policy,
            };
            let (_, g) = kl_divergence_with_grad(&teacher, &z, &s).unwrap();
            for j in 0..v {
                let mut zp = z.clone();
                zp[j] += EPS;
                let mut zm = z.clone();
                zm[j] -= EPS;
                let n = (kl_divergence(&teacher, &zp, &s).unwrap() - kl_divergence(&teacher, &zm, &s).unwrap()) / (2.0 * EPS);
                assert!((n - g[j]).abs() <= 1e-6 * n.abs().max(1.0), "{policy:?} j={j}: {n} vs {}", g[j]);
            }
        }
    }
}
