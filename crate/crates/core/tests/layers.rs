mod common;

use common::{max_diff, random_mat, rng, to_tensor, Mat};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uam_core::autodiff::{Graph, Tensor};
use uam_core::gradsuite::{self, SUITE_SEEDS};
use uam_core::layers::{AttentionParams, ExpertParams, LinearParams, MoeParams, RmsNormParams, SsmParams};

fn run_linear(x: &[f64], w: Tensor, b: Option<Vec<f64>>) -> Vec<f64> {
    let p = LinearParams::new(w, b.map(Tensor::vector)).unwrap();
    let g = Graph::new();
    let y = p.forward(&g, g.constant(Tensor::vector(x.to_vec()))).unwrap();
    g.tensor(y).into_data()
}

#[test]
fn linear_examples() {
    assert_eq!(run_linear(&[1.0, 2.0], Tensor::identity(2), Some(vec![0.0, 0.0])), vec![1.0, 2.0]);
    assert_eq!(run_linear(&[1.0, 1.0], Tensor::identity(2), Some(vec![1.0, 1.0])), vec![2.0, 2.0]);
    let w = Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]);
    assert_eq!(run_linear(&[2.0, 3.0], w, None), vec![11.0, 16.0]);
}

#[test]
fn linear_rejects_wrong_width() {
    let p = LinearParams::zeros(3, 2, true);
    let g = Graph::new();
    assert!(p.forward(&g, g.constant(Tensor::zeros(&[2, 4]))).is_err());
}

fn run_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let p = RmsNormParams::with_eps(x.len(), eps);
    let g = Graph::new();
    let y = p.forward(&g, g.constant(Tensor::vector(x.to_vec()))).unwrap();
    g.tensor(y).into_data()
}

#[test]
fn rmsnorm_examples() {
    assert_eq!(run_norm(&[1.0; 4], 0.0), vec![1.0; 4]);
    assert_eq!(run_norm(&[0.0, 0.0], 1e-6), vec![0.0, 0.0]);
    let y = run_norm(&[3.0, 4.0], 0.0);
    assert!((y[0] - 0.84853).abs() < 1e-4 && (y[1] - 1.13137).abs() < 1e-4);
    let rms = 12.5f64.sqrt();
    assert!((y[0] - 3.0 / rms).abs() < 1e-15);
}

fn forced_scan(d: usize, logit: f64) -> SsmParams {
    let mut gate = LinearParams::zeros(d, d, true);
    gate.bias = Some(Tensor::full(&[d], logit));
    SsmParams::new(gate).unwrap()
}

fn run_scan(p: &SsmParams, x: &Mat) -> Mat {
    let g = Graph::new();
    let h = p.forward(&g, g.constant(to_tensor(x))).unwrap();
    common::from_tensor(&g.tensor(h))
}

#[test]
fn gated_scan_examples() {
    let x = vec![vec![0.2, -1.0], vec![3.0, 0.5], vec![-0.7, 0.0]];
    assert_eq!(run_scan(&forced_scan(2, 1000.0), &x), x);
    assert_eq!(run_scan(&forced_scan(2, -1000.0), &x), vec![vec![0.0; 2]; 3]);
    let ones = vec![vec![1.0]; 3];
    assert_eq!(run_scan(&forced_scan(1, 0.0), &ones), vec![vec![0.5], vec![0.75], vec![0.875]]);
}

#[test]
fn scan_state_defaults_to_zero_and_gate_bias_to_zero() {
    let p = SsmParams::init(5, &mut rng(0));
    assert_eq!(p.initial_state.data(), &[0.0; 5]);
    assert_eq!(p.gate.bias.as_ref().unwrap().data(), &[0.0; 5]);
}

#[test]
fn attention_examples() {
    let mut p = AttentionParams::identity(2, 1).unwrap();
    p.w_v = LinearParams::new(Tensor::matrix(&[[0.5, 1.0], [-1.0, 2.0]]), None).unwrap();
    let g = Graph::new();
    let q = g.constant(Tensor::matrix(&[[4.0, -3.0]]));
    let v = g.constant(Tensor::matrix(&[[1.0, 1.0]]));
    assert_eq!(g.value(p.cross(&g, q, v).unwrap()).data(), &[-0.5, 3.0]);

    let p = AttentionParams::identity(2, 1).unwrap();
    let g = Graph::new();
    let q = g.constant(Tensor::matrix(&[[1.0, 0.0], [0.0, 1.0]]));
    let v = g.constant(Tensor::matrix(&[[2.0, 0.0], [0.0, 2.0]]));
    let (out, w) = p.cross_with_weights(&g, q, v).unwrap();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let w00 = s.exp() / (s.exp() + 1.0);
    assert!((g.value(w[0]).at(&[0, 0]) - w00).abs() < 1e-15);
    assert!((w00 - 0.6698).abs() < 1e-4);
    let out = g.tensor(out);
    assert!((out.at(&[0, 0]) - 1.3396).abs() < 1e-4);
    assert!((out.at(&[0, 1]) - 0.6604).abs() < 1e-4);
}

#[test]
fn identical_tokens_get_mean_value() {
    let p = AttentionParams::init(4, 2, &mut rng(3)).unwrap();
    let row = vec![0.3, -0.1, 0.8, 0.2];
    let values = vec![vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 1.0, 0.5]];
    let g = Graph::new();
    let out = p
        .cross(&g, g.constant(to_tensor(&vec![row.clone(), row])), g.constant(to_tensor(&values)))
        .unwrap();
    let mean = vec![(0..4).map(|c| 0.5 * (values[0][c] + values[1][c])).collect::<Vec<_>>()];
    // uniform weights: a single-token attention over the mean value row
    let expect = common::attention(&mean, &mean, &p);
    let got = common::from_tensor(&g.tensor(out));
    assert!(max_diff(&vec![got[0].clone()], &expect) < 1e-12);
    assert!(max_diff(&vec![got[1].clone()], &expect) < 1e-12);
}

#[test]
fn self_attention_is_cross_attention_with_itself() {
    let p = AttentionParams::init(8, 4, &mut rng(5)).unwrap();
    let x = random_mat(&mut rng(6), 5, 8);
    let g = Graph::new();
    let xv = g.constant(to_tensor(&x));
    let a = g.tensor(p.self_attend(&g, xv).unwrap());
    let b = g.tensor(p.cross(&g, xv, xv).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn multi_head_attention_matches_dense_oracle() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let p = AttentionParams::init(8, 4, &mut r).unwrap();
        let q = random_mat(&mut r, 6, 8);
        let v = random_mat(&mut r, 6, 8);
        let g = Graph::new();
        let out = p.cross(&g, g.constant(to_tensor(&q)), g.constant(to_tensor(&v))).unwrap();
        let got = common::from_tensor(&g.tensor(out));
        assert!(max_diff(&got, &common::attention(&q, &v, &p)) < 1e-12);
    }
}

#[test]
fn moe_examples() {
    let mut r = rng(11);
    let x = random_mat(&mut r, 4, 3);
    let g = Graph::new();
    let xv = g.constant(to_tensor(&x));

    let single = MoeParams::init(3, 5, 1, 1, 0.02, &mut r).unwrap();
    let out = single.forward(&g, xv).unwrap();
    let bare = single.experts[0].forward(&g, xv).unwrap();
    assert!(g.value(out.output).data().iter().zip(g.value(bare).data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(g.value(out.aux_loss).item(), 0.02);

    let mut pair = MoeParams::init(3, 5, 2, 2, 0.0, &mut r).unwrap();
    pair.router = LinearParams::zeros(3, 2, true);
    let out = g.tensor(pair.forward(&g, xv).unwrap().output);
    let a = g.tensor(pair.experts[0].forward(&g, xv).unwrap());
    let b = g.tensor(pair.experts[1].forward(&g, xv).unwrap());
    for i in 0..out.numel() {
        assert!((out.data()[i] - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-12);
    }

    let mut top1 = MoeParams::init(3, 5, 2, 1, 0.0, &mut r).unwrap();
    top1.router = LinearParams::new(Tensor::zeros(&[3, 2]), Some(Tensor::vector(vec![2.0, -1.0]))).unwrap();
    let o = top1.forward(&g, xv).unwrap();
    assert!(o.routes.iter().all(|r| r == &[0]));
    let bare = top1.experts[0].forward(&g, xv).unwrap();
    assert_eq!(g.tensor(o.output), g.tensor(bare));
}

#[test]
fn moe_ties_go_to_the_lower_index() {
    let mut r = rng(12);
    let mut moe = MoeParams::init(2, 4, 3, 1, 0.0, &mut r).unwrap();
    moe.router = LinearParams::zeros(2, 3, true);
    let g = Graph::new();
    let o = moe.forward(&g, g.constant(Tensor::ones(&[2, 2]))).unwrap();
    assert_eq!(o.routes, vec![vec![0], vec![0]]);
}

#[test]
fn moe_matches_dense_oracle_including_aux() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let p = MoeParams::init(4, 6, 4, 2, 0.05, &mut r).unwrap();
        let x = random_mat(&mut r, 7, 4);
        let g = Graph::new();
        let o = p.forward(&g, g.constant(to_tensor(&x))).unwrap();
        let (want, aux) = common::moe(&x, &p);
        assert!(max_diff(&common::from_tensor(&g.tensor(o.output)), &want) < 1e-12);
        assert!((g.value(o.aux_loss).item() - aux).abs() < 1e-12);
    }
}

#[test]
fn expert_rejects_unchained_dims() {
    assert!(ExpertParams::new(LinearParams::zeros(3, 4, true), LinearParams::zeros(5, 3, true)).is_err());
}

#[test]
fn every_layer_passes_gradient_check() {
    for e in gradsuite::layer_checks(SUITE_SEEDS).unwrap() {
        assert!(e.passed(), "{}: {:.3e} at {}", e.name, e.report.max_rel_error, e.report.worst);
    }
}

fn seq(t: usize, d: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_sum_to_one(x in seq(5, 4), seed in 0u64..1000) {
        let p = AttentionParams::init(4, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let g = Graph::new();
        let xv = g.constant(to_tensor(&x));
        let (_, weights) = p.cross_with_weights(&g, xv, xv).unwrap();
        for w in weights {
            for row in g.value(w).data().chunks(5) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn scan_matches_sequential_reference(x in seq(8, 3), seed in 0u64..1000) {
        let p = SsmParams::init(3, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(max_diff(&run_scan(&p, &x), &common::scan(&x, &p)) < 1e-12);
    }

    #[test]
    fn scan_stays_in_convex_hull(x in seq(8, 3), seed in 0u64..1000) {
        let p = SsmParams::init(3, &mut ChaCha8Rng::seed_from_u64(seed));
        let h = run_scan(&p, &x);
        for c in 0..3 {
            let (mut lo, mut hi) = (0.0f64, 0.0f64);
            for t in 0..8 {
                lo = lo.min(x[t][c]);
                hi = hi.max(x[t][c]);
                prop_assert!(h[t][c] >= lo - 1e-12 && h[t][c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn rmsnorm_is_scale_invariant(x in prop::collection::vec(-5.0f64..5.0, 6), c in 0.01f64..100.0) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let (a, b) = (run_norm(&x, 0.0), run_norm(&scaled, 0.0));
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant(x in seq(4, 4), seed in 0u64..1000) {
        let p = AttentionParams::init(4, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let perm = [2usize, 0, 3, 1];
        let px: Mat = perm.iter().map(|&i| x[i].clone()).collect();
        let g = Graph::new();
        let a = common::from_tensor(&g.tensor(p.self_attend(&g, g.constant(to_tensor(&x))).unwrap()));
        let b = common::from_tensor(&g.tensor(p.self_attend(&g, g.constant(to_tensor(&px))).unwrap()));
        let pa: Mat = perm.iter().map(|&i| a[i].clone()).collect();
        prop_assert!(max_diff(&pa, &b) < 1e-12);
    }

    #[test]
    fn single_expert_moe_is_bitwise_the_expert(x in seq(3, 4), seed in 0u64..1000) {
        let p = MoeParams::init(4, 6, 1, 1, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let g = Graph::new();
        let xv = g.constant(to_tensor(&x));
        let o = p.forward(&g, xv).unwrap();
        let e = p.experts[0].forward(&g, xv).unwrap();
        prop_assert!(g.value(o.output).data().iter().zip(g.value(e).data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(g.value(o.aux_loss).item(), 0.3);
    }
}
