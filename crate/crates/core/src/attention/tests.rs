use super::activation::{Entmax15, Softmax};
use super::*;
use crate::tensor::finite_diff_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent oracle: solve for tau on a deliberately wide bracket with a
/// fixed 200-step halving, then evaluate the entmax definition directly.
fn entmax15_oracle(z: &[f64]) -> Vec<f64> {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = zmax / 2.0 - 2.0;
    let mut hi = zmax / 2.0;
    let sum_at = |tau: f64| -> f64 {
        z.iter()
            .map(|&zi| (zi / 2.0 - tau).max(0.0).powi(2))
            .sum()
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum_at(mid) < 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    z.iter()
        .map(|&zi| (zi / 2.0 - tau).max(0.0).powi(2))
        .collect()
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let mut v = z.to_vec();
    Softmax.forward_row(&mut v).unwrap();
    v
}

fn entmax_vec(z: &[f64]) -> Vec<f64> {
    let mut v = z.to_vec();
    Entmax15.forward_row(&mut v).unwrap();
    v
}

#[test]
fn softmax_symmetry_and_shift_invariance() {
    assert_eq!(softmax_vec(&[0.0, 0.0]), vec![0.5, 0.5]);
    for p in softmax_vec(&[7.3, 7.3, 7.3, 7.3]) {
        assert!((p - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_log_weights_case() {
    let p = softmax_vec(&[1.0_f64.ln(), 3.0_f64.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-12);
    assert!((p[1] - 0.75).abs() < 1e-12);
}

#[test]
fn entmax_symmetry() {
    let p = entmax_vec(&[2.5, 2.5]);
    assert!((p[0] - 0.5).abs() < 1e-9);
    assert!((p[1] - 0.5).abs() < 1e-9);
}

#[test]
fn entmax_boundary_case_two_zero() {
    // tau = 0 puts the second entry exactly at the support boundary.
    let p = entmax_vec(&[2.0, 0.0]);
    assert!((p[0] - 1.0).abs() < 1e-9, "p = {p:?}");
    assert!(p[1].abs() < 1e-9);
}

#[test]
fn entmax_two_support_closed_form() {
    // For z = [1, 0] both entries stay on the support and tau solves
    // 2 tau^2 - tau - 3/4 = 0, i.e. tau = (1 - sqrt(7))/4, giving
    // p = [(4 + sqrt(7))/8, (4 - sqrt(7))/8].
    let p = entmax_vec(&[1.0, 0.0]);
    let expect0 = (4.0 + 7.0_f64.sqrt()) / 8.0;
    let expect1 = (4.0 - 7.0_f64.sqrt()) / 8.0;
    assert!((p[0] - expect0).abs() < 1e-9, "p = {p:?}");
    assert!((p[1] - expect1).abs() < 1e-9);
    let oracle = entmax15_oracle(&[1.0, 0.0]);
    assert!((p[0] - oracle[0]).abs() < 1e-8);
    assert!((p[1] - oracle[1]).abs() < 1e-8);
}

#[test]
fn entmax_matches_oracle_on_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let w = rng.gen_range(2..12);
        let z: Vec<f64> = (0..w).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let got = entmax_vec(&z);
        let want = entmax15_oracle(&z);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-8, "z {z:?}: got {got:?} want {want:?}");
        }
    }
}

#[test]
fn rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..500 {
        let w = rng.gen_range(1..16);
        let z: Vec<f64> = (0..w).map(|_| rng.gen_range(-30.0..30.0)).collect();
        for act in ACTIVATIONS {
            let mut row = z.clone();
            act.forward_row(&mut row).unwrap();
            assert!(row.iter().all(|&p| p >= 0.0), "{}: {row:?}", act.name());
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "{}: sum {sum}", act.name());
        }
    }
}

#[test]
fn entmax_produces_exact_zeros_on_gaussian_rows() {
    // Statistical property of the activation at width 16.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut rows_with_zero = 0;
    let trials = 1000;
    for _ in 0..trials {
        let z: Vec<f64> = (0..16).map(|_| gauss(&mut rng)).collect();
        let p = entmax_vec(&z);
        if p.iter().any(|&v| v == 0.0) {
            rows_with_zero += 1;
        }
    }
    assert!(
        rows_with_zero * 10 >= trials * 9,
        "exact zeros in only {rows_with_zero}/{trials} rows"
    );
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[test]
fn entmax_backward_annihilates_constant_upstream() {
    let p = entmax_vec(&[0.4, 0.1, -0.3, 0.0]);
    let up = vec![3.7; 4];
    let mut dst = vec![0.0; 4];
    Entmax15.backward_row(&p, &up, &mut dst);
    for d in dst {
        assert!(d.abs() < 1e-12);
    }
}

#[test]
fn entmax_backward_zero_off_support() {
    let p = entmax_vec(&[4.0, 3.9, -4.0]);
    assert_eq!(p[2], 0.0, "third entry should be off-support: {p:?}");
    let up = vec![1.0, -2.0, 5.0];
    let mut dst = vec![0.0; 3];
    Entmax15.backward_row(&p, &up, &mut dst);
    assert_eq!(dst[2], 0.0);
}

#[test]
fn activation_gradients_match_finite_differences() {
    // softmax-then-pick and entmax15-then-pick, away from support edges.
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for kind in [ActivationKind::Softmax, ActivationKind::Entmax15] {
        let mut checked = 0;
        while checked < 5 {
            let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if kind == ActivationKind::Entmax15 && near_support_boundary(&z) {
                continue;
            }
            let f = move |tape: &Tape, t: &Tensor| {
                let p = activate_rows(tape, t, kind.resolve())?;
                let picked = tape.mul(
                    &p,
                    &Tensor::constant(
                        vec![1.0, 0.0, 2.0, 0.0, 0.5, 0.0, 0.0, 1.5],
                        vec![8],
                    ),
                )?;
                Ok(tape.sum_all(&picked))
            };
            let err = finite_diff_check(f, &z, &[8], 1e-5).unwrap();
            assert!(err < 1e-4, "{}: finite-diff error {err}", kind.as_str());
            checked += 1;
        }
    }
}

/// Entmax is piecewise smooth; skip sample points whose support would flip
/// under the finite-difference perturbation.
fn near_support_boundary(z: &[f64]) -> bool {
    let p = entmax_vec(z);
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    z.iter().zip(&p).any(|(&zi, &pi)| {
        let slack = if pi > 0.0 { pi.sqrt() } else { zmax / 2.0 - zi / 2.0 };
        slack.abs() < 1e-3
    })
}

#[test]
fn activation_registry_resolves_names() {
    assert_eq!(activation_by_name("softmax").unwrap().name(), "softmax");
    assert_eq!(activation_by_name("entmax15").unwrap().name(), "entmax15");
    assert!(activation_by_name("sparsemax").is_none());
    assert!("entmax15".parse::<ActivationKind>().is_ok());
    assert!("nope".parse::<ActivationKind>().is_err());
}

#[test]
fn causal_mask_shapes() {
    let m1 = build_causal_mask(1, DEFAULT_NEG_FILL);
    assert!(!m1.is_masked(0, 0));
    assert_eq!(m1.masked_count(), 0);
    let m3 = build_causal_mask(3, DEFAULT_NEG_FILL);
    assert_eq!(m3.masked_count(), 3);
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        assert!(m3.is_masked(i, j));
    }
    m3.validate().unwrap();
}

#[test]
fn fully_masked_row_is_rejected() {
    let tape = Tape::new();
    // a prune mask whose first row is entirely pruned, combined with the
    // causal mask, leaves row 0 with no open entry
    let pruned = AdditiveMask::from_masked_flags(2, 2, DEFAULT_NEG_FILL, |i, _| i == 0);
    let combined = build_causal_mask(2, DEFAULT_NEG_FILL)
        .combine_min(&pruned)
        .unwrap();
    assert!(combined.validate().is_err());
    let q = Tensor::constant(vec![0.0; 4], vec![2, 2]);
    let k = Tensor::constant(vec![0.0; 4], vec![2, 2]);
    let v = Tensor::constant(vec![0.0; 4], vec![2, 2]);
    let res = scaled_dot_product(
        &tape,
        &q,
        &k,
        &v,
        Some(&combined),
        ActivationKind::Softmax.resolve(),
    );
    assert!(matches!(res, Err(Error::MaskConstruction(_))));
}

#[test]
fn sdpa_single_key_normalizes_to_one() {
    let tape = Tape::new();
    let q = Tensor::constant(vec![-3.4, 1.2], vec![1, 2]);
    let k = Tensor::constant(vec![0.7, 9.9], vec![1, 2]);
    let v = Tensor::constant(vec![5.0, 6.0, 7.0], vec![1, 3]);
    for kind in [ActivationKind::Softmax, ActivationKind::Entmax15] {
        let (out, w) = scaled_dot_product(&tape, &q, &k, &v, None, kind.resolve()).unwrap();
        assert!((w.data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(out.data(), v.data());
    }
}

#[test]
fn sdpa_masked_entry_is_dominated() {
    let tape = Tape::new();
    // identical logits, second key masked out
    let q = Tensor::constant(vec![5.0, 0.0], vec![1, 2]);
    let k = Tensor::constant(vec![1.0, 0.0, 1.0, 0.0], vec![2, 2]);
    let v = Tensor::constant(vec![1.0, 2.0], vec![2, 1]);
    let mask = AdditiveMask::from_masked_flags(1, 2, DEFAULT_NEG_FILL, |_, j| j == 1);
    let (out, w) =
        scaled_dot_product(&tape, &q, &k, &v, Some(&mask), ActivationKind::Softmax.resolve())
            .unwrap();
    assert!((w.data()[0] - 1.0).abs() < 1e-8);
    assert!(w.data()[1] < 1e-8);
    assert!((out.data()[0] - 1.0).abs() < 1e-7);
}

#[test]
fn sdpa_hand_case_two_by_two() {
    let tape = Tape::new();
    // pick Q, K so the raw logit matrix is [[0, ln 3], [0, 0]] after the
    // 1/sqrt(d_k) scale with d_k = 1: use Q = [[ln 3], [0]], K = [[0], [1]]
    let q = Tensor::constant(vec![3.0_f64.ln(), 0.0], vec![2, 1]);
    let k = Tensor::constant(vec![0.0, 1.0], vec![2, 1]);
    let v = Tensor::constant(vec![2.0, -1.0, 4.0, 3.0], vec![2, 2]);
    let (out, w) =
        scaled_dot_product(&tape, &q, &k, &v, None, ActivationKind::Softmax.resolve()).unwrap();
    let expect_w = [0.25, 0.75, 0.5, 0.5];
    for (got, want) in w.data().iter().zip(expect_w) {
        assert!((got - want).abs() < 1e-12, "weights {:?}", w.data());
    }
    // output = weights x V by hand
    let expect_out = [
        0.25 * 2.0 + 0.75 * 4.0,
        0.25 * -1.0 + 0.75 * 3.0,
        0.5 * 2.0 + 0.5 * 4.0,
        0.5 * -1.0 + 0.5 * 3.0,
    ];
    for (got, want) in out.data().iter().zip(expect_out) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn sdpa_permutation_equivariance_over_keys() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let n = 3;
    let m = 5;
    let dk = 4;
    let q_data: Vec<f64> = (0..n * dk).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let k_data: Vec<f64> = (0..m * dk).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let v_data: Vec<f64> = (0..m * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mask = AdditiveMask::from_masked_flags(n, m, DEFAULT_NEG_FILL, |i, j| (i + j) % 3 == 0);
    let perm = [3usize, 0, 4, 1, 2];

    for kind in [ActivationKind::Softmax, ActivationKind::Entmax15] {
        let q = Tensor::constant(q_data.clone(), vec![n, dk]);
        let k = Tensor::constant(k_data.clone(), vec![m, dk]);
        let v = Tensor::constant(v_data.clone(), vec![m, 2]);
        let (out, w) =
            scaled_dot_product(&tape, &q, &k, &v, Some(&mask), kind.resolve()).unwrap();

        let k_perm: Vec<f64> = perm
            .iter()
            .flat_map(|&p| k_data[p * dk..(p + 1) * dk].to_vec())
            .collect();
        let v_perm: Vec<f64> = perm
            .iter()
            .flat_map(|&p| v_data[p * 2..(p + 1) * 2].to_vec())
            .collect();
        let mask_perm =
            AdditiveMask::from_masked_flags(n, m, DEFAULT_NEG_FILL, |i, j| {
                mask.is_masked(i, perm[j])
            });
        let kp = Tensor::constant(k_perm, vec![m, dk]);
        let vp = Tensor::constant(v_perm, vec![m, 2]);
        let (out_p, w_p) =
            scaled_dot_product(&tape, &q, &kp, &vp, Some(&mask_perm), kind.resolve()).unwrap();

        for (a, b) in out.data().iter().zip(out_p.data()) {
            assert!((a - b).abs() < 1e-12, "{}", kind.as_str());
        }
        for i in 0..n {
            for j in 0..m {
                let orig = w.data()[i * m + perm[j]];
                let permuted = w_p.data()[i * m + j];
                assert!((orig - permuted).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mask_soundness_for_both_activations() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let n = rng.gen_range(1..5);
        let m = rng.gen_range(2..6);
        let q_data: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k_data: Vec<f64> = (0..m * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v_data: Vec<f64> = (0..m * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // random mask keeping one open entry per row
        let keep: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
        let mut flags = vec![false; n * m];
        for i in 0..n {
            for j in 0..m {
                flags[i * m + j] = rng.gen_bool(0.5) && j != keep[i];
            }
        }
        let mask =
            AdditiveMask::from_masked_flags(n, m, DEFAULT_NEG_FILL, |i, j| flags[i * m + j]);
        let q = Tensor::constant(q_data, vec![n, 4]);
        let k = Tensor::constant(k_data, vec![m, 4]);
        let v = Tensor::constant(v_data, vec![m, 3]);
        for kind in [ActivationKind::Softmax, ActivationKind::Entmax15] {
            let (_, w) =
                scaled_dot_product(&tape, &q, &k, &v, Some(&mask), kind.resolve()).unwrap();
            for i in 0..n {
                for j in 0..m {
                    if mask.is_masked(i, j) {
                        let p = w.data()[i * m + j];
                        match kind {
                            ActivationKind::Softmax => assert!(p < 1e-8, "softmax leak {p}"),
                            ActivationKind::Entmax15 => assert!(p <= 1e-12, "entmax leak {p}"),
                        }
                    }
                }
            }
        }
    }
}

fn rand_params(
    tape: &Tape,
    rng: &mut ChaCha8Rng,
    cfg: &AttentionConfig,
) -> (MultiHeadParams, Vec<Vec<f64>>) {
    let mut raw = Vec::new();
    let mut mk = |rows: usize, cols: usize, raw: &mut Vec<Vec<f64>>| {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        raw.push(data.clone());
        Tensor::constant(data, vec![rows, cols])
    };
    let _ = tape;
    let h = cfg.n_heads;
    let params = MultiHeadParams {
        wq: (0..h).map(|_| mk(cfg.d_model, cfg.d_k, &mut raw)).collect(),
        wk: (0..h).map(|_| mk(cfg.d_model, cfg.d_k, &mut raw)).collect(),
        wv: (0..h).map(|_| mk(cfg.d_model, cfg.d_v, &mut raw)).collect(),
        wo: (0..h).map(|_| mk(cfg.d_v, cfg.d_model, &mut raw)).collect(),
    };
    (params, raw)
}

#[test]
fn multi_head_single_head_identity_reduces_to_sdpa() {
    let tape = Tape::new();
    let cfg = AttentionConfig::new(3, 1, ActivationKind::Softmax).unwrap();
    let eye = |d: usize| {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        Tensor::constant(m, vec![d, d])
    };
    let params = MultiHeadParams {
        wq: vec![eye(3)],
        wk: vec![eye(3)],
        wv: vec![eye(3)],
        wo: vec![eye(3)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xq = Tensor::constant(x.clone(), vec![4, 3]);
    let (out, w) = multi_head(&tape, &xq, &xq, None, false, &params, &cfg).unwrap();
    let (sdpa_out, sdpa_w) =
        scaled_dot_product(&tape, &xq, &xq, &xq, None, ActivationKind::Softmax.resolve())
            .unwrap();
    assert_eq!(out.data(), sdpa_out.data());
    assert_eq!(w[0].data(), sdpa_w.data());
}

#[test]
fn multi_head_causal_suppresses_future_positions() {
    let tape = Tape::new();
    let cfg = AttentionConfig::new(4, 2, ActivationKind::Softmax).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (params, _) = rand_params(&tape, &mut rng, &cfg);
    let x: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xt = Tensor::constant(x, vec![3, 4]);
    let (_, weights) = multi_head(&tape, &xt, &xt, None, true, &params, &cfg).unwrap();
    for w in &weights {
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!(w.data()[i * 3 + j] < 1e-8);
        }
    }
}

#[test]
fn multi_head_matches_straight_loop_reference() {
    // Independent reference: plain nested loops, no tape, computing
    // softmax((x Wq_h)(x Wk_h)^T / sqrt(d_k)) (x Wv_h) Wo_h summed over h.
    let tape = Tape::new();
    let cfg = AttentionConfig::new(4, 2, ActivationKind::Softmax).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let (params, raw) = rand_params(&tape, &mut rng, &cfg);
    let n = 5;
    let x: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xt = Tensor::constant(x.clone(), vec![n, 4]);
    let (out, _) = multi_head(&tape, &xt, &xt, None, false, &params, &cfg).unwrap();

    let d = 4;
    let dk = 2;
    let mat = |a: &[f64], b: &[f64], n: usize, k: usize, m: usize| -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * m + j];
                }
                c[i * m + j] = s;
            }
        }
        c
    };
    let mut expect = vec![0.0; n * d];
    for h in 0..2 {
        let wq = &raw[h];
        let wk = &raw[2 + h];
        let wv = &raw[4 + h];
        let wo = &raw[6 + h];
        let q = mat(&x, wq, n, d, dk);
        let k = mat(&x, wk, n, d, dk);
        let v = mat(&x, wv, n, d, dk);
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..dk {
                    s += q[i * dk + p] * k[j * dk + p];
                }
                scores[i * n + j] = s / (dk as f64).sqrt();
            }
        }
        for i in 0..n {
            let row = &mut scores[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let attn = mat(&scores, &v, n, n, dk);
        let proj = mat(&attn, wo, n, dk, d);
        for (e, p) in expect.iter_mut().zip(&proj) {
            *e += p;
        }
    }
    for (got, want) in out.data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn multi_head_rejects_wrong_mask_count() {
    let tape = Tape::new();
    let cfg = AttentionConfig::new(4, 2, ActivationKind::Softmax).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let (params, _) = rand_params(&tape, &mut rng, &cfg);
    let x = Tensor::constant(vec![0.0; 8], vec![2, 4]);
    let masks = vec![AdditiveMask::open(2, 2, DEFAULT_NEG_FILL)];
    let res = multi_head(&tape, &x, &x, Some(&masks), false, &params, &cfg);
    assert!(matches!(res, Err(Error::Shape(_))));
}

#[test]
fn attention_config_invariants() {
    assert!(AttentionConfig::new(6, 4, ActivationKind::Softmax).is_err());
    let mut cfg = AttentionConfig::new(8, 2, ActivationKind::Softmax).unwrap();
    cfg.neg_fill = -1.0;
    assert!(cfg.validate().is_err());
}
