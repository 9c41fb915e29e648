use super::*;
use crate::attention::ActivationKind;
use crate::pipeline::{build_masks, AttentionStats, PruneSpec, StatsCollector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lm_config(d: usize, heads: usize, layers: usize, vocab: usize, max_len: usize) -> TransformerConfig {
    TransformerConfig {
        arch: Arch::LmOnly,
        n_layers: layers,
        attention: AttentionConfig::new(d, heads, ActivationKind::Softmax).unwrap(),
        d_ff: d * 4,
        vocab_size: vocab,
        max_src_len: max_len,
        max_tgt_len: max_len,
        tie_embeddings: false,
    }
}

fn seq2seq_config(d: usize, heads: usize, layers: usize, vocab: usize) -> TransformerConfig {
    TransformerConfig {
        arch: Arch::EncDec,
        n_layers: layers,
        attention: AttentionConfig::new(d, heads, ActivationKind::Softmax).unwrap(),
        d_ff: d * 2,
        vocab_size: vocab,
        max_src_len: 10,
        max_tgt_len: 12,
        tie_embeddings: false,
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = lm_config(8, 2, 1, 11, 6);
    let a = init_params(&cfg, 7).unwrap();
    let b = init_params(&cfg, 7).unwrap();
    assert_eq!(a, b);
    let c = init_params(&cfg, 8).unwrap();
    assert!(
        a.weights.iter().any(|(k, v)| c.weights[k] != *v),
        "different seeds must differ somewhere"
    );
}

#[test]
fn init_sample_means_stay_in_statistical_bounds() {
    // 10k-element xavier matrix: mean of n uniform(-a, a) draws has
    // sigma = a / sqrt(3 n); embeddings are normal(0, 0.02).
    let mut cfg = lm_config(100, 2, 1, 100, 4);
    cfg.d_ff = 100;
    let ckpt = init_params(&cfg, 3).unwrap();
    let w1 = &ckpt.weights["dec.l0.ff.w1"]; // 100 x 100
    let a = (6.0 / 200.0_f64).sqrt();
    let sigma = a / (3.0 * w1.len() as f64).sqrt();
    let mean = w1.iter().sum::<f64>() / w1.len() as f64;
    assert!(mean.abs() < 3.0 * sigma, "xavier mean {mean} vs 3-sigma {}", 3.0 * sigma);

    let emb = &ckpt.weights["tok_emb"]; // 100 x 100
    let mean = emb.iter().sum::<f64>() / emb.len() as f64;
    let sigma = 0.02 / (emb.len() as f64).sqrt();
    assert!(mean.abs() < 3.0 * sigma, "embedding mean {mean}");
}

#[test]
fn lm_forward_shapes_across_lengths() {
    let cfg = lm_config(8, 2, 1, 11, 6);
    let ckpt = init_params(&cfg, 1).unwrap();
    for n in 1..=6 {
        let tokens: Vec<usize> = (0..n).map(|i| i % 11).collect();
        let logits = lm_forward(&ckpt, &tokens, None, None).unwrap();
        assert_eq!(logits.len(), n * 11);
    }
    let too_long: Vec<usize> = vec![0; 7];
    assert!(lm_forward(&ckpt, &too_long, None, None).is_err());
}

#[test]
fn lm_is_causal() {
    let cfg = lm_config(8, 2, 2, 11, 8);
    let ckpt = init_params(&cfg, 5).unwrap();
    let base: Vec<usize> = vec![1, 4, 7, 2, 9, 3];
    let logits = lm_forward(&ckpt, &base, None, None).unwrap();
    for flip in 1..base.len() {
        let mut other = base.clone();
        other[flip] = (other[flip] + 3) % 11;
        let changed = lm_forward(&ckpt, &other, None, None).unwrap();
        for pos in 0..flip {
            for v in 0..11 {
                let d = (logits[pos * 11 + v] - changed[pos * 11 + v]).abs();
                assert!(d < 1e-12, "position {pos} depends on token {flip}");
            }
        }
    }
}

/// Straight-loop reference for the L=1 H=1 d=8 causal LM.
fn reference_lm_logits(ckpt: &Checkpoint, ids: &[usize]) -> Vec<f64> {
    let cfg = &ckpt.config;
    let d = cfg.attention.d_model;
    let dk = cfg.attention.d_k;
    let v_sz = cfg.vocab_size;
    let n = ids.len();
    let w = |name: &str| -> &[f64] { &ckpt.weights[name] };

    let ln = |x: &[f64], gain: &[f64], bias: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..x.len() / d {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = gain[j] * (row[j] - mu) * inv + bias[j];
            }
        }
        out
    };
    let matmul = |a: &[f64], b: &[f64], n: usize, k: usize, m: usize| -> Vec<f64> {
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

    let mut x = vec![0.0; n * d];
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..d {
            x[i * d + j] = w("tok_emb")[id * d + j] + w("pos_emb")[i * d + j];
        }
    }

    let a_in = ln(&x, w("dec.l0.ln1.gain"), w("dec.l0.ln1.bias"));
    let q = matmul(&a_in, w("dec.l0.self.h0.wq"), n, d, dk);
    let k = matmul(&a_in, w("dec.l0.self.h0.wk"), n, d, dk);
    let v = matmul(&a_in, w("dec.l0.self.h0.wv"), n, d, dk);
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..dk {
                s += q[i * dk + p] * k[j * dk + p];
            }
            if j > i {
                s += cfg.attention.neg_fill;
            }
            scores[i * n + j] = s / (dk as f64).sqrt();
        }
    }
    for i in 0..n {
        let row = &mut scores[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - mx).exp();
            z += *s;
        }
        for s in row.iter_mut() {
            *s /= z;
        }
    }
    let attn = matmul(&scores, &v, n, n, dk);
    let proj = matmul(&attn, w("dec.l0.self.h0.wo"), n, dk, d);
    for i in 0..n * d {
        x[i] += proj[i];
    }

    let f_in = ln(&x, w("dec.l0.ln2.gain"), w("dec.l0.ln2.bias"));
    let mut h = matmul(&f_in, w("dec.l0.ff.w1"), n, d, cfg.d_ff);
    for r in 0..n {
        for j in 0..cfg.d_ff {
            h[r * cfg.d_ff + j] = (h[r * cfg.d_ff + j] + w("dec.l0.ff.b1")[j]).max(0.0);
        }
    }
    let mut ffo = matmul(&h, w("dec.l0.ff.w2"), n, cfg.d_ff, d);
    for r in 0..n {
        for j in 0..d {
            ffo[r * d + j] += w("dec.l0.ff.b2")[j];
            x[r * d + j] += ffo[r * d + j];
        }
    }

    let x = ln(&x, w("dec.final_ln.gain"), w("dec.final_ln.bias"));
    matmul(&x, w("out_proj"), n, d, v_sz)
}

#[test]
fn lm_forward_matches_straight_loop_reference() {
    let cfg = lm_config(8, 1, 1, 11, 8);
    let ckpt = init_params(&cfg, 11).unwrap();
    let ids = vec![3, 7, 1, 10, 4];
    let got = lm_forward(&ckpt, &ids, None, None).unwrap();
    let want = reference_lm_logits(&ckpt, &ids);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-10, "got {g} want {w}");
    }
}

#[test]
fn seq2seq_shapes_and_causality() {
    let cfg = seq2seq_config(8, 2, 2, 13);
    let ckpt = init_params(&cfg, 9).unwrap();
    let src = vec![4, 5, 6, 7];
    let tgt = vec![1, 8, 9, 10, 11];
    let logits = seq2seq_forward(&ckpt, &src, &tgt, None, None).unwrap();
    assert_eq!(logits.len(), tgt.len() * 13);

    for flip in 1..tgt.len() {
        let mut other = tgt.clone();
        other[flip] = (other[flip] + 1) % 13;
        let changed = seq2seq_forward(&ckpt, &src, &other, None, None).unwrap();
        for pos in 0..flip {
            for v in 0..13 {
                let d = (logits[pos * 13 + v] - changed[pos * 13 + v]).abs();
                assert!(d < 1e-12, "target position {pos} depends on position {flip}");
            }
        }
    }
}

#[test]
fn seq2seq_padding_is_inert() {
    let cfg = seq2seq_config(8, 2, 1, 13);
    let ckpt = init_params(&cfg, 10).unwrap();
    let params = ModelParams::from_checkpoint(&ckpt).unwrap();
    let real_src = vec![4usize, 5, 6];
    let tgt = vec![1usize, 8, 9];

    let run = |src: &[usize], valid: Option<&[bool]>| -> Vec<f64> {
        let tape = Tape::new();
        let bp = params.bind(&tape, false).unwrap();
        seq2seq_forward_t(&tape, &bp, &cfg, src, &tgt, None, None, valid, None)
            .unwrap()
            .data()
            .to_vec()
    };

    let unpadded = run(&real_src, None);
    let valid = [true, true, true, false, false];
    let padded_a = run(&[4, 5, 6, 2, 7], Some(&valid));
    let padded_b = run(&[4, 5, 6, 7, 2], Some(&valid)); // junk suffix permuted
    for ((a, b), u) in padded_a.iter().zip(&padded_b).zip(&unpadded) {
        assert!((a - b).abs() < 1e-10, "padding content leaked into logits");
        assert!((a - u).abs() < 1e-10, "padded run differs from unpadded run");
    }

    // validity must be a prefix
    let bad = [true, false, true];
    let tape = Tape::new();
    let bp = params.bind(&tape, false).unwrap();
    assert!(seq2seq_forward_t(
        &tape, &bp, &cfg, &real_src, &tgt, None, None, Some(&bad), None
    )
    .is_err());
}

struct CountingObserver {
    calls: std::collections::BTreeMap<AttentionKind, usize>,
}

impl AttentionObserver for CountingObserver {
    fn observe(&mut self, key: HeadKey, _n: usize, _m: usize, weights: &[f64]) {
        assert!(!weights.is_empty());
        *self.calls.entry(key.kind).or_default() += 1;
    }
}

#[test]
fn observer_sees_every_head_once_per_kind() {
    let cfg = seq2seq_config(8, 2, 2, 13);
    let ckpt = init_params(&cfg, 3).unwrap();
    let mut obs = CountingObserver {
        calls: Default::default(),
    };
    seq2seq_forward(&ckpt, &[4, 5], &[1, 6, 7], None, Some(&mut obs)).unwrap();
    let per_kind = cfg.n_layers * cfg.attention.n_heads;
    for kind in cfg.kinds() {
        assert_eq!(obs.calls[&kind], per_kind, "kind {kind:?}");
    }

    let lm_cfg = lm_config(8, 2, 2, 11, 8);
    let lm_ckpt = init_params(&lm_cfg, 3).unwrap();
    let mut obs = CountingObserver {
        calls: Default::default(),
    };
    lm_forward(&lm_ckpt, &[1, 2, 3], None, Some(&mut obs)).unwrap();
    assert_eq!(obs.calls[&AttentionKind::SelfDecoder], per_kind);
    assert_eq!(obs.calls.len(), 1);
}

#[test]
fn empty_mask_set_is_bit_identical_to_unmasked() {
    let cfg = lm_config(8, 2, 2, 11, 8);
    let ckpt = init_params(&cfg, 6).unwrap();
    let tokens = vec![1, 2, 3, 4, 5];
    let empty = MaskSet::empty(0.0, vec![AttentionKind::SelfDecoder], "none");
    let a = lm_forward(&ckpt, &tokens, None, None).unwrap();
    let b = lm_forward(&ckpt, &tokens, Some(&empty), None).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

/// A mask set with real pruning built from synthetic statistics.
fn synthetic_mask(cfg: &TransformerConfig, p: f64, seed: u64) -> MaskSet {
    let shape = cfg.mask_shape();
    let mut stats = AttentionStats::for_shape(&shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..4 {
        stats.begin_example();
        let keys: Vec<HeadKey> = stats.head_keys().collect();
        for key in keys {
            let (n_max, m_max) = shape.dims[&key.kind];
            // row-stochastic random weights over the full window
            let mut w = vec![0.0; n_max * m_max];
            for row in w.chunks_exact_mut(m_max) {
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen_range(0.01..1.0);
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            stats
                .accumulate(key, &w, n_max, m_max, &vec![true; n_max], &vec![true; m_max])
                .unwrap();
        }
    }
    let avg = stats.average().unwrap();
    let spec = PruneSpec::new(p, cfg.kinds()).unwrap();
    build_masks(&avg, &spec, "synthetic").unwrap()
}

#[test]
fn masked_forward_applies_pruning() {
    let cfg = lm_config(8, 2, 1, 11, 6);
    let ckpt = init_params(&cfg, 12).unwrap();
    let mask = synthetic_mask(&cfg, 60.0, 40);
    let tokens = vec![1, 2, 3, 4];
    let plain = lm_forward(&ckpt, &tokens, None, None).unwrap();
    let masked = lm_forward(&ckpt, &tokens, Some(&mask), None).unwrap();
    let diff: f64 = plain
        .iter()
        .zip(&masked)
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-6, "a 60% mask should change the logits");

    // masked weights actually carry no mass
    let mut collector = StatsCollector::new(&cfg.mask_shape());
    collector.begin_example(vec![true; 4], vec![true; 4]);
    lm_forward(&ckpt, &tokens, Some(&mask), Some(&mut collector)).unwrap();
    let avg = collector.stats.average().unwrap();
    for (key, head) in &avg.heads {
        for i in 0..4usize {
            for j in 0..=i {
                if mask.is_pruned(key, i, j)
                    && !slice_additive(&mask, *key, 4, 4, cfg.attention.neg_fill)
                        .unwrap()
                        .is_masked(i, j)
                {
                    continue; // reopened by window repair
                }
                if mask.is_pruned(key, i, j) {
                    assert!(head.value[i * head.m_max + j] < 1e-8);
                }
            }
        }
    }
}

#[test]
fn full_lm_loss_gradient_matches_finite_differences() {
    // d=8, L=1, H=2, V=11 masked LM: every weight coordinate checked.
    let cfg = lm_config(8, 2, 1, 11, 6);
    let base = init_params(&cfg, 77).unwrap();
    let mask = synthetic_mask(&cfg, 50.0, 41);
    let tokens: Vec<usize> = vec![1, 5, 9, 2, 7, 4];
    let inputs = &tokens[..5];
    let targets = &tokens[1..];

    let loss_of = |ckpt: &Checkpoint| -> f64 {
        let params = ModelParams::from_checkpoint(ckpt).unwrap();
        let tape = Tape::new();
        let bp = params.bind(&tape, false).unwrap();
        let logits =
            lm_forward_t(&tape, &bp, &cfg, inputs, Some(&mask), None, None).unwrap();
        tape.cross_entropy(&logits, targets, None).unwrap().item()
    };

    // analytic gradients
    let params = ModelParams::from_checkpoint(&base).unwrap();
    let tape = Tape::new();
    let bp = params.bind(&tape, true).unwrap();
    let logits = lm_forward_t(&tape, &bp, &cfg, inputs, Some(&mask), None, None).unwrap();
    let loss = tape.cross_entropy(&logits, targets, None).unwrap();
    let grads = tape.backward(&loss).unwrap();

    let eps = 1e-5;
    let mut worst = 0.0_f64;
    for (w_idx, name) in params.names().iter().enumerate() {
        let analytic = grads.get_or_zeros(&bp.tensors[w_idx]);
        let len = base.weights[name].len();
        for j in 0..len {
            let mut hi = base.clone();
            hi.weights.get_mut(name).unwrap()[j] += eps;
            let mut lo = base.clone();
            lo.weights.get_mut(name).unwrap()[j] -= eps;
            let central = (loss_of(&hi) - loss_of(&lo)) / (2.0 * eps);
            let err = (analytic[j] - central).abs() / central.abs().max(1e-12);
            // relu kinks can sit exactly on the perturbation path; tolerate
            // only smooth coordinates strictly
            if central.abs() > 1e-7 {
                worst = worst.max(err);
                assert!(
                    err < 1e-4,
                    "{name}[{j}]: analytic {} vs central {central}",
                    analytic[j]
                );
            }
        }
    }
    assert!(worst > 0.0, "finite differences ran");
}

#[test]
fn greedy_decode_stubs() {
    // constant logits favoring eos
    let out = greedy_decode_with(|_| Ok(vec![0.0, 0.0, 5.0, 0.0]), 2, 6).unwrap();
    assert_eq!(out, vec![2]);
    // constant logits favoring a non-terminal id
    let out = greedy_decode_with(|_| Ok(vec![0.0, 0.0, 0.0, 5.0]), 2, 6).unwrap();
    assert_eq!(out, vec![3; 6]);
    // argmax ties break toward the smallest id
    assert_eq!(argmax_id(&[1.0, 7.0, 7.0]), 1);
}

#[test]
fn greedy_decode_runs_on_a_real_model() {
    let cfg = seq2seq_config(8, 2, 1, 13);
    let ckpt = init_params(&cfg, 2).unwrap();
    let out = greedy_decode(&ckpt, &[4, 5, 6], 1, 2, 8, None).unwrap();
    assert!(!out.is_empty() && out.len() <= 8);
    assert!(greedy_decode(&ckpt, &[4], 1, 2, 100, None).is_err());
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let cfg = seq2seq_config(8, 2, 1, 13);
    let ckpt = init_params(&cfg, 14).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base1 = dir.path().join("ck1");
    let base2 = dir.path().join("ck2");
    save_checkpoint(&ckpt, &base1).unwrap();
    let loaded = load_checkpoint(&base1).unwrap();
    assert_eq!(ckpt, loaded);
    save_checkpoint(&loaded, &base2).unwrap();
    for ext in ["json", "bin"] {
        let a = std::fs::read(base1.with_extension(ext)).unwrap();
        let b = std::fs::read(base2.with_extension(ext)).unwrap();
        assert_eq!(a, b, "{ext} files differ after a save/load/save cycle");
    }
}

#[test]
fn checkpoint_corruption_is_detected() {
    let cfg = lm_config(8, 2, 1, 11, 6);
    let ckpt = init_params(&cfg, 15).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("ck");
    save_checkpoint(&ckpt, &base).unwrap();

    // truncation
    let payload = std::fs::read(base.with_extension("bin")).unwrap();
    std::fs::write(base.with_extension("bin"), &payload[..payload.len() - 9]).unwrap();
    assert!(matches!(load_checkpoint(&base), Err(Error::Corrupt(_))));

    // bit flip fails the checksum
    let mut tampered = payload.clone();
    tampered[40] ^= 0xff;
    std::fs::write(base.with_extension("bin"), &tampered).unwrap();
    assert!(matches!(load_checkpoint(&base), Err(Error::Corrupt(_))));

    std::fs::write(base.with_extension("bin"), &payload).unwrap();
    load_checkpoint(&base).unwrap();

    // schema version mismatch
    let mut doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(base.with_extension("json")).unwrap()).unwrap();
    doc["schema_version"] = serde_json::json!(9);
    std::fs::write(base.with_extension("json"), serde_json::to_vec(&doc).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&base), Err(Error::Incompatible(_))));
}

#[test]
fn weights_hash_tracks_content() {
    let cfg = lm_config(8, 2, 1, 11, 6);
    let a = init_params(&cfg, 1).unwrap();
    let mut b = a.clone();
    assert_eq!(a.weights_hash(), b.weights_hash());
    b.weights.get_mut("tok_emb").unwrap()[0] += 1.0;
    assert_ne!(a.weights_hash(), b.weights_hash());
}
