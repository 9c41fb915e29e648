use super::*;
use crate::attention::{ActivationKind, AttentionConfig};
use crate::data::gen_copy;
use crate::model::init_params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(vocab: usize) -> TransformerConfig {
    TransformerConfig {
        arch: Arch::EncDec,
        n_layers: 1,
        attention: AttentionConfig::new(8, 2, ActivationKind::Softmax).unwrap(),
        d_ff: 16,
        vocab_size: vocab,
        max_src_len: 8,
        max_tgt_len: 9,
        tie_embeddings: false,
    }
}

fn tiny_train_cfg(seed: u64, max_steps: u64) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        max_steps,
        warmup_steps: 5,
        eval_every: 10,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn tiny_copy() -> crate::data::Dataset {
    gen_copy(120, 2, 5, 6, 3).unwrap()
}

#[test]
fn adam_hand_case_and_zero_gradient() {
    let cfg = tiny_cfg(10);
    let mut ckpt = init_params(&cfg, 1).unwrap();
    for v in ckpt.weights.get_mut("tok_emb").unwrap() {
        *v = 0.0;
    }
    let mut params = ModelParams::from_checkpoint(&ckpt).unwrap();
    let mut opt = OptimState::new(&params);
    let tcfg = TrainConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        grad_clip: 1e12,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let tok_idx = params.names().iter().position(|n| n == "tok_emb").unwrap();
    let mut grads: Vec<Vec<f64>> = params
        .shapes()
        .iter()
        .map(|s| vec![0.0; s.iter().product()])
        .collect();
    for g in grads[tok_idx].iter_mut() {
        *g = 1.0;
    }
    let before: Vec<Vec<f64>> = (0..params.names().len())
        .map(|i| params.data_mut(i).clone())
        .collect();
    adam_step(&mut params, &grads, &mut opt, &tcfg).unwrap();
    // bias correction makes m_hat = v_hat = 1 on step one: theta ~ -lr
    for v in params.data_mut(tok_idx).iter() {
        assert!((v + 0.1).abs() < 1e-7, "expected ~-0.1, got {v}");
    }
    // zero-gradient weights stay put while their moments decay
    for (i, prev) in before.iter().enumerate() {
        if i == tok_idx {
            continue;
        }
        assert_eq!(params.data_mut(i).as_slice(), prev.as_slice());
    }
    assert_eq!(opt.step, 1);
}

#[test]
fn adam_clips_to_global_norm() {
    let cfg = tiny_cfg(10);
    let ckpt = init_params(&cfg, 2).unwrap();
    let mut params = ModelParams::from_checkpoint(&ckpt).unwrap();
    let mut opt = OptimState::new(&params);
    let tcfg = TrainConfig {
        grad_clip: 1.0,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let mut grads: Vec<Vec<f64>> = params
        .shapes()
        .iter()
        .map(|s| vec![0.0; s.iter().product()])
        .collect();
    // two nonzero coordinates with norm 5 must scale to norm 1
    grads[0][0] = 3.0;
    grads[1][0] = 4.0;
    adam_step(&mut params, &grads, &mut opt, &tcfg).unwrap();
    // first-step moment recovers the clipped gradient: m_hat = g_clipped
    assert!((opt.m[0][0] / 0.1 - 0.6).abs() < 1e-12);
    assert!((opt.m[1][0] / 0.1 - 0.8).abs() < 1e-12);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let cfg = tiny_cfg(10);
    let ckpt = init_params(&cfg, 3).unwrap();
    let mut params = ModelParams::from_checkpoint(&ckpt).unwrap();
    let mut opt = OptimState::new(&params);
    let mut grads: Vec<Vec<f64>> = params
        .shapes()
        .iter()
        .map(|s| vec![0.0; s.iter().product()])
        .collect();
    grads[2][0] = f64::NAN;
    let res = adam_step(&mut params, &grads, &mut opt, &TrainConfig::default());
    assert!(matches!(res, Err(Error::Numerical(_))));
}

#[test]
fn lr_schedule_shape() {
    assert_eq!(lr_scale(1, 0), 1.0);
    assert_eq!(lr_scale(100, 0), 1.0);
    let w = 40;
    assert!((lr_scale(20, w) - 0.5).abs() < 1e-12);
    assert!((lr_scale(40, w) - 1.0).abs() < 1e-12);
    assert!((lr_scale(160, w) - 0.5).abs() < 1e-12, "inverse sqrt decay");
}

// ---------------------------------------------------------------------------
// metric math on crafted logits
// ---------------------------------------------------------------------------

#[test]
fn perplexity_of_uniform_logits_is_vocab_size() {
    let (nll, tokens, _) = ce_counts(&[0.0; 12], 4, &[1, 3, 2]);
    let ppl = (nll / tokens as f64).exp();
    assert!((ppl - 4.0).abs() < 1e-12);
}

#[test]
fn perplexity_of_confident_logits_approaches_one() {
    let mut logits = vec![0.0; 10];
    logits[3] = 20.0;
    logits[5 + 2] = 20.0;
    let (nll, tokens, correct) = ce_counts(&logits, 5, &[3, 2]);
    let ppl = (nll / tokens as f64).exp();
    assert!(ppl < 1.001);
    assert_eq!(correct, 2);
}

#[test]
fn perplexity_hand_case() {
    // three tokens over V=2; gold id 0 is PAD, so every target is 1
    let logits = vec![
        0.0,
        3.0_f64.ln(), // softmax [0.25, 0.75]
        0.0,
        1.0, // softmax [1/(e+1), e/(e+1)]
        0.5,
        0.5, // uniform
    ];
    let gold = [1, 1, 1];
    let (nll, tokens, _) = ce_counts(&logits, 2, &gold);
    let expect = -(0.75_f64.ln())
        - (std::f64::consts::E / (std::f64::consts::E + 1.0)).ln()
        - 0.5_f64.ln();
    assert!((nll - expect).abs() < 1e-9, "nll {nll} vs {expect}");
    assert_eq!(tokens, 3);
}

#[test]
fn perplexity_invariant_under_vocab_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = 6;
    let logits: Vec<f64> = (0..4 * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    // keep PAD (id 0) fixed so no gold id crosses the skip rule
    let gold = [2usize, 1, 5, 3];
    let perm = [0usize, 2, 4, 5, 1, 3];
    let permuted: Vec<f64> = (0..4)
        .flat_map(|r| {
            let mut row = vec![0.0; v];
            for j in 0..v {
                row[perm[j]] = logits[r * v + j];
            }
            row
        })
        .collect();
    let gold_p: Vec<usize> = gold.iter().map(|&g| perm[g]).collect();
    let (a, _, _) = ce_counts(&logits, v, &gold);
    let (b, _, _) = ce_counts(&permuted, v, &gold_p);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn token_accuracy_stub_cases() {
    let v = 4;
    let one_hot = |ids: &[usize]| -> Vec<f64> {
        let mut out = vec![0.0; ids.len() * v];
        for (i, &id) in ids.iter().enumerate() {
            out[i * v + id] = 9.0;
        }
        out
    };
    let gold = [1usize, 2, 3, 0];
    let mut totals = TeacherForcedTotals::new();
    totals.add(&one_hot(&gold), v, &gold);
    assert_eq!(totals.accuracy(), 1.0);

    let mut totals = TeacherForcedTotals::new();
    totals.add(&one_hot(&[0, 0, 0, 1]), v, &[1, 2, 3, 2]);
    assert_eq!(totals.accuracy(), 0.0);

    let mut totals = TeacherForcedTotals::new();
    totals.add(&one_hot(&[1, 2, 0, 0]), v, &[1, 2, 3, 2]);
    assert_eq!(totals.accuracy(), 0.5);
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

#[test]
fn bleu_identical_corpus_scores_exactly_100() {
    let refs = vec![vec![4, 5, 6, 7, 8], vec![9, 10, 11, 12]];
    let score = bleu(&refs, &refs).unwrap();
    assert_eq!(score, 100.0);
}

#[test]
fn bleu_disjoint_vocabulary_is_zero() {
    let hyps = vec![vec![4, 5, 6, 7]];
    let refs = vec![vec![8, 9, 10, 11]];
    assert!(bleu(&hyps, &refs).unwrap() < 1e-10);
}

#[test]
fn bleu_hand_counted_case() {
    // hyp: the cat sat on the mat / ref: the cat sat on a mat
    // ids:  0   1   2   3   0   4  /       0   1   2   3   5  4
    let hyp = vec![0usize, 1, 2, 3, 0, 4];
    let reference = vec![0usize, 1, 2, 3, 5, 4];
    // unigrams: the(2->1) cat sat on mat match -> 5/6
    // bigrams: the-cat, cat-sat, sat-on match; on-the, the-mat miss -> 3/5
    // trigrams: the-cat-sat, cat-sat-on match -> 2/4
    // 4-grams: the-cat-sat-on matches -> 1/3
    let expect = 100.0 * ((5.0f64 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0) * (1.0 / 3.0)).powf(0.25);
    let got = bleu(&[hyp], &[reference]).unwrap();
    assert!((got - expect).abs() < 1e-9, "got {got}, expected {expect}");
    assert!((got - 53.728496).abs() < 1e-4);
}

#[test]
fn bleu_brevity_penalty_hand_case() {
    // perfect prefix hypothesis one token short: precisions are all 1,
    // BP = exp(1 - 6/5)
    let hyp = vec![vec![4usize, 5, 6, 7, 8]];
    let reference = vec![vec![4usize, 5, 6, 7, 8, 9]];
    let got = bleu(&hyp, &reference).unwrap();
    let expect = 100.0 * (1.0f64 - 6.0 / 5.0).exp();
    assert!((got - expect).abs() < 1e-9);
}

#[test]
fn bleu_symmetry_and_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let corpus: Vec<(Vec<usize>, Vec<usize>)> = (0..12)
        .map(|_| {
            let len = rng.gen_range(3..10);
            let r: Vec<usize> = (0..len).map(|_| rng.gen_range(4..20)).collect();
            let mut h = r.clone();
            if rng.gen_bool(0.6) {
                let i = rng.gen_range(0..h.len());
                h[i] = rng.gen_range(4..20);
            }
            (h, r)
        })
        .collect();
    let hyps: Vec<Vec<usize>> = corpus.iter().map(|(h, _)| h.clone()).collect();
    let refs: Vec<Vec<usize>> = corpus.iter().map(|(_, r)| r.clone()).collect();
    let base = bleu(&hyps, &refs).unwrap();

    // corpus order permutation
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.reverse();
    order.swap(0, 3);
    let hyps_p: Vec<Vec<usize>> = order.iter().map(|&i| hyps[i].clone()).collect();
    let refs_p: Vec<Vec<usize>> = order.iter().map(|&i| refs[i].clone()).collect();
    assert!((bleu(&hyps_p, &refs_p).unwrap() - base).abs() < 1e-12);

    // consistent token relabeling
    let relabel = |ids: &[usize]| -> Vec<usize> { ids.iter().map(|&t| t * 7 + 100).collect() };
    let hyps_r: Vec<Vec<usize>> = hyps.iter().map(|h| relabel(h)).collect();
    let refs_r: Vec<Vec<usize>> = refs.iter().map(|r| relabel(r)).collect();
    assert!((bleu(&hyps_r, &refs_r).unwrap() - base).abs() < 1e-12);

    assert!(bleu(&[], &[]).is_err());
    assert!(bleu(&hyps, &refs[1..].to_vec()).is_err());
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[test]
fn training_is_deterministic_per_seed() {
    let ds = tiny_copy();
    let cfg = tiny_cfg(ds.vocab.size());
    let init = init_params(&cfg, 5).unwrap();
    let tcfg = tiny_train_cfg(5, 30);
    let (ck_a, log_a) = train(&init, &ds, &tcfg, None).unwrap();
    let (ck_b, log_b) = train(&init, &ds, &tcfg, None).unwrap();
    assert_eq!(ck_a, ck_b);
    let strip = |log: &TrainLog| -> Vec<(u64, String, u64, u64, u64)> {
        log.rows
            .iter()
            .map(|r| {
                (
                    r.step,
                    r.split.clone(),
                    r.loss.to_bits(),
                    r.ppl_or_acc.to_bits(),
                    r.lr.to_bits(),
                )
            })
            .collect()
    };
    assert_eq!(strip(&log_a), strip(&log_b));
    assert_eq!(log_a.best_checkpoint_hash, log_b.best_checkpoint_hash);
    assert_eq!(ck_a.weights_hash(), log_a.best_checkpoint_hash);
    assert_eq!(ck_a.step, log_a.best_step);
}

#[test]
fn empty_mask_training_reproduces_unmasked_bit_for_bit() {
    let ds = tiny_copy();
    let cfg = tiny_cfg(ds.vocab.size());
    let init = init_params(&cfg, 6).unwrap();
    let tcfg = tiny_train_cfg(6, 20);
    let empty = MaskSet::empty(0.0, cfg.kinds(), &ds.name);
    let (plain, _) = train(&init, &ds, &tcfg, None).unwrap();
    let (masked, _) = train(&init, &ds, &tcfg, Some(&empty)).unwrap();
    assert_eq!(plain, masked);
}

#[test]
fn train_rejects_mismatched_dataset_kind() {
    let ds = tiny_copy();
    let mut cfg = tiny_cfg(ds.vocab.size());
    cfg.arch = Arch::LmOnly;
    let init = init_params(&cfg, 7).unwrap();
    assert!(matches!(
        train(&init, &ds, &tiny_train_cfg(7, 5), None),
        Err(Error::Config(_))
    ));
}

#[test]
fn nan_weights_surface_as_divergence() {
    let ds = tiny_copy();
    let cfg = tiny_cfg(ds.vocab.size());
    let mut init = init_params(&cfg, 8).unwrap();
    // poison a weight every forward touches
    init.weights.get_mut("dec.final_ln.gain").unwrap()[0] = f64::NAN;
    let res = train(&init, &ds, &tiny_train_cfg(8, 5), None);
    assert!(matches!(res, Err(Error::Diverged(_))), "{res:?}");
}

#[test]
fn collect_stats_counts_examples_and_visits() {
    let ds = tiny_copy();
    let cfg = tiny_cfg(ds.vocab.size());
    let ckpt = init_params(&cfg, 9).unwrap();
    let stats = collect_stats(&ckpt, &ds, Split::Train).unwrap();
    assert_eq!(
        stats.examples_seen(),
        ds.pairs(Split::Train).unwrap().len() as u64
    );
    let avg = stats.average().unwrap();
    for head in avg.heads.values() {
        assert!(head.visited.iter().any(|&v| v));
        for (&value, &vis) in head.value.iter().zip(&head.visited) {
            if vis {
                assert!((0.0..=1.0 + 1e-12).contains(&value));
            }
        }
    }
}

#[test]
fn run_ap_p0_reproduces_baseline() {
    let ds = tiny_copy();
    let cfg = tiny_cfg(ds.vocab.size());
    let tcfg = tiny_train_cfg(10, 20);
    let prune = PruneSpec::new(0.0, cfg.kinds()).unwrap();
    let report = run_ap(&cfg, &ds, &prune, &tcfg, RetrainMode::Fresh, &MaskSourceSpec::Ap).unwrap();
    assert!((report.baseline.loss - report.pruned.loss).abs() < 1e-9);
    assert_eq!(report.sparsity.overall, 0.0);
    assert!(report.thresholds.is_empty());
    assert_eq!(report.mac_fraction, 1.0);
    assert_eq!(report.stats_checkpoint_hash, report.baseline_checkpoint_hash);
}

#[test]
fn run_ap_reports_one_threshold_per_pruned_layer() {
    let ds = tiny_copy();
    let cfg = tiny_cfg(ds.vocab.size());
    let tcfg = tiny_train_cfg(11, 20);
    let prune = PruneSpec::new(
        50.0,
        vec![AttentionKind::SelfEncoder, AttentionKind::SelfDecoder],
    )
    .unwrap();
    let report =
        run_ap(&cfg, &ds, &prune, &tcfg, RetrainMode::Fresh, &MaskSourceSpec::Ap).unwrap();
    assert_eq!(report.thresholds.len(), 2 * cfg.n_layers);
    let mut seen: std::collections::BTreeSet<(AttentionKind, usize)> = Default::default();
    for t in &report.thresholds {
        assert!(seen.insert((t.kind, t.layer)), "duplicate threshold");
    }
    assert!(report.sparsity.overall > 0.0);
    assert!(report.mac_fraction < 1.0);
}

#[test]
fn run_ap_finetune_mode_runs() {
    let ds = tiny_copy();
    let cfg = tiny_cfg(ds.vocab.size());
    let tcfg = tiny_train_cfg(12, 15);
    let prune = PruneSpec::new(30.0, cfg.kinds()).unwrap();
    let report = run_ap(
        &cfg,
        &ds,
        &prune,
        &tcfg,
        RetrainMode::Finetune,
        &MaskSourceSpec::Ap,
    )
    .unwrap();
    assert_eq!(report.retrain_mode, RetrainMode::Finetune);

    let random = run_ap(
        &cfg,
        &ds,
        &prune,
        &tcfg,
        RetrainMode::Fresh,
        &MaskSourceSpec::Random,
    )
    .unwrap();
    assert_eq!(random.mask_origin, MaskOrigin::Random);
}

#[test]
fn log_csv_has_the_pinned_columns() {
    let ds = tiny_copy();
    let cfg = tiny_cfg(ds.vocab.size());
    let init = init_params(&cfg, 13).unwrap();
    let (_, log) = train(&init, &ds, &tiny_train_cfg(13, 12), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    log.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,split,loss,ppl_or_acc,bleu,lr,wall_ms"
    );
    assert_eq!(lines.count(), log.rows.len());
}
