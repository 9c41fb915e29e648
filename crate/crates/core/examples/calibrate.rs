//! Scratch calibration probe: trains the acceptance-scale models and
//! prints quality and wall time. Not part of the test suite.

use attnprune::attention::{ActivationKind, AttentionConfig, AttentionKind};
use attnprune::data::{gen_copy, gen_toy_translation, synth_char_corpus, char_lm_from_text, Split};
use attnprune::model::{init_params, Arch, TransformerConfig};
use attnprune::pipeline::PruneSpec;
use attnprune::train::{
    collect_stats, eval_metrics, run_ap, train, MaskSourceSpec, RetrainMode, TrainConfig,
};
use std::time::Instant;

fn copy_cfg(vocab: usize, act: ActivationKind) -> TransformerConfig {
    TransformerConfig {
        arch: Arch::EncDec,
        n_layers: 2,
        attention: AttentionConfig::new(64, 4, act).unwrap(),
        d_ff: 128,
        vocab_size: vocab,
        max_src_len: 8,
        max_tgt_len: 10,
        tie_embeddings: false,
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "copy".into());
    match which.as_str() {
        "copy" => probe_copy(ActivationKind::Softmax),
        "copy-entmax" => probe_copy(ActivationKind::Entmax15),
        "toy" => probe_toy(),
        "lm" => probe_lm(),
        "grid" => probe_grid(),
        other => eprintln!("unknown probe {other}"),
    }
}

/// Cross-vs-self landscape: tasks x model sizes, one seed each.
fn probe_grid() {
    use attnprune::data::gen_reverse;
    let cases: Vec<(&str, usize, usize, usize, u64)> = vec![
        // task, d, heads, layers, steps
        ("toy", 32, 1, 2, 1500),
        ("toy", 64, 1, 1, 1500),
        ("reverse", 64, 4, 2, 900),
        ("reverse", 64, 1, 2, 900),
    ];
    for (task, d, h, l, steps) in cases {
        let ds = match task {
            "toy" => gen_toy_translation(3000, 21).unwrap(),
            _ => gen_reverse(3000, 5, 16, 20, 21).unwrap(),
        };
        let (src_max, tgt_max) = ds.max_lens();
        let cfg = TransformerConfig {
            arch: Arch::EncDec,
            n_layers: l,
            attention: AttentionConfig::new(d, h, ActivationKind::Softmax).unwrap(),
            d_ff: 2 * d,
            vocab_size: ds.vocab.size(),
            max_src_len: src_max,
            max_tgt_len: tgt_max,
            tie_embeddings: false,
        };
        let tcfg = TrainConfig {
            max_steps: steps,
            eval_every: 150,
            seed: 1,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let init = init_params(&cfg, tcfg.seed).unwrap();
        let (best, _) = train(&init, &ds, &tcfg, None).unwrap();
        let m = eval_metrics(&best, &ds, Split::Test, None).unwrap();
        let stats = collect_stats(&best, &ds, Split::Train).unwrap();
        let avg = stats.average().unwrap();
        let mut arms = Vec::new();
        for kinds in [
            vec![AttentionKind::SelfEncoder],
            vec![AttentionKind::Cross],
        ] {
            let prune = PruneSpec::new(80.0, kinds).unwrap();
            let mask = attnprune::pipeline::build_masks(&avg, &prune, &ds.name).unwrap();
            let retrain_init = init_params(&cfg, tcfg.seed).unwrap();
            let (pruned, _) = train(&retrain_init, &ds, &tcfg, Some(&mask)).unwrap();
            let pm = eval_metrics(&pruned, &ds, Split::Test, Some(&mask)).unwrap();
            arms.push(pm.bleu.unwrap());
        }
        println!(
            "{task} d{d} h{h} L{l}: baseline bleu {:.2} | self-enc p80 {:.2} | cross p80 {:.2} | gap {:.2} | wall {:.0}s",
            m.bleu.unwrap(),
            arms[0],
            arms[1],
            arms[0] - arms[1],
            t0.elapsed().as_secs_f64()
        );
    }
}

fn probe_copy(act: ActivationKind) {
    let t0 = Instant::now();
    let ds = gen_copy(2500, 3, 8, 12, 11).unwrap();
    let cfg = copy_cfg(ds.vocab.size(), act);
    let tcfg = TrainConfig {
        max_steps: 700,
        eval_every: 100,
        seed: 1,
        ..TrainConfig::default()
    };
    let init = init_params(&cfg, tcfg.seed).unwrap();
    let (best, log) = train(&init, &ds, &tcfg, None).unwrap();
    let m = eval_metrics(&best, &ds, Split::Test, None).unwrap();
    println!(
        "copy[{:?}] baseline: acc {:.4} bleu {:.2} loss {:.4} best_step {} wall {:.1}s",
        act,
        m.token_accuracy.unwrap(),
        m.bleu.unwrap(),
        m.loss,
        log.best_step,
        t0.elapsed().as_secs_f64()
    );

    for p in [50.0, 80.0] {
        let t1 = Instant::now();
        let prune = PruneSpec::new(
            p,
            vec![AttentionKind::SelfEncoder, AttentionKind::SelfDecoder],
        )
        .unwrap();
        let report = run_ap(&cfg, &ds, &prune, &tcfg, RetrainMode::Fresh, &MaskSourceSpec::Ap)
            .unwrap();
        println!(
            "copy[{:?}] p={p}: pruned acc {:.4} (baseline {:.4}) sparsity {:.3} note={:?} wall {:.1}s",
            act,
            report.pruned.token_accuracy.unwrap(),
            report.baseline.token_accuracy.unwrap(),
            report.sparsity.overall,
            report.band_note.is_some(),
            t1.elapsed().as_secs_f64()
        );
    }
}

fn probe_toy() {
    let heads: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(4);
    let steps: u64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(900);
    for seed in [1u64, 2, 3] {
        let t0 = Instant::now();
        let ds = gen_toy_translation(3000, 21).unwrap();
        let cfg = TransformerConfig {
            arch: Arch::EncDec,
            n_layers: 2,
            attention: AttentionConfig::new(64, heads, ActivationKind::Softmax).unwrap(),
            d_ff: 128,
            vocab_size: ds.vocab.size(),
            max_src_len: 16,
            max_tgt_len: 18,
            tie_embeddings: false,
        };
        let tcfg = TrainConfig {
            max_steps: steps,
            eval_every: 150,
            seed,
            ..TrainConfig::default()
        };
        let init = init_params(&cfg, tcfg.seed).unwrap();
        let (best, _) = train(&init, &ds, &tcfg, None).unwrap();
        let m = eval_metrics(&best, &ds, Split::Test, None).unwrap();
        println!(
            "toy[h{heads} seed {seed}] baseline: acc {:.4} bleu {:.2} wall {:.1}s",
            m.token_accuracy.unwrap(),
            m.bleu.unwrap(),
            t0.elapsed().as_secs_f64()
        );

        let stats = collect_stats(&best, &ds, Split::Train).unwrap();
        let avg = stats.average().unwrap();
        for kinds in [
            vec![AttentionKind::SelfEncoder],
            vec![AttentionKind::Cross],
        ] {
            let t1 = Instant::now();
            let prune = PruneSpec::new(80.0, kinds.clone()).unwrap();
            let mask = attnprune::pipeline::build_masks(&avg, &prune, &ds.name).unwrap();
            let retrain_init = init_params(&cfg, tcfg.seed).unwrap();
            let (pruned, _) = train(&retrain_init, &ds, &tcfg, Some(&mask)).unwrap();
            let pm = eval_metrics(&pruned, &ds, Split::Test, Some(&mask)).unwrap();
            println!(
                "toy[h{heads} seed {seed}] p=80 kinds={kinds:?}: acc {:.4} bleu {:.2} sparsity {:.3} wall {:.1}s",
                pm.token_accuracy.unwrap(),
                pm.bleu.unwrap(),
                attnprune::pipeline::mask_sparsity(&mask).overall,
                t1.elapsed().as_secs_f64()
            );
        }
    }
}

fn probe_lm() {
    let steps: u64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1200);
    let chars: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(400_000);
    let t0 = Instant::now();
    let text = synth_char_corpus(chars, 5);
    let (_, ds) = char_lm_from_text(&text, usize::MAX).unwrap();
    let cfg = TransformerConfig {
        arch: Arch::LmOnly,
        n_layers: 2,
        attention: AttentionConfig::new(64, 4, ActivationKind::Softmax).unwrap(),
        d_ff: 128,
        vocab_size: ds.vocab.size(),
        max_src_len: 2,
        max_tgt_len: 32,
        tie_embeddings: false,
    };
    let tcfg = TrainConfig {
        max_steps: steps,
        eval_every: 200,
        batch_size: 16,
        seed: 1,
        ..TrainConfig::default()
    };
    println!("lm vocab {} train chars {}", ds.vocab.size(), ds.stream(Split::Train).unwrap().len());
    let init = init_params(&cfg, tcfg.seed).unwrap();
    let (best, _) = train(&init, &ds, &tcfg, None).unwrap();
    let m = eval_metrics(&best, &ds, Split::Test, None).unwrap();
    println!(
        "lm baseline: ppl {:.3} wall {:.1}s",
        m.perplexity,
        t0.elapsed().as_secs_f64()
    );
    for p in [20.0, 50.0, 80.0, 90.0] {
        let t1 = Instant::now();
        let prune = PruneSpec::new(p, vec![AttentionKind::SelfDecoder]).unwrap();
        let report = run_ap(&cfg, &ds, &prune, &tcfg, RetrainMode::Fresh, &MaskSourceSpec::Ap)
            .unwrap();
        println!(
            "lm p={p}: ppl {:.3} (baseline {:.3}) sparsity {:.3} wall {:.1}s",
            report.pruned.perplexity,
            report.baseline.perplexity,
            report.sparsity.overall,
            t1.elapsed().as_secs_f64()
        );
    }
}
