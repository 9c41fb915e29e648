//! Quality metrics: perplexity, teacher-forced token accuracy, and
//! corpus-level BLEU.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{greedy_decode_params, lm_logits, seq2seq_logits, Checkpoint, ModelParams};
use crate::pipeline::MaskSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean token cross-entropy in nats, padding excluded.
    pub loss: f64,
    /// exp(loss).
    pub perplexity: f64,
    /// Teacher-forced argmax accuracy; pair tasks only.
    pub token_accuracy: Option<f64>,
    /// Corpus BLEU over greedy decodes; pair tasks only.
    pub bleu: Option<f64>,
    pub examples: usize,
}

/// Sum of per-token negative log-likelihoods plus token and match counts
/// over one teacher-forced example. PAD gold positions are skipped.
pub(crate) fn ce_counts(logits: &[f64], vocab: usize, gold: &[usize]) -> (f64, u64, u64) {
    let mut nll = 0.0;
    let mut tokens = 0u64;
    let mut correct = 0u64;
    for (i, &g) in gold.iter().enumerate() {
        if g == PAD_ID {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        nll += lse - row[g];
        tokens += 1;
        if crate::model::argmax_id(row) == g {
            correct += 1;
        }
    }
    (nll, tokens, correct)
}

pub(crate) struct TeacherForcedTotals {
    pub nll: f64,
    pub tokens: u64,
    pub correct: u64,
    pub examples: usize,
}

impl TeacherForcedTotals {
    pub fn new() -> Self {
        TeacherForcedTotals {
            nll: 0.0,
            tokens: 0,
            correct: 0,
            examples: 0,
        }
    }

    pub fn add(&mut self, logits: &[f64], vocab: usize, gold: &[usize]) {
        let (nll, tokens, correct) = ce_counts(logits, vocab, gold);
        self.nll += nll;
        self.tokens += tokens;
        self.correct += correct;
        self.examples += 1;
    }

    pub fn loss(&self) -> f64 {
        self.nll / self.tokens.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }
}

pub(crate) fn lm_totals(
    params: &ModelParams,
    ds: &Dataset,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<TeacherForcedTotals> {
    let seg = params.config.max_tgt_len;
    let batches = crate::data::make_batches(ds, split, 1, seg, None)?;
    let mut totals = TeacherForcedTotals::new();
    for batch in &batches {
        for item in &batch.items {
            let logits = lm_logits(params, &item.tgt_in, masks, None)?;
            totals.add(&logits, params.config.vocab_size, &item.gold);
        }
    }
    Ok(totals)
}

pub(crate) fn pair_totals(
    params: &ModelParams,
    ds: &Dataset,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<TeacherForcedTotals> {
    let pairs = ds.pairs(split)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("empty {} split", split.tag())));
    }
    let mut totals = TeacherForcedTotals::new();
    for ex in pairs {
        let tgt_in = &ex.tgt[..ex.tgt.len() - 1];
        let gold = &ex.tgt[1..];
        let logits = seq2seq_logits(params, &ex.src, tgt_in, masks, None)?;
        totals.add(&logits, params.config.vocab_size, gold);
    }
    Ok(totals)
}

/// exp of mean token cross-entropy in nats over the split.
pub fn perplexity(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<EvalMetrics> {
    let params = ModelParams::from_checkpoint(ckpt)?;
    let totals = lm_totals(&params, ds, split, masks)?;
    if totals.tokens == 0 {
        return Err(Error::Data(format!("empty {} split", split.tag())));
    }
    Ok(EvalMetrics {
        loss: totals.loss(),
        perplexity: totals.loss().exp(),
        token_accuracy: None,
        bleu: None,
        examples: totals.examples,
    })
}

/// Teacher-forced argmax matches over non-pad gold positions.
pub fn token_accuracy(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<f64> {
    let params = ModelParams::from_checkpoint(ckpt)?;
    Ok(pair_totals(&params, ds, split, masks)?.accuracy())
}

/// Strips bos/eos/pad for BLEU comparison.
pub(crate) fn strip_specials(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .filter(|&id| id != BOS_ID && id != EOS_ID && id != PAD_ID)
        .collect()
}

const BLEU_MAX_N: usize = 4;
const BLEU_FLOOR: f64 = 1e-16;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], u64> {
    let mut counts: HashMap<&[usize], u64> = HashMap::new();
    if tokens.len() >= n {
        for win in tokens.windows(n) {
            *counts.entry(win).or_default() += 1;
        }
    }
    counts
}

/// Corpus BLEU-4: geometric mean of modified n-gram precisions (each
/// floored at 1e-16) times the brevity penalty
/// `exp(min(0, 1 - ref_len/hyp_len))`, scaled by 100.
pub fn bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    let mut matches = [0u64; BLEU_MAX_N];
    let mut totals = [0u64; BLEU_MAX_N];
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=BLEU_MAX_N {
            let hyp_ngrams = ngram_counts(hyp, n);
            let ref_ngrams = ngram_counts(reference, n);
            for (gram, &count) in &hyp_ngrams {
                let clip = ref_ngrams.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
                totals[n - 1] += count;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..BLEU_MAX_N {
        let p = if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.max(BLEU_FLOOR).ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_sum / BLEU_MAX_N as f64).exp())
}

pub(crate) fn bleu_of_params(
    params: &ModelParams,
    ds: &Dataset,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<f64> {
    let pairs = ds.pairs(split)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("empty {} split", split.tag())));
    }
    let max_len = params.config.max_tgt_len - 1;
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for ex in pairs {
        let decoded = greedy_decode_params(params, &ex.src, BOS_ID, EOS_ID, max_len, masks)?;
        hyps.push(strip_specials(&decoded));
        refs.push(strip_specials(&ex.tgt));
    }
    bleu(&hyps, &refs)
}

/// Greedy-decodes a split and scores it against the gold targets.
pub fn bleu_of(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<f64> {
    bleu_of_params(&ModelParams::from_checkpoint(ckpt)?, ds, split, masks)
}

pub(crate) fn eval_metrics_params(
    params: &ModelParams,
    ds: &Dataset,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<EvalMetrics> {
    if ds.is_pairs() {
        let totals = pair_totals(params, ds, split, masks)?;
        let bleu_score = bleu_of_params(params, ds, split, masks)?;
        Ok(EvalMetrics {
            loss: totals.loss(),
            perplexity: totals.loss().exp(),
            token_accuracy: Some(totals.accuracy()),
            bleu: Some(bleu_score),
            examples: totals.examples,
        })
    } else {
        let totals = lm_totals(params, ds, split, masks)?;
        if totals.tokens == 0 {
            return Err(Error::Data(format!("empty {} split", split.tag())));
        }
        Ok(EvalMetrics {
            loss: totals.loss(),
            perplexity: totals.loss().exp(),
            token_accuracy: None,
            bleu: None,
            examples: totals.examples,
        })
    }
}

/// Loss, perplexity, accuracy and BLEU in one pass over a split.
pub fn eval_metrics(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<EvalMetrics> {
    eval_metrics_params(&ModelParams::from_checkpoint(ckpt)?, ds, split, masks)
}
