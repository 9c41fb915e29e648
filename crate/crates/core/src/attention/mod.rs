//! Scaled dot-product attention with additive masks and a multi-head
//! wrapper. The row normalization (softmax or 1.5-entmax) is pluggable;
//! see [`activation`].

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub mod activation;

pub use activation::{activation_by_name, ActivationKind, RowActivation, ACTIVATIONS};

/// Default additive fill for masked logit positions. Large and finite:
/// masking never introduces literal infinities into the forward pass.
pub const DEFAULT_NEG_FILL: f64 = -1e9;

/// Where an attention layer sits in the architecture.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Encoder self-attention (queries and keys from the source).
    SelfEncoder,
    /// Decoder self-attention, always causal here.
    SelfDecoder,
    /// Encoder-decoder attention: queries from the decoder, keys/values
    /// from the encoder. Only exists in encoder-decoder models.
    Cross,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::SelfEncoder => "self_encoder",
            AttentionKind::SelfDecoder => "self_decoder",
            AttentionKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self_encoder" => Ok(AttentionKind::SelfEncoder),
            "self_decoder" => Ok(AttentionKind::SelfDecoder),
            "cross" => Ok(AttentionKind::Cross),
            other => Err(Error::Config(format!(
                "unknown attention kind {other:?}; expected self_encoder, self_decoder or cross"
            ))),
        }
    }

    /// True when queries at position i may only see keys at positions <= i.
    pub fn is_causal(self) -> bool {
        matches!(self, AttentionKind::SelfDecoder)
    }
}

/// Per-layer attention geometry and activation choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub activation: ActivationKind,
    /// Additive fill for masked positions; must stay <= -1e6.
    pub neg_fill: f64,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, activation: ActivationKind) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be divisible by n_heads {n_heads}"
            )));
        }
        let cfg = AttentionConfig {
            d_model,
            n_heads,
            d_k: d_model / n_heads,
            d_v: d_model / n_heads,
            activation,
            neg_fill: DEFAULT_NEG_FILL,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k * self.n_heads != self.d_model || self.d_v * self.n_heads != self.d_model {
            return Err(Error::Config(format!(
                "head dims do not close: d_k {} * H {} and d_v {} * H must equal d_model {}",
                self.d_k, self.n_heads, self.d_v, self.d_model
            )));
        }
        if self.neg_fill > -1e6 {
            return Err(Error::Config(format!(
                "neg_fill {} must be <= -1e6",
                self.neg_fill
            )));
        }
        Ok(())
    }
}

/// Additive attention mask: a `[n_query, n_key]` matrix whose entries are
/// either 0 (open) or `neg_fill` (masked). Valid masks keep at least one
/// open entry per row so row normalization stays meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveMask {
    n_q: usize,
    n_k: usize,
    neg_fill: f64,
    data: Vec<f64>,
}

impl AdditiveMask {
    pub fn open(n_q: usize, n_k: usize, neg_fill: f64) -> Self {
        AdditiveMask {
            n_q,
            n_k,
            neg_fill,
            data: vec![0.0; n_q * n_k],
        }
    }

    /// Builds a mask from per-entry masked flags without checking the
    /// open-row invariant; call [`AdditiveMask::validate`] where it matters.
    pub fn from_masked_flags(
        n_q: usize,
        n_k: usize,
        neg_fill: f64,
        masked: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut data = vec![0.0; n_q * n_k];
        for i in 0..n_q {
            for j in 0..n_k {
                if masked(i, j) {
                    data[i * n_k + j] = neg_fill;
                }
            }
        }
        AdditiveMask {
            n_q,
            n_k,
            neg_fill,
            data,
        }
    }

    /// The auto-regressive mask: entry (i, j) is masked iff j > i.
    pub fn causal(n: usize, neg_fill: f64) -> Self {
        Self::from_masked_flags(n, n, neg_fill, |i, j| j > i)
    }

    pub fn n_query(&self) -> usize {
        self.n_q
    }

    pub fn n_key(&self) -> usize {
        self.n_k
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n_k + j] != 0.0
    }

    pub fn masked_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn set_masked(&mut self, i: usize, j: usize, masked: bool) {
        self.data[i * self.n_k + j] = if masked { self.neg_fill } else { 0.0 };
    }

    /// Entrywise minimum: a position masked by either side stays masked.
    pub fn combine_min(&self, other: &AdditiveMask) -> Result<AdditiveMask> {
        if self.n_q != other.n_q || self.n_k != other.n_k {
            return Err(Error::Shape(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.n_q, self.n_k, other.n_q, other.n_k
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.min(b))
            .collect();
        Ok(AdditiveMask {
            n_q: self.n_q,
            n_k: self.n_k,
            neg_fill: self.neg_fill.min(other.neg_fill),
            data,
        })
    }

    /// Checks the open-row invariant: every row keeps at least one 0 entry.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n_q {
            if self.data[i * self.n_k..(i + 1) * self.n_k]
                .iter()
                .all(|&v| v != 0.0)
            {
                return Err(Error::MaskConstruction(format!(
                    "additive mask row {i} is fully masked"
                )));
            }
        }
        Ok(())
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::constant(self.data.clone(), vec![self.n_q, self.n_k])
    }
}

/// The auto-regressive mask over `n` positions.
pub fn build_causal_mask(n: usize, neg_fill: f64) -> AdditiveMask {
    AdditiveMask::causal(n, neg_fill)
}

/// Applies a row activation to the trailing axis of `logits` as a recorded
/// tape op, so gradients flow through the activation's own backward rule.
pub fn activate_rows(
    tape: &Tape,
    logits: &Tensor,
    act: &'static dyn RowActivation,
) -> Result<Tensor> {
    let cols = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("activate_rows on rank-0 tensor".into()))?;
    if cols == 0 {
        return Err(Error::Shape("activate_rows on zero-width rows".into()));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(cols) {
        act.forward_row(row)?;
    }
    Ok(tape.record(&[logits], out, logits.shape().to_vec(), |out_rc| {
        let cap = Rc::clone(out_rc);
        Box::new(move |up: &[f64]| {
            let mut g = vec![0.0; cap.len()];
            for ((p, u), d) in cap
                .chunks_exact(cols)
                .zip(up.chunks_exact(cols))
                .zip(g.chunks_exact_mut(cols))
            {
                act.backward_row(p, u, d);
            }
            vec![Some(g)]
        })
    }))
}

/// Softmax over the trailing axis.
pub fn softmax_rows(tape: &Tape, logits: &Tensor) -> Result<Tensor> {
    activate_rows(tape, logits, ActivationKind::Softmax.resolve())
}

/// 1.5-entmax over the trailing axis.
pub fn entmax15_rows(tape: &Tape, logits: &Tensor) -> Result<Tensor> {
    activate_rows(tape, logits, ActivationKind::Entmax15.resolve())
}

/// Scaled dot-product attention over one head.
///
/// Computes `activation((Q K^T + M) / sqrt(d_k)) V` with `M = 0` when no
/// mask is given, exactly in that order: the additive mask lands on the raw
/// logits before the scale. Returns the output and the post-activation
/// weights so observers can collect attention statistics.
pub fn scaled_dot_product(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AdditiveMask>,
    act: &'static dyn RowActivation,
) -> Result<(Tensor, Tensor)> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "scaled_dot_product expects rank-2 Q/K/V, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (n, d_k) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    if k.shape()[1] != d_k {
        return Err(Error::Shape(format!(
            "query width {d_k} does not match key width {}",
            k.shape()[1]
        )));
    }
    if v.shape()[0] != m {
        return Err(Error::Shape(format!(
            "value rows {} do not match key rows {m}",
            v.shape()[0]
        )));
    }
    let mut logits = tape.matmul_nt(q, k)?;
    if let Some(mask) = mask {
        if mask.n_query() != n || mask.n_key() != m {
            return Err(Error::Shape(format!(
                "mask shape {}x{} does not match logits {n}x{m}",
                mask.n_query(),
                mask.n_key()
            )));
        }
        mask.validate()?;
        logits = tape.add(&logits, &mask.as_tensor())?;
    }
    let scaled = tape.scale(&logits, 1.0 / (d_k as f64).sqrt());
    let weights = activate_rows(tape, &scaled, act)?;
    let out = tape.matmul(&weights, v)?;
    Ok((out, weights))
}

/// Projection weights for one multi-head attention layer: per-head query,
/// key, value maps `[d_model, d_k]`/`[d_model, d_v]` and per-head output
/// maps `[d_v, d_model]` whose sum realizes the concat-then-project form.
pub struct MultiHeadParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
}

/// Multi-head attention: H scaled dot-product instances concatenated via
/// summed per-head output projections.
///
/// When `causal` is set, the auto-regressive mask is combined with each
/// head's prune mask by entrywise minimum, so a position masked by either
/// stays masked. Returns the per-head post-activation weights alongside
/// the output so callers can report them to observers.
pub fn multi_head(
    tape: &Tape,
    x_q: &Tensor,
    x_kv: &Tensor,
    head_masks: Option<&[AdditiveMask]>,
    causal: bool,
    params: &MultiHeadParams,
    config: &AttentionConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    let h = config.n_heads;
    if params.wq.len() != h || params.wk.len() != h || params.wv.len() != h || params.wo.len() != h
    {
        return Err(Error::Shape(format!(
            "multi_head: expected {h} heads of projection weights"
        )));
    }
    if let Some(masks) = head_masks {
        if masks.len() != h {
            return Err(Error::Shape(format!(
                "multi_head: {} head masks for {h} heads",
                masks.len()
            )));
        }
    }
    let n = x_q.shape()[0];
    let m = x_kv.shape()[0];
    let causal_mask = if causal {
        if n != m {
            return Err(Error::Shape(format!(
                "causal attention requires square geometry, got {n}x{m}"
            )));
        }
        Some(AdditiveMask::causal(n, config.neg_fill))
    } else {
        None
    };
    let act = config.activation.resolve();

    let mut out: Option<Tensor> = None;
    let mut all_weights = Vec::with_capacity(h);
    for head in 0..h {
        let q = tape.matmul(x_q, &params.wq[head])?;
        let k = tape.matmul(x_kv, &params.wk[head])?;
        let v = tape.matmul(x_kv, &params.wv[head])?;
        let combined: Option<AdditiveMask> =
            match (&causal_mask, head_masks.map(|ms| &ms[head])) {
                (Some(c), Some(p)) => Some(c.combine_min(p)?),
                (Some(c), None) => Some(c.clone()),
                (None, Some(p)) => Some(p.clone()),
                (None, None) => None,
            };
        let (head_out, weights) = scaled_dot_product(tape, &q, &k, &v, combined.as_ref(), act)?;
        let projected = tape.matmul(&head_out, &params.wo[head])?;
        out = Some(match out {
            Some(acc) => tape.add(&acc, &projected)?,
            None => projected,
        });
        all_weights.push(weights);
    }
    Ok((out.expect("n_heads >= 1"), all_weights))
}

#[cfg(test)]
mod tests;
