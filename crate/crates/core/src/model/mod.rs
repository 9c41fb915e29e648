//! Decoder-only and encoder-decoder transformers assembled from the
//! attention kernels, with deterministic initialization and checkpointing.
//!
//! Blocks are pre-norm: layer norm feeds each sublayer and the residual
//! skips around it. Positions come from learned absolute embeddings.
//! Every forward can run masked (a [`MaskSet`] sliced to the sequence's
//! window is injected into each attention call) and observed (each head's
//! post-activation weights are reported with their head key).

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head, AdditiveMask, AttentionConfig, AttentionKind, MultiHeadParams,
};
use crate::error::{Error, Result};
use crate::pipeline::{slice_additive, AttentionObserver, HeadKey, MaskSet, MaskShapeSpec};
use crate::tensor::{Tape, Tensor};

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Decoder-only causal language model.
    LmOnly,
    /// Encoder-decoder sequence-to-sequence model.
    EncDec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub attention: AttentionConfig,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub tie_embeddings: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.max_src_len < 2 || self.max_tgt_len < 2 {
            return Err(Error::Config("max lengths must be >= 2".into()));
        }
        if self.vocab_size == 0 || self.d_ff == 0 {
            return Err(Error::Config("vocab_size and d_ff must be positive".into()));
        }
        Ok(())
    }

    /// Attention kinds this architecture contains.
    pub fn kinds(&self) -> Vec<AttentionKind> {
        match self.arch {
            Arch::LmOnly => vec![AttentionKind::SelfDecoder],
            Arch::EncDec => vec![
                AttentionKind::SelfEncoder,
                AttentionKind::SelfDecoder,
                AttentionKind::Cross,
            ],
        }
    }

    /// Head layout for statistics and masks.
    pub fn mask_shape(&self) -> MaskShapeSpec {
        let mut dims = BTreeMap::new();
        match self.arch {
            Arch::LmOnly => {
                dims.insert(
                    AttentionKind::SelfDecoder,
                    (self.max_tgt_len, self.max_tgt_len),
                );
            }
            Arch::EncDec => {
                dims.insert(
                    AttentionKind::SelfEncoder,
                    (self.max_src_len, self.max_src_len),
                );
                dims.insert(
                    AttentionKind::SelfDecoder,
                    (self.max_tgt_len, self.max_tgt_len),
                );
                dims.insert(AttentionKind::Cross, (self.max_tgt_len, self.max_src_len));
            }
        }
        MaskShapeSpec {
            n_layers: self.n_layers,
            n_heads: self.attention.n_heads,
            dims,
        }
    }
}

// ---------------------------------------------------------------------------
// Weight layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))
    Xavier,
    /// normal(0, 0.02), used for embeddings
    Embedding,
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
struct WeightSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Deterministic weight order: initialization draws and parameter binding
/// both walk this list, so a (config, seed) pair fixes every byte.
fn weight_layout(cfg: &TransformerConfig) -> Vec<WeightSpec> {
    let d = cfg.attention.d_model;
    let (d_k, d_v, h) = (cfg.attention.d_k, cfg.attention.d_v, cfg.attention.n_heads);
    let mut specs: Vec<WeightSpec> = Vec::new();
    let push = |specs: &mut Vec<WeightSpec>, name: String, shape: Vec<usize>, init: Init| {
        specs.push(WeightSpec { name, shape, init });
    };
    let attn_block = |specs: &mut Vec<WeightSpec>, prefix: String| {
        for head in 0..h {
            for (suffix, shape) in [
                ("wq", vec![d, d_k]),
                ("wk", vec![d, d_k]),
                ("wv", vec![d, d_v]),
                ("wo", vec![d_v, d]),
            ] {
                specs.push(WeightSpec {
                    name: format!("{prefix}.h{head}.{suffix}"),
                    shape,
                    init: Init::Xavier,
                });
            }
        }
    };
    let ln = |specs: &mut Vec<WeightSpec>, prefix: String| {
        push(specs, format!("{prefix}.gain"), vec![d], Init::Ones);
        push(specs, format!("{prefix}.bias"), vec![d], Init::Zeros);
    };
    let ff = |specs: &mut Vec<WeightSpec>, prefix: String| {
        push(specs, format!("{prefix}.w1"), vec![d, cfg.d_ff], Init::Xavier);
        push(specs, format!("{prefix}.b1"), vec![cfg.d_ff], Init::Zeros);
        push(specs, format!("{prefix}.w2"), vec![cfg.d_ff, d], Init::Xavier);
        push(specs, format!("{prefix}.b2"), vec![d], Init::Zeros);
    };

    push(&mut specs, "tok_emb".into(), vec![cfg.vocab_size, d], Init::Embedding);
    match cfg.arch {
        Arch::LmOnly => push(
            &mut specs,
            "pos_emb".into(),
            vec![cfg.max_tgt_len, d],
            Init::Embedding,
        ),
        Arch::EncDec => {
            push(
                &mut specs,
                "pos_emb_src".into(),
                vec![cfg.max_src_len, d],
                Init::Embedding,
            );
            push(
                &mut specs,
                "pos_emb_tgt".into(),
                vec![cfg.max_tgt_len, d],
                Init::Embedding,
            );
        }
    }

    if cfg.arch == Arch::EncDec {
        for l in 0..cfg.n_layers {
            ln(&mut specs, format!("enc.l{l}.ln1"));
            attn_block(&mut specs, format!("enc.l{l}.attn"));
            ln(&mut specs, format!("enc.l{l}.ln2"));
            ff(&mut specs, format!("enc.l{l}.ff"));
        }
        ln(&mut specs, "enc.final_ln".into());
    }
    for l in 0..cfg.n_layers {
        ln(&mut specs, format!("dec.l{l}.ln1"));
        attn_block(&mut specs, format!("dec.l{l}.self"));
        ln(&mut specs, format!("dec.l{l}.ln2"));
        if cfg.arch == Arch::EncDec {
            attn_block(&mut specs, format!("dec.l{l}.cross"));
            ln(&mut specs, format!("dec.l{l}.ln3"));
        }
        ff(&mut specs, format!("dec.l{l}.ff"));
    }
    ln(&mut specs, "dec.final_ln".into());
    if !cfg.tie_embeddings {
        push(&mut specs, "out_proj".into(), vec![d, cfg.vocab_size], Init::Xavier);
    }
    specs
}

// ---------------------------------------------------------------------------
// Checkpoints and runtime parameters
// ---------------------------------------------------------------------------

/// All learned weights plus everything needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TransformerConfig,
    pub seed: u64,
    pub step: u64,
    /// Named flat arrays, keyed by weight name.
    pub weights: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    /// Weight bytes digest; identical checkpoints hash identically.
    pub fn weights_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, data) in &self.weights {
            hasher.update(name.as_bytes());
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Deterministic initialization: matrices from uniform(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)), embeddings from normal(0, 0.02),
/// gains one, biases zero. Same (config, seed) twice is bit-identical.
pub fn init_params(config: &TransformerConfig, seed: u64) -> Result<Checkpoint> {
    use rand::{Rng, SeedableRng};
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut weights = BTreeMap::new();
    for spec in weight_layout(config) {
        let numel: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.init {
            Init::Xavier => {
                let (fan_in, fan_out) = (spec.shape[0], spec.shape[spec.shape.len() - 1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::Embedding => (0..numel).map(|_| 0.02 * gauss(&mut rng)).collect(),
            Init::Ones => vec![1.0; numel],
            Init::Zeros => vec![0.0; numel],
        };
        weights.insert(spec.name, data);
    }
    Ok(Checkpoint {
        config: config.clone(),
        seed,
        step: 0,
        weights,
    })
}

/// Runtime view of a checkpoint's weights: shared buffers the training
/// loop mutates between batches and forwards borrow per tape.
pub struct ModelParams {
    pub config: TransformerConfig,
    pub seed: u64,
    pub step: u64,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Rc<Vec<f64>>>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let layout = weight_layout(&ckpt.config);
        let mut names = Vec::with_capacity(layout.len());
        let mut shapes = Vec::with_capacity(layout.len());
        let mut data = Vec::with_capacity(layout.len());
        let mut index = BTreeMap::new();
        for spec in layout {
            let values = ckpt.weights.get(&spec.name).ok_or_else(|| {
                Error::Incompatible(format!("checkpoint is missing weight {}", spec.name))
            })?;
            let numel: usize = spec.shape.iter().product();
            if values.len() != numel {
                return Err(Error::Incompatible(format!(
                    "weight {} has {} values, config implies {numel}",
                    spec.name,
                    values.len()
                )));
            }
            index.insert(spec.name.clone(), names.len());
            names.push(spec.name);
            shapes.push(spec.shape);
            data.push(Rc::new(values.clone()));
        }
        if ckpt.weights.len() != names.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint carries {} weights, config implies {}",
                ckpt.weights.len(),
                names.len()
            )));
        }
        Ok(ModelParams {
            config: ckpt.config.clone(),
            seed: ckpt.seed,
            step: ckpt.step,
            names,
            shapes,
            data,
            index,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let weights = self
            .names
            .iter()
            .zip(&self.data)
            .map(|(n, d)| (n.clone(), (**d).clone()))
            .collect();
        Checkpoint {
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            weights,
        }
    }

    pub fn n_params(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// Mutable access for the optimizer. Callers must have dropped every
    /// tape borrowing these buffers; cloning otherwise would break the
    /// shared-view assumption, so this panics instead.
    pub fn data_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        Rc::get_mut(&mut self.data[idx]).expect("no live tape borrows during optimizer step")
    }

    /// Binds every weight onto a tape: leaves when training, constants
    /// otherwise (nothing gets recorded on the eval path).
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundParams<'_>> {
        let mut tensors = Vec::with_capacity(self.data.len());
        for (shape, data) in self.shapes.iter().zip(&self.data) {
            let t = if trainable {
                tape.leaf(Rc::clone(data), shape.clone())?
            } else {
                Tensor::constant((**data).clone(), shape.clone())
            };
            tensors.push(t);
        }
        Ok(BoundParams {
            index: &self.index,
            tensors,
        })
    }
}

/// Per-tape view of the model weights.
pub struct BoundParams<'a> {
    index: &'a BTreeMap<String, usize>,
    pub tensors: Vec<Tensor>,
}

impl BoundParams<'_> {
    pub fn t(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Incompatible(format!("no weight named {name}")))
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

fn count_prefix_true(valid: Option<&[bool]>, len: usize, what: &str) -> Result<usize> {
    let Some(valid) = valid else { return Ok(len) };
    if valid.len() != len {
        return Err(Error::Shape(format!(
            "{what} validity length {} does not match sequence length {len}",
            valid.len()
        )));
    }
    let real = valid.iter().take_while(|&&b| b).count();
    if real == 0 || valid[real..].iter().any(|&b| b) {
        return Err(Error::Shape(format!(
            "{what} validity must be a non-empty prefix of true values"
        )));
    }
    Ok(real)
}

/// Combined prune/padding mask for one head, sized to the padded window.
/// Real positions carry the sliced global mask; padded key columns are
/// closed; padded query rows keep their real-key columns open so the row
/// invariant holds (their outputs are discarded downstream).
fn head_mask(
    masks: Option<&MaskSet>,
    key: HeadKey,
    n: usize,
    m: usize,
    real_q: usize,
    real_k: usize,
    neg_fill: f64,
) -> Result<Option<AdditiveMask>> {
    let sliced = match masks {
        Some(ms) if ms.covers(&key) => Some(slice_additive(ms, key, real_q, real_k, neg_fill)?),
        _ => None,
    };
    if sliced.is_none() && real_q == n && real_k == m {
        return Ok(None);
    }
    let mask = AdditiveMask::from_masked_flags(n, m, neg_fill, |i, j| {
        if j >= real_k {
            true
        } else if i >= real_q {
            false
        } else {
            sliced.as_ref().map(|s| s.is_masked(i, j)).unwrap_or(false)
        }
    });
    Ok(Some(mask))
}

fn mha_params(bp: &BoundParams, prefix: &str, n_heads: usize) -> Result<MultiHeadParams> {
    let mut wq = Vec::with_capacity(n_heads);
    let mut wk = Vec::with_capacity(n_heads);
    let mut wv = Vec::with_capacity(n_heads);
    let mut wo = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        wq.push(bp.t(&format!("{prefix}.h{h}.wq"))?.clone());
        wk.push(bp.t(&format!("{prefix}.h{h}.wk"))?.clone());
        wv.push(bp.t(&format!("{prefix}.h{h}.wv"))?.clone());
        wo.push(bp.t(&format!("{prefix}.h{h}.wo"))?.clone());
    }
    Ok(MultiHeadParams { wq, wk, wv, wo })
}

fn ln_block(tape: &Tape, x: &Tensor, bp: &BoundParams, prefix: &str) -> Result<Tensor> {
    tape.layer_norm(
        x,
        bp.t(&format!("{prefix}.gain"))?,
        bp.t(&format!("{prefix}.bias"))?,
        LN_EPS,
    )
}

fn ff_block(tape: &Tape, x: &Tensor, bp: &BoundParams, prefix: &str) -> Result<Tensor> {
    let h = tape.matmul(x, bp.t(&format!("{prefix}.w1"))?)?;
    let h = tape.add_row(&h, bp.t(&format!("{prefix}.b1"))?)?;
    let h = tape.relu(&h);
    let h = tape.matmul(&h, bp.t(&format!("{prefix}.w2"))?)?;
    tape.add_row(&h, bp.t(&format!("{prefix}.b2"))?)
}

fn embed(tape: &Tape, bp: &BoundParams, tok_name: &str, pos_name: &str, ids: &[usize]) -> Result<Tensor> {
    let tok = tape.embedding(bp.t(tok_name)?, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.embedding(bp.t(pos_name)?, &positions)?;
    tape.add(&tok, &pos)
}

#[allow(clippy::too_many_arguments)]
fn attention_sublayer(
    tape: &Tape,
    bp: &BoundParams,
    cfg: &TransformerConfig,
    prefix: &str,
    kind: AttentionKind,
    layer: usize,
    x_q: &Tensor,
    x_kv: &Tensor,
    masks: Option<&MaskSet>,
    observer: &mut Option<&mut dyn AttentionObserver>,
    real_q: usize,
    real_k: usize,
) -> Result<Tensor> {
    let h = cfg.attention.n_heads;
    let (n, m) = (x_q.shape()[0], x_kv.shape()[0]);
    let mut head_masks: Option<Vec<AdditiveMask>> = None;
    for head in 0..h {
        let key = HeadKey::new(kind, layer, head);
        if let Some(mask) = head_mask(masks, key, n, m, real_q, real_k, cfg.attention.neg_fill)? {
            head_masks
                .get_or_insert_with(|| vec![AdditiveMask::open(n, m, cfg.attention.neg_fill); h])
                [head] = mask;
        }
    }
    let params = mha_params(bp, prefix, h)?;
    let (out, weights) = multi_head(
        tape,
        x_q,
        x_kv,
        head_masks.as_deref(),
        kind.is_causal(),
        &params,
        &cfg.attention,
    )?;
    if let Some(obs) = observer.as_deref_mut() {
        for (head, w) in weights.iter().enumerate() {
            obs.observe(HeadKey::new(kind, layer, head), n, m, w.data());
        }
    }
    Ok(out)
}

/// Causal language-model forward: logits `[n, vocab]` for every position.
#[allow(clippy::too_many_arguments)]
pub fn lm_forward_t(
    tape: &Tape,
    bp: &BoundParams,
    cfg: &TransformerConfig,
    tokens: &[usize],
    masks: Option<&MaskSet>,
    mut observer: Option<&mut dyn AttentionObserver>,
    valid: Option<&[bool]>,
) -> Result<Tensor> {
    if cfg.arch != Arch::LmOnly {
        return Err(Error::Config("lm_forward requires an LmOnly model".into()));
    }
    let n = tokens.len();
    if n == 0 || n > cfg.max_tgt_len {
        return Err(Error::Shape(format!(
            "sequence length {n} outside 1..={}",
            cfg.max_tgt_len
        )));
    }
    let real = count_prefix_true(valid, n, "token")?;
    let mut x = embed(tape, bp, "tok_emb", "pos_emb", tokens)?;
    for l in 0..cfg.n_layers {
        let a_in = ln_block(tape, &x, bp, &format!("dec.l{l}.ln1"))?;
        let attn = attention_sublayer(
            tape,
            bp,
            cfg,
            &format!("dec.l{l}.self"),
            AttentionKind::SelfDecoder,
            l,
            &a_in,
            &a_in,
            masks,
            &mut observer,
            real,
            real,
        )?;
        x = tape.add(&x, &attn)?;
        let f_in = ln_block(tape, &x, bp, &format!("dec.l{l}.ln2"))?;
        let ff = ff_block(tape, &f_in, bp, &format!("dec.l{l}.ff"))?;
        x = tape.add(&x, &ff)?;
    }
    let x = ln_block(tape, &x, bp, "dec.final_ln")?;
    project_logits(tape, bp, cfg, &x)
}

fn project_logits(
    tape: &Tape,
    bp: &BoundParams,
    cfg: &TransformerConfig,
    x: &Tensor,
) -> Result<Tensor> {
    if cfg.tie_embeddings {
        tape.matmul_nt(x, bp.t("tok_emb")?)
    } else {
        tape.matmul(x, bp.t("out_proj")?)
    }
}

/// Encoder-decoder forward: logits `[m, vocab]` over the shifted target.
#[allow(clippy::too_many_arguments)]
pub fn seq2seq_forward_t(
    tape: &Tape,
    bp: &BoundParams,
    cfg: &TransformerConfig,
    src: &[usize],
    tgt_in: &[usize],
    masks: Option<&MaskSet>,
    mut observer: Option<&mut dyn AttentionObserver>,
    src_valid: Option<&[bool]>,
    tgt_valid: Option<&[bool]>,
) -> Result<Tensor> {
    if cfg.arch != Arch::EncDec {
        return Err(Error::Config("seq2seq_forward requires an EncDec model".into()));
    }
    let (n, m) = (src.len(), tgt_in.len());
    if n == 0 || n > cfg.max_src_len {
        return Err(Error::Shape(format!(
            "source length {n} outside 1..={}",
            cfg.max_src_len
        )));
    }
    if m == 0 || m > cfg.max_tgt_len {
        return Err(Error::Shape(format!(
            "target length {m} outside 1..={}",
            cfg.max_tgt_len
        )));
    }
    let real_src = count_prefix_true(src_valid, n, "source")?;
    let real_tgt = count_prefix_true(tgt_valid, m, "target")?;

    // encoder
    let mut x = embed(tape, bp, "tok_emb", "pos_emb_src", src)?;
    for l in 0..cfg.n_layers {
        let a_in = ln_block(tape, &x, bp, &format!("enc.l{l}.ln1"))?;
        let attn = attention_sublayer(
            tape,
            bp,
            cfg,
            &format!("enc.l{l}.attn"),
            AttentionKind::SelfEncoder,
            l,
            &a_in,
            &a_in,
            masks,
            &mut observer,
            real_src,
            real_src,
        )?;
        x = tape.add(&x, &attn)?;
        let f_in = ln_block(tape, &x, bp, &format!("enc.l{l}.ln2"))?;
        let ff = ff_block(tape, &f_in, bp, &format!("enc.l{l}.ff"))?;
        x = tape.add(&x, &ff)?;
    }
    let enc_out = ln_block(tape, &x, bp, "enc.final_ln")?;

    // decoder
    let mut y = embed(tape, bp, "tok_emb", "pos_emb_tgt", tgt_in)?;
    for l in 0..cfg.n_layers {
        let a_in = ln_block(tape, &y, bp, &format!("dec.l{l}.ln1"))?;
        let self_attn = attention_sublayer(
            tape,
            bp,
            cfg,
            &format!("dec.l{l}.self"),
            AttentionKind::SelfDecoder,
            l,
            &a_in,
            &a_in,
            masks,
            &mut observer,
            real_tgt,
            real_tgt,
        )?;
        y = tape.add(&y, &self_attn)?;
        let c_in = ln_block(tape, &y, bp, &format!("dec.l{l}.ln2"))?;
        let cross = attention_sublayer(
            tape,
            bp,
            cfg,
            &format!("dec.l{l}.cross"),
            AttentionKind::Cross,
            l,
            &c_in,
            &enc_out,
            masks,
            &mut observer,
            real_tgt,
            real_src,
        )?;
        y = tape.add(&y, &cross)?;
        let f_in = ln_block(tape, &y, bp, &format!("dec.l{l}.ln3"))?;
        let ff = ff_block(tape, &f_in, bp, &format!("dec.l{l}.ff"))?;
        y = tape.add(&y, &ff)?;
    }
    let y = ln_block(tape, &y, bp, "dec.final_ln")?;
    project_logits(tape, bp, cfg, &y)
}

/// Evaluation-mode LM forward over live parameters; returns `[n, vocab]`
/// logits data without recording anything.
pub fn lm_logits(
    params: &ModelParams,
    tokens: &[usize],
    masks: Option<&MaskSet>,
    observer: Option<&mut dyn AttentionObserver>,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bp = params.bind(&tape, false)?;
    let logits = lm_forward_t(&tape, &bp, &params.config, tokens, masks, observer, None)?;
    Ok(logits.data().to_vec())
}

/// Evaluation-mode LM forward from a checkpoint.
pub fn lm_forward(
    ckpt: &Checkpoint,
    tokens: &[usize],
    masks: Option<&MaskSet>,
    observer: Option<&mut dyn AttentionObserver>,
) -> Result<Vec<f64>> {
    lm_logits(&ModelParams::from_checkpoint(ckpt)?, tokens, masks, observer)
}

/// Evaluation-mode seq2seq forward over live parameters.
pub fn seq2seq_logits(
    params: &ModelParams,
    src: &[usize],
    tgt_in: &[usize],
    masks: Option<&MaskSet>,
    observer: Option<&mut dyn AttentionObserver>,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bp = params.bind(&tape, false)?;
    let logits = seq2seq_forward_t(
        &tape,
        &bp,
        &params.config,
        src,
        tgt_in,
        masks,
        observer,
        None,
        None,
    )?;
    Ok(logits.data().to_vec())
}

/// Evaluation-mode seq2seq forward from a checkpoint.
pub fn seq2seq_forward(
    ckpt: &Checkpoint,
    src: &[usize],
    tgt_in: &[usize],
    masks: Option<&MaskSet>,
    observer: Option<&mut dyn AttentionObserver>,
) -> Result<Vec<f64>> {
    seq2seq_logits(
        &ModelParams::from_checkpoint(ckpt)?,
        src,
        tgt_in,
        masks,
        observer,
    )
}

/// Greedy argmax over one logits row, ties broken toward the smallest id.
pub(crate) fn argmax_id(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Iterative argmax decoding driven by a next-token logits callback.
pub(crate) fn greedy_decode_with<F>(
    mut next_logits: F,
    eos_id: usize,
    max_len: usize,
) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut out: Vec<usize> = Vec::new();
    while out.len() < max_len {
        let row = next_logits(&out)?;
        let tok = argmax_id(&row);
        out.push(tok);
        if tok == eos_id {
            break;
        }
    }
    Ok(out)
}

/// Greedy decoding over live parameters, stopping at `eos_id` or after
/// `max_len` generated tokens. Inference runs masked when a mask set is
/// given.
pub fn greedy_decode_params(
    params: &ModelParams,
    src: &[usize],
    bos_id: usize,
    eos_id: usize,
    max_len: usize,
    masks: Option<&MaskSet>,
) -> Result<Vec<usize>> {
    if max_len + 1 > params.config.max_tgt_len {
        return Err(Error::Shape(format!(
            "max_len {max_len} exceeds model target budget {}",
            params.config.max_tgt_len - 1
        )));
    }
    greedy_decode_with(
        |generated| {
            let mut tgt_in = Vec::with_capacity(generated.len() + 1);
            tgt_in.push(bos_id);
            tgt_in.extend_from_slice(generated);
            let v = params.config.vocab_size;
            let logits = seq2seq_logits(params, src, &tgt_in, masks, None)?;
            Ok(logits[(tgt_in.len() - 1) * v..].to_vec())
        },
        eos_id,
        max_len,
    )
}

/// Greedy decoding from a checkpoint.
pub fn greedy_decode(
    ckpt: &Checkpoint,
    src: &[usize],
    bos_id: usize,
    eos_id: usize,
    max_len: usize,
    masks: Option<&MaskSet>,
) -> Result<Vec<usize>> {
    greedy_decode_params(
        &ModelParams::from_checkpoint(ckpt)?,
        src,
        bos_id,
        eos_id,
        max_len,
        masks,
    )
}

#[cfg(test)]
mod tests;
