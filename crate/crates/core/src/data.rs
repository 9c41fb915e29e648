//! Synthetic task generators, character-corpus ingestion, and batching.
//!
//! Tasks sit behind a small registry so the harness can pick one by name:
//! `copy` and `reverse` are uniform-random pair tasks, `toy_translation`
//! is a substitution cipher with one long-range dependency (the final
//! target token depends on source position 0), and `char_lm` ingests a
//! plain-text corpus as a character stream.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: usize = 4;

/// Symbol table with fixed reserved ids: pad=0, bos=1, eos=2, unk=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), RESERVED + i))
            .collect();
        Vocab { symbols, index }
    }

    /// Reserved ids plus one id per symbol.
    pub fn size(&self) -> usize {
        RESERVED + self.symbols.len()
    }

    pub fn id_of(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK_ID)
    }

    pub fn symbol_of(&self, id: usize) -> &str {
        match id {
            PAD_ID => "<pad>",
            BOS_ID => "<bos>",
            EOS_ID => "<eos>",
            UNK_ID => "<unk>",
            _ => self
                .symbols
                .get(id - RESERVED)
                .map(String::as_str)
                .unwrap_or("<unk>"),
        }
    }

    pub fn encode_chars(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id_of(&c.to_string())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&id| self.symbol_of(id).to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// A source/target pair; targets begin with bos and end with eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Token-id pairs, split into train/valid/test.
    Pairs {
        train: Vec<PairExample>,
        valid: Vec<PairExample>,
        test: Vec<PairExample>,
    },
    /// One contiguous id stream per split.
    LmStream {
        train: Vec<usize>,
        valid: Vec<usize>,
        test: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Task id, recorded as mask provenance.
    pub name: String,
    pub vocab: Vocab,
    pub payload: Payload,
}

impl Dataset {
    pub fn is_pairs(&self) -> bool {
        matches!(self.payload, Payload::Pairs { .. })
    }

    pub fn pairs(&self, split: Split) -> Result<&[PairExample]> {
        match &self.payload {
            Payload::Pairs { train, valid, test } => Ok(match split {
                Split::Train => train,
                Split::Valid => valid,
                Split::Test => test,
            }),
            Payload::LmStream { .. } => {
                Err(Error::Data("expected a pair dataset, found an LM stream".into()))
            }
        }
    }

    pub fn stream(&self, split: Split) -> Result<&[usize]> {
        match &self.payload {
            Payload::LmStream { train, valid, test } => Ok(match split {
                Split::Train => train,
                Split::Valid => valid,
                Split::Test => test,
            }),
            Payload::Pairs { .. } => {
                Err(Error::Data("expected an LM stream, found a pair dataset".into()))
            }
        }
    }

    /// Longest source / full-target lengths over every split (targets
    /// include bos/eos). LM streams have no pair lengths and report (0, 0).
    pub fn max_lens(&self) -> (usize, usize) {
        match &self.payload {
            Payload::Pairs { train, valid, test } => {
                let mut src = 0;
                let mut tgt = 0;
                for ex in train.iter().chain(valid).chain(test) {
                    src = src.max(ex.src.len());
                    tgt = tgt.max(ex.tgt.len());
                }
                (src, tgt)
            }
            Payload::LmStream { .. } => (0, 0),
        }
    }
}

fn alphabet(n: usize) -> Vec<String> {
    // single-character symbols: a..z then A..Z
    (0..n)
        .map(|i| {
            let c = if i < 26 {
                (b'a' + i as u8) as char
            } else {
                (b'A' + (i - 26) as u8) as char
            };
            c.to_string()
        })
        .collect()
}

fn split_by_index<T>(examples: Vec<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    // 80/10/10 by example index
    let n = examples.len();
    let train_end = n * 8 / 10;
    let valid_end = train_end + n / 10;
    let mut it = examples.into_iter();
    let train: Vec<T> = it.by_ref().take(train_end).collect();
    let valid: Vec<T> = it.by_ref().take(valid_end - train_end).collect();
    let test: Vec<T> = it.collect();
    (train, valid, test)
}

/// Fixed per-seed bijection over symbol ids; identity for plain tasks.
#[derive(Debug, Clone)]
pub struct Cipher {
    map: Vec<usize>,
}

impl Cipher {
    fn identity(alphabet_size: usize) -> Self {
        Cipher {
            map: (0..alphabet_size).map(|i| RESERVED + i).collect(),
        }
    }

    fn shuffled(alphabet_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut map: Vec<usize> = (0..alphabet_size).map(|i| RESERVED + i).collect();
        map.shuffle(rng);
        Cipher { map }
    }

    pub fn apply(&self, id: usize) -> usize {
        self.map[id - RESERVED]
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_pairs(
    name: &str,
    count: usize,
    len_min: usize,
    len_max: usize,
    alphabet_size: usize,
    seed: u64,
    cipher: Cipher,
    make_tgt: impl Fn(&[usize], &Cipher) -> Vec<usize>,
) -> Result<Dataset> {
    if len_min < 1 || len_max < len_min {
        return Err(Error::Config(format!(
            "invalid length range [{len_min}, {len_max}]"
        )));
    }
    if alphabet_size < 2 || alphabet_size > 52 {
        return Err(Error::Config(format!(
            "alphabet size {alphabet_size} outside 2..=52"
        )));
    }
    let vocab = Vocab::new(alphabet(alphabet_size));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(len_min..=len_max);
        let src: Vec<usize> = (0..len)
            .map(|_| RESERVED + rng.gen_range(0..alphabet_size))
            .collect();
        let body = make_tgt(&src, &cipher);
        let mut tgt = Vec::with_capacity(body.len() + 2);
        tgt.push(BOS_ID);
        tgt.extend(body);
        tgt.push(EOS_ID);
        examples.push(PairExample { src, tgt });
    }
    let (train, valid, test) = split_by_index(examples);
    Ok(Dataset {
        name: name.to_string(),
        vocab,
        payload: Payload::Pairs { train, valid, test },
    })
}

/// Identity task: target repeats the source.
pub fn gen_copy(
    count: usize,
    len_min: usize,
    len_max: usize,
    alphabet_size: usize,
    seed: u64,
) -> Result<Dataset> {
    gen_pairs(
        "copy",
        count,
        len_min,
        len_max,
        alphabet_size,
        seed,
        Cipher::identity(alphabet_size),
        |src, _| src.to_vec(),
    )
}

/// Reversal task: target is the source reversed, which forces
/// anti-diagonal cross-attention structure.
pub fn gen_reverse(
    count: usize,
    len_min: usize,
    len_max: usize,
    alphabet_size: usize,
    seed: u64,
) -> Result<Dataset> {
    gen_pairs(
        "reverse",
        count,
        len_min,
        len_max,
        alphabet_size,
        seed,
        Cipher::identity(alphabet_size),
        |src, _| src.iter().rev().copied().collect(),
    )
}

pub const TOY_TRANSLATION_ALPHABET: usize = 20;
pub const TOY_TRANSLATION_LEN_MIN: usize = 5;
pub const TOY_TRANSLATION_LEN_MAX: usize = 16;

/// Substitution-cipher task over a 20-symbol alphabet with one long-range
/// dependency: every target position is the ciphered source symbol except
/// the final one, which ciphers source position 0. Lengths are uniform in
/// [5, 16], so the long-range edge lands on a different position per
/// example and the cross-attention pattern has no constant window.
pub fn gen_toy_translation(count: usize, seed: u64) -> Result<Dataset> {
    let mut cipher_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1f3);
    let cipher = Cipher::shuffled(TOY_TRANSLATION_ALPHABET, &mut cipher_rng);
    gen_pairs(
        "toy_translation",
        count,
        TOY_TRANSLATION_LEN_MIN,
        TOY_TRANSLATION_LEN_MAX,
        TOY_TRANSLATION_ALPHABET,
        seed,
        cipher,
        |src, cipher| {
            let mut tgt: Vec<usize> = src.iter().map(|&id| cipher.apply(id)).collect();
            let last = tgt.len() - 1;
            tgt[last] = cipher.apply(src[0]);
            tgt
        },
    )
}

/// Ingests a UTF-8 text file as a character-level LM stream: the vocab is
/// the sorted distinct characters, the stream splits 90/5/5 contiguously.
pub fn char_lm_ingest(path: &Path, max_chars: usize) -> Result<(Vocab, Dataset)> {
    let text = std::fs::read_to_string(path)?;
    char_lm_from_text(&text, max_chars)
}

pub fn char_lm_from_text(text: &str, max_chars: usize) -> Result<(Vocab, Dataset)> {
    let chars: Vec<char> = text.chars().take(max_chars).collect();
    if chars.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let distinct: std::collections::BTreeSet<char> = chars.iter().copied().collect();
    let vocab = Vocab::new(distinct.iter().map(|c| c.to_string()).collect());
    let ids: Vec<usize> = chars.iter().map(|c| vocab.id_of(&c.to_string())).collect();
    let n = ids.len();
    let train_end = n * 90 / 100;
    let valid_end = train_end + n * 5 / 100;
    let dataset = Dataset {
        name: "char_lm".to_string(),
        vocab: vocab.clone(),
        payload: Payload::LmStream {
            train: ids[..train_end].to_vec(),
            valid: ids[train_end..valid_end].to_vec(),
            test: ids[valid_end..].to_vec(),
        },
    };
    Ok((vocab, dataset))
}

/// Deterministic synthetic prose: an invented word list sampled with a
/// Zipf-like bias, grouped into sentences that each repeat one topic
/// word. The repetitions put usable information at sentence range, so a
/// character model gains from attending tens of positions back, not just
/// at the previous few characters.
pub fn synth_char_corpus(n_chars: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let onsets = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    let vowels = ["a", "e", "i", "o", "u"];
    let codas = ["", "n", "r", "s", "t", "l"];
    let mut words: Vec<String> = Vec::with_capacity(120);
    while words.len() < 120 {
        let syllables = rng.gen_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(onsets[rng.gen_range(0..onsets.len())]);
            w.push_str(vowels[rng.gen_range(0..vowels.len())]);
            w.push_str(codas[rng.gen_range(0..codas.len())]);
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    // Zipf-ish weights: word k gets weight 1/(k+1)
    let weights: Vec<f64> = (0..words.len()).map(|k| 1.0 / (k + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let mut zipf = |rng: &mut ChaCha8Rng| -> usize {
        let mut dart = rng.gen_range(0.0..total);
        for (k, w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                return k;
            }
        }
        weights.len() - 1
    };
    let mut out = String::with_capacity(n_chars + 32);
    while out.len() < n_chars {
        let sentence_len = rng.gen_range(5..=14);
        // mid-frequency topic word, repeated across the sentence so the
        // previous occurrence is informative tens of characters back
        let topic = 15 + zipf(&mut rng) % 60;
        for i in 0..sentence_len {
            let pick = if i > 0 && rng.gen_bool(0.55) {
                topic
            } else {
                zipf(&mut rng)
            };
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&words[pick]);
        }
        out.push_str(". ");
    }
    out.truncate(n_chars);
    out
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One padded training item. Validity is false exactly at pad positions.
/// LM segments leave `src` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub src: Vec<usize>,
    pub src_valid: Vec<bool>,
    /// Teacher-forcing input: target without its final token.
    pub tgt_in: Vec<usize>,
    pub tgt_valid: Vec<bool>,
    /// Gold next-token ids aligned with `tgt_in`; pad positions carry PAD.
    pub gold: Vec<usize>,
}

impl BatchItem {
    pub fn real_src_len(&self) -> usize {
        self.src_valid.iter().take_while(|&&b| b).count()
    }

    pub fn real_tgt_len(&self) -> usize {
        self.tgt_valid.iter().take_while(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

fn pad_to(ids: &[usize], len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut padded = ids.to_vec();
    let mut valid = vec![true; ids.len()];
    padded.resize(len, PAD_ID);
    valid.resize(len, false);
    (padded, valid)
}

fn pair_batch(examples: &[&PairExample]) -> Batch {
    let src_len = examples.iter().map(|e| e.src.len()).max().unwrap_or(0);
    let tgt_len = examples.iter().map(|e| e.tgt.len() - 1).max().unwrap_or(0);
    let items = examples
        .iter()
        .map(|e| {
            let (src, src_valid) = pad_to(&e.src, src_len);
            let (tgt_in, tgt_valid) = pad_to(&e.tgt[..e.tgt.len() - 1], tgt_len);
            let (gold, _) = pad_to(&e.tgt[1..], tgt_len);
            BatchItem {
                src,
                src_valid,
                tgt_in,
                tgt_valid,
                gold,
            }
        })
        .collect();
    Batch { items }
}

/// Length-bucketed, padded batches for pair data; contiguous fixed-length
/// segments for LM streams (input is the first `max_len` ids of each
/// window, gold the shifted tail; a trailing partial window is dropped).
/// Batch order is shuffled deterministically per (seed, epoch); pass
/// `None` for evaluation order.
pub fn make_batches(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    max_len: usize,
    shuffle: Option<(u64, u64)>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut batches = match &dataset.payload {
        Payload::Pairs { .. } => {
            let pairs = dataset.pairs(split)?;
            // stable length bucketing: sort by (tgt len, src len, index)
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.sort_by_key(|&i| (pairs[i].tgt.len(), pairs[i].src.len(), i));
            order
                .chunks(batch_size)
                .map(|chunk| {
                    let refs: Vec<&PairExample> = chunk.iter().map(|&i| &pairs[i]).collect();
                    pair_batch(&refs)
                })
                .collect::<Vec<_>>()
        }
        Payload::LmStream { .. } => {
            let stream = dataset.stream(split)?;
            if max_len < 2 {
                return Err(Error::Config("LM segment length must be >= 2".into()));
            }
            let seg = max_len + 1;
            let mut items = Vec::new();
            let mut start = 0;
            while start + seg <= stream.len() {
                let window = &stream[start..start + seg];
                items.push(BatchItem {
                    src: Vec::new(),
                    src_valid: Vec::new(),
                    tgt_in: window[..max_len].to_vec(),
                    tgt_valid: vec![true; max_len],
                    gold: window[1..].to_vec(),
                });
                start += seg;
            }
            if items.is_empty() {
                return Err(Error::Data(format!(
                    "split {} holds {} ids, too short for segments of {}",
                    split.tag(),
                    stream.len(),
                    seg
                )));
            }
            items
                .chunks(batch_size)
                .map(|chunk| Batch {
                    items: chunk.to_vec(),
                })
                .collect()
        }
    };
    if let Some((seed, epoch)) = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        batches.shuffle(&mut rng);
    }
    Ok(batches)
}

/// Writes pair datasets one example per line (`src<TAB>tgt`, tokens
/// space-separated) and LM streams as raw text, for eyeballing.
pub fn export_lines(dataset: &Dataset, split: Split, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    match &dataset.payload {
        Payload::Pairs { .. } => {
            for ex in dataset.pairs(split)? {
                let src = dataset.vocab.decode(&ex.src).join(" ");
                let tgt = dataset.vocab.decode(&ex.tgt).join(" ");
                writeln!(out, "{src}\t{tgt}")?;
            }
        }
        Payload::LmStream { .. } => {
            let text: String = dataset
                .stream(split)?
                .iter()
                .map(|&id| dataset.vocab.symbol_of(id).to_string())
                .collect();
            writeln!(out, "{text}")?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Task registry
// ---------------------------------------------------------------------------

/// Generation knobs shared across tasks; each task reads what it needs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskParams {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_len_min")]
    pub len_min: usize,
    #[serde(default = "default_len_max")]
    pub len_max: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet_size: usize,
    /// Corpus file for `char_lm`; generated synthetically when absent.
    #[serde(default)]
    pub corpus_path: Option<std::path::PathBuf>,
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
    #[serde(default = "default_seed")]
    pub data_seed: u64,
}

fn default_count() -> usize {
    3000
}
fn default_len_min() -> usize {
    3
}
fn default_len_max() -> usize {
    8
}
fn default_alphabet() -> usize {
    12
}
fn default_max_chars() -> usize {
    200_000
}
fn default_seed() -> u64 {
    1234
}

impl Default for TaskParams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

pub trait TaskGen: Sync {
    fn name(&self) -> &'static str;
    fn generate(&self, params: &TaskParams) -> Result<Dataset>;
}

struct CopyTask;
struct ReverseTask;
struct ToyTranslationTask;
struct CharLmTask;

impl TaskGen for CopyTask {
    fn name(&self) -> &'static str {
        "copy"
    }
    fn generate(&self, p: &TaskParams) -> Result<Dataset> {
        gen_copy(p.count, p.len_min, p.len_max, p.alphabet_size, p.data_seed)
    }
}

impl TaskGen for ReverseTask {
    fn name(&self) -> &'static str {
        "reverse"
    }
    fn generate(&self, p: &TaskParams) -> Result<Dataset> {
        gen_reverse(p.count, p.len_min, p.len_max, p.alphabet_size, p.data_seed)
    }
}

impl TaskGen for ToyTranslationTask {
    fn name(&self) -> &'static str {
        "toy_translation"
    }
    fn generate(&self, p: &TaskParams) -> Result<Dataset> {
        gen_toy_translation(p.count, p.data_seed)
    }
}

impl TaskGen for CharLmTask {
    fn name(&self) -> &'static str {
        "char_lm"
    }
    fn generate(&self, p: &TaskParams) -> Result<Dataset> {
        let (_, ds) = match &p.corpus_path {
            Some(path) => char_lm_ingest(path, p.max_chars)?,
            None => {
                let text = synth_char_corpus(p.max_chars, p.data_seed);
                char_lm_from_text(&text, p.max_chars)?
            }
        };
        Ok(ds)
    }
}

static COPY: CopyTask = CopyTask;
static REVERSE: ReverseTask = ReverseTask;
static TOY: ToyTranslationTask = ToyTranslationTask;
static CHAR_LM: CharLmTask = CharLmTask;

/// Registered tasks, in registry order.
pub static TASKS: &[&dyn TaskGen] = &[&COPY, &REVERSE, &TOY, &CHAR_LM];

pub fn task_by_name(name: &str) -> Option<&'static dyn TaskGen> {
    TASKS.iter().copied().find(|t| t.name() == name)
}

pub fn task_names() -> Vec<&'static str> {
    TASKS.iter().map(|t| t.name()).collect()
}

#[cfg(test)]
#[path = "data_tests.rs"]
mod tests;
