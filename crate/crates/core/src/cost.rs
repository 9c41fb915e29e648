//! Multiply-accumulate cost model for the attention mechanism.
//!
//! Four steps are counted for an input `[B, N, d]` with `h` heads of
//! width `d_k`: (i) the query/key/value projections at `3*B*N*d^2`,
//! (ii) attention scores at `B*h*N^2*d_k`, (iii) the score-value products
//! at `(1-p)*B*h*N^2*d_k` once a fraction `p` of score entries is pruned,
//! and (iv) the output projection at `B*N*d^2`. An instrumented forward
//! pass counts real multiply-accumulates and must agree exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention cost parameters. `prune_frac` is a fraction in [0, 1] here;
/// prune percentages elsewhere convert at the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub batch: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub prune_frac: f64,
}

impl CostParams {
    pub fn new(
        batch: usize,
        seq_len: usize,
        d_model: usize,
        heads: usize,
        prune_frac: f64,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must divide into {heads} heads"
            )));
        }
        let p = CostParams {
            batch,
            seq_len,
            d_model,
            heads,
            d_k: d_model / heads,
            prune_frac,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.d_k != self.d_model {
            return Err(Error::Config(format!(
                "h {} * d_k {} != d {}",
                self.heads, self.d_k, self.d_model
            )));
        }
        if !(0.0..=1.0).contains(&self.prune_frac) {
            return Err(Error::Config(format!(
                "prune fraction {} outside [0, 1]",
                self.prune_frac
            )));
        }
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step MAC counts. Values are exact for the desk-scale ranges used
/// here (every product stays far below 2^53).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacBreakdown {
    /// (i) query/key/value projections: 3*B*N*d^2
    pub qkv_proj: f64,
    /// (ii) attention scores: B*h*N^2*d_k
    pub scores: f64,
    /// (iii) score-value products: (1-p)*B*h*N^2*d_k
    pub weighted_values: f64,
    /// (iv) output projection: B*N*d^2
    pub out_proj: f64,
    pub total: f64,
}

pub fn attention_macs(params: &CostParams) -> Result<MacBreakdown> {
    params.validate()?;
    let b = params.batch as f64;
    let n = params.seq_len as f64;
    let d = params.d_model as f64;
    let h = params.heads as f64;
    let dk = params.d_k as f64;
    let qkv_proj = 3.0 * b * n * d * d;
    let scores = b * h * n * n * dk;
    let weighted_values = (1.0 - params.prune_frac) * b * h * n * n * dk;
    let out_proj = b * n * d * d;
    Ok(MacBreakdown {
        qkv_proj,
        scores,
        weighted_values,
        out_proj,
        total: qkv_proj + scores + weighted_values + out_proj,
    })
}

/// Fraction of MACs retained after pruning a fraction `p` of the score
/// entries: `(4d + (2 - p) N) / (4d + 2N)`.
pub fn mac_fraction(d_model: usize, seq_len: usize, prune_frac: f64) -> Result<f64> {
    if d_model == 0 || seq_len == 0 {
        return Err(Error::Config("d and N must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&prune_frac) {
        return Err(Error::Config(format!(
            "prune fraction {prune_frac} outside [0, 1]"
        )));
    }
    let d = d_model as f64;
    let n = seq_len as f64;
    Ok((4.0 * d + (2.0 - prune_frac) * n) / (4.0 * d + 2.0 * n))
}

/// Single-layer multi-head attention forward in plain loops with an
/// optional MAC counter.
///
/// The mask marks pruned score entries per head (`[h, N, N]`, true =
/// pruned). Pruned entries are forced to exactly zero after the softmax
/// and their score-value products are skipped by the sparse-aware loop,
/// so counted work reflects the theoretical step-(iii) savings while the
/// numerical output is unchanged. This is a counting model, not an
/// optimized kernel.
pub struct InstrumentedAttention {
    pub params: CostParams,
    /// Per-head projections `[d, d_k]`; output maps `[d_k, d]`.
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    pub wo: Vec<Vec<f64>>,
}

impl InstrumentedAttention {
    /// Deterministic small random weights for verification runs.
    pub fn seeded(params: CostParams, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (d, dk, h) = (params.d_model, params.d_k, params.heads);
        let mut mat = |rows: usize, cols: usize| -> Vec<f64> {
            (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect()
        };
        InstrumentedAttention {
            params,
            wq: (0..h).map(|_| mat(d, dk)).collect(),
            wk: (0..h).map(|_| mat(d, dk)).collect(),
            wv: (0..h).map(|_| mat(d, dk)).collect(),
            wo: (0..h).map(|_| mat(dk, d)).collect(),
        }
    }

    /// Runs the forward pass over `x` (`[B, N, d]` row-major), counting
    /// multiply-accumulates into `counter` when given. The mask, when
    /// present, is `[h, N, N]` with true = pruned; the same mask applies
    /// to every batch element.
    pub fn forward(
        &self,
        x: &[f64],
        mask: Option<&[bool]>,
        mut counter: Option<&mut u64>,
    ) -> Result<Vec<f64>> {
        let CostParams {
            batch: b,
            seq_len: n,
            d_model: d,
            heads: h,
            d_k: dk,
            ..
        } = self.params;
        if x.len() != b * n * d {
            return Err(Error::Shape(format!(
                "input length {} does not match B*N*d = {}",
                x.len(),
                b * n * d
            )));
        }
        if let Some(m) = mask {
            if m.len() != h * n * n {
                return Err(Error::Shape(format!(
                    "mask length {} does not match h*N^2 = {}",
                    m.len(),
                    h * n * n
                )));
            }
        }
        let mut count = |macs: u64| {
            if let Some(c) = counter.as_deref_mut() {
                *c = c.checked_add(macs).expect("MAC counter overflow");
            }
        };

        let mut out = vec![0.0; b * n * d];
        for bi in 0..b {
            let xb = &x[bi * n * d..(bi + 1) * n * d];
            for head in 0..h {
                let hmask = mask.map(|m| &m[head * n * n..(head + 1) * n * n]);
                // (i) projections: N*d_k*d MACs each
                let project = |w: &[f64]| -> Vec<f64> {
                    let mut p_out = vec![0.0; n * dk];
                    for i in 0..n {
                        for j in 0..dk {
                            let mut acc = 0.0;
                            for p in 0..d {
                                acc += xb[i * d + p] * w[p * dk + j];
                            }
                            p_out[i * dk + j] = acc;
                        }
                    }
                    p_out
                };
                let q = project(&self.wq[head]);
                let k = project(&self.wk[head]);
                let v = project(&self.wv[head]);
                count(3 * (n * dk * d) as u64);

                // (ii) scores, always dense: N^2*d_k MACs
                let scale = 1.0 / (dk as f64).sqrt();
                let mut scores = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for p in 0..dk {
                            acc += q[i * dk + p] * k[j * dk + p];
                        }
                        scores[i * n + j] = acc * scale;
                    }
                }
                count((n * n * dk) as u64);

                // softmax rows; pruned entries carry exactly zero weight
                for i in 0..n {
                    let row = &mut scores[i * n..(i + 1) * n];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in row.iter().enumerate() {
                        let pruned = hmask.map(|m| m[i * n + j]).unwrap_or(false);
                        if !pruned && *s > mx {
                            mx = *s;
                        }
                    }
                    let mut z = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        let pruned = hmask.map(|m| m[i * n + j]).unwrap_or(false);
                        *s = if pruned { 0.0 } else { (*s - mx).exp() };
                        z += *s;
                    }
                    // a fully pruned row stays at zero weight
                    if z > 0.0 {
                        for s in row.iter_mut() {
                            *s /= z;
                        }
                    }
                }

                // (iii) score-value products, skipping pruned pairs
                let mut attn = vec![0.0; n * dk];
                for i in 0..n {
                    for j in 0..n {
                        if hmask.map(|m| m[i * n + j]).unwrap_or(false) {
                            continue;
                        }
                        let w = scores[i * n + j];
                        for p in 0..dk {
                            attn[i * dk + p] += w * v[j * dk + p];
                        }
                        count(dk as u64);
                    }
                }

                // (iv) output projection: N*d_k*d MACs per head
                let ob = &mut out[bi * n * d..(bi + 1) * n * d];
                for i in 0..n {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for p in 0..dk {
                            acc += attn[i * dk + p] * self.wo[head][p * d + j];
                        }
                        ob[i * d + j] += acc;
                    }
                }
                count((n * dk * d) as u64);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
#[path = "cost_tests.rs"]
mod tests;
