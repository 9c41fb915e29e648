//! Forward ops with recorded backward rules.

use std::rc::Rc;

use super::{BackFn, Tape, Tensor};
use crate::error::{Error, Result};

/// Splits `[.., n, m]` into (batch, n, m); rank-2 tensors have batch 1.
fn matrix_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "expected rank >= 2 for matrix op, got {:?}",
            shape
        )));
    }
    let n = shape[shape.len() - 2];
    let m = shape[shape.len() - 1];
    let batch = shape[..shape.len() - 2].iter().product();
    Ok((batch, n, m))
}

/// `out[n,m] += a[n,k] * b[k,m]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,m] += a[n,k] * b[m,k]^T`
fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * m + j] += acc;
        }
    }
}

/// `out[k,m] += a[n,k]^T * b[n,m]`
fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// How the two operands of a batched matrix product line up.
struct BatchPlan {
    batch: usize,
    /// rhs is rank-2 and shared across the batch.
    rhs_shared: bool,
}

fn batch_plan(a: &Tensor, b: &Tensor, op: &str) -> Result<BatchPlan> {
    let (ba, _, _) = matrix_dims(a.shape())?;
    let (bb, _, _) = matrix_dims(b.shape())?;
    if a.shape().len() == b.shape().len() {
        if a.shape()[..a.shape().len() - 2] != b.shape()[..b.shape().len() - 2] {
            return Err(Error::Shape(format!(
                "{op}: batch dims differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(BatchPlan {
            batch: ba,
            rhs_shared: false,
        })
    } else if b.shape().len() == 2 {
        Ok(BatchPlan {
            batch: ba,
            rhs_shared: true,
        })
    } else {
        Err(Error::Shape(format!(
            "{op}: unsupported ranks {:?} x {:?}",
            a.shape(),
            b.shape()
        )))
    }
    .map(|p| {
        debug_assert!(p.rhs_shared || ba == bb);
        p
    })
}

impl Tape {
    /// Matrix product `a[..,n,k] x b[..,k,m] -> [..,n,m]`. Leading batch
    /// dims must match, or `b` may be rank-2 and shared across the batch.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let plan = batch_plan(a, b, "matmul")?;
        let (_, n, k) = matrix_dims(a.shape())?;
        let (_, kb, m) = matrix_dims(b.shape())?;
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dims differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let batch = plan.batch;
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            let aoff = bi * n * k;
            let boff = if plan.rhs_shared { 0 } else { bi * k * m };
            matmul_acc(
                &a.data()[aoff..aoff + n * k],
                &b.data()[boff..boff + k * m],
                &mut out[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let mut out_shape = a.shape()[..a.shape().len() - 2].to_vec();
        out_shape.push(n);
        out_shape.push(m);

        let (ad, bd) = (a.shared_data(), b.shared_data());
        let (na, nb) = (a.node_id(), b.node_id());
        let rhs_shared = plan.rhs_shared;
        Ok(self.record(&[a, b], out, out_shape, move |_| {
            Box::new(move |up: &[f64]| {
                // dA = dC * B^T ; dB = A^T * dC (summed over batch if shared)
                let ga = na.is_some().then(|| {
                    let mut g = vec![0.0; batch * n * k];
                    for bi in 0..batch {
                        let boff = if rhs_shared { 0 } else { bi * k * m };
                        matmul_nt_acc(
                            &up[bi * n * m..(bi + 1) * n * m],
                            &bd[boff..boff + k * m],
                            &mut g[bi * n * k..(bi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    g
                });
                let gb = nb.is_some().then(|| {
                    let glen = if rhs_shared { k * m } else { batch * k * m };
                    let mut g = vec![0.0; glen];
                    for bi in 0..batch {
                        let goff = if rhs_shared { 0 } else { bi * k * m };
                        matmul_tn_acc(
                            &ad[bi * n * k..(bi + 1) * n * k],
                            &up[bi * n * m..(bi + 1) * n * m],
                            &mut g[goff..goff + k * m],
                            n,
                            k,
                            m,
                        );
                    }
                    g
                });
                vec![ga, gb]
            }) as BackFn
        }))
    }

    /// `a[..,n,k] x b[..,m,k]^T -> [..,n,m]` without materializing the
    /// transpose; this is the query-key product shape.
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let plan = batch_plan(a, b, "matmul_nt")?;
        let (_, n, k) = matrix_dims(a.shape())?;
        let (_, m, kb) = matrix_dims(b.shape())?;
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul_nt: inner dims differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let batch = plan.batch;
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            let boff = if plan.rhs_shared { 0 } else { bi * m * k };
            matmul_nt_acc(
                &a.data()[bi * n * k..(bi + 1) * n * k],
                &b.data()[boff..boff + m * k],
                &mut out[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let mut out_shape = a.shape()[..a.shape().len() - 2].to_vec();
        out_shape.push(n);
        out_shape.push(m);

        let (ad, bd) = (a.shared_data(), b.shared_data());
        let (na, nb) = (a.node_id(), b.node_id());
        let rhs_shared = plan.rhs_shared;
        Ok(self.record(&[a, b], out, out_shape, move |_| {
            Box::new(move |up: &[f64]| {
                // C = A B^T: dA = dC * B ; dB = dC^T * A
                let ga = na.is_some().then(|| {
                    let mut g = vec![0.0; batch * n * k];
                    for bi in 0..batch {
                        let boff = if rhs_shared { 0 } else { bi * m * k };
                        matmul_acc(
                            &up[bi * n * m..(bi + 1) * n * m],
                            &bd[boff..boff + m * k],
                            &mut g[bi * n * k..(bi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    g
                });
                let gb = nb.is_some().then(|| {
                    let glen = if rhs_shared { m * k } else { batch * m * k };
                    let mut g = vec![0.0; glen];
                    for bi in 0..batch {
                        let goff = if rhs_shared { 0 } else { bi * m * k };
                        matmul_tn_acc(
                            &up[bi * n * m..(bi + 1) * n * m],
                            &ad[bi * n * k..(bi + 1) * n * k],
                            &mut g[goff..goff + m * k],
                            n,
                            m,
                            k,
                        );
                    }
                    g
                });
                vec![ga, gb]
            }) as BackFn
        }))
    }

    fn zip_elementwise(
        &self,
        a: &Tensor,
        b: &Tensor,
        op: &str,
        fwd: impl Fn(f64, f64) -> f64,
        back: impl Fn(&[f64], &Rc<Vec<f64>>, &Rc<Vec<f64>>) -> (Option<Vec<f64>>, Option<Vec<f64>>)
            + 'static,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "{op}: shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| fwd(x, y))
            .collect();
        let (ad, bd) = (a.shared_data(), b.shared_data());
        let (na, nb) = (a.node_id(), b.node_id());
        Ok(self.record(&[a, b], out, a.shape().to_vec(), move |_| {
            Box::new(move |up: &[f64]| {
                let (ga, gb) = back(up, &ad, &bd);
                vec![
                    if na.is_some() { ga } else { None },
                    if nb.is_some() { gb } else { None },
                ]
            }) as BackFn
        }))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, |up, _, _| {
            (Some(up.to_vec()), Some(up.to_vec()))
        })
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, |up, _, _| {
            (
                Some(up.to_vec()),
                Some(up.iter().map(|&g| -g).collect()),
            )
        })
    }

    /// Hadamard product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, |up, ad, bd| {
            (
                Some(up.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect()),
                Some(up.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect()),
            )
        })
    }

    fn map_unary(
        &self,
        a: &Tensor,
        fwd: impl Fn(f64) -> f64,
        back: impl Fn(&[f64], &Rc<Vec<f64>>) -> Vec<f64> + 'static,
    ) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|&x| fwd(x)).collect();
        let ad = a.shared_data();
        self.record(&[a], out, a.shape().to_vec(), move |_| {
            Box::new(move |up: &[f64]| vec![Some(back(up, &ad))]) as BackFn
        })
    }

    /// Multiply by a scalar constant.
    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        self.map_unary(a, |x| x * c, move |up, _| {
            up.iter().map(|&g| g * c).collect()
        })
    }

    /// Add a scalar constant.
    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        self.map_unary(a, |x| x + c, |up, _| up.to_vec())
    }

    /// Elementwise `max(x, c)`. The subgradient at `x == c` is taken as 0,
    /// so `relu` is `max_scalar(x, 0)`.
    pub fn max_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        self.map_unary(a, |x| x.max(c), move |up, ad| {
            up.iter()
                .zip(ad.iter())
                .map(|(&g, &x)| if x > c { g } else { 0.0 })
                .collect()
        })
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        self.max_scalar(a, 0.0)
    }

    pub fn exp(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|&x| x.exp()).collect();
        self.record(&[a], out, a.shape().to_vec(), |out_rc| {
            let cap = Rc::clone(out_rc);
            Box::new(move |up: &[f64]| {
                vec![Some(
                    up.iter().zip(cap.iter()).map(|(&g, &y)| g * y).collect(),
                )]
            }) as BackFn
        })
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = a.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.map_unary(a, |x| x.ln(), |up, ad| {
            up.iter().zip(ad.iter()).map(|(&g, &x)| g / x).collect()
        }))
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = a.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        let out: Vec<f64> = a.data().iter().map(|&x| x.sqrt()).collect();
        Ok(self.record(&[a], out, a.shape().to_vec(), |out_rc| {
            let cap = Rc::clone(out_rc);
            Box::new(move |up: &[f64]| {
                vec![Some(
                    up.iter()
                        .zip(cap.iter())
                        .map(|(&g, &y)| g / (2.0 * y))
                        .collect(),
                )]
            }) as BackFn
        }))
    }

    /// Broadcast add of a `[d]` vector over the rows of `[.., d]`.
    pub fn add_row(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let d = *a.shape().last().ok_or_else(|| {
            Error::Shape("add_row: lhs must have rank >= 1".into())
        })?;
        if v.shape() != [d] {
            return Err(Error::Shape(format!(
                "add_row: vector shape {:?} does not match last dim {d}",
                v.shape()
            )));
        }
        let rows = a.numel() / d;
        let mut out = a.data().to_vec();
        for r in 0..rows {
            for (o, &b) in out[r * d..(r + 1) * d].iter_mut().zip(v.data()) {
                *o += b;
            }
        }
        let nv = v.node_id();
        Ok(self.record(&[a, v], out, a.shape().to_vec(), move |_| {
            Box::new(move |up: &[f64]| {
                let gv = nv.is_some().then(|| {
                    let mut g = vec![0.0; d];
                    for r in 0..rows {
                        for (gj, &u) in g.iter_mut().zip(&up[r * d..(r + 1) * d]) {
                            *gj += u;
                        }
                    }
                    g
                });
                vec![Some(up.to_vec()), gv]
            }) as BackFn
        }))
    }

    fn reduce_shape(shape: &[usize], axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "reduce: axis {axis} out of range for shape {:?}",
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((out_shape, outer, len, inner))
    }

    pub fn reduce_sum(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let (out_shape, outer, len, inner) = Self::reduce_shape(a.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += a.data()[base + i];
                }
            }
        }
        Ok(self.record(&[a], out, out_shape, move |_| {
            Box::new(move |up: &[f64]| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            g[base + i] = up[o * inner + i];
                        }
                    }
                }
                vec![Some(g)]
            }) as BackFn
        }))
    }

    pub fn reduce_mean(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let len = *a
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Shape(format!("reduce: axis {axis} out of range")))?;
        let s = self.reduce_sum(a, axis)?;
        Ok(self.scale(&s, 1.0 / len as f64))
    }

    /// Max along an axis. Not differentiable: the result is detached from
    /// the tape even when the input is tracked.
    pub fn reduce_max(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let (out_shape, outer, len, inner) = Self::reduce_shape(a.shape(), axis)?;
        if len == 0 {
            return Err(Error::Shape("reduce_max over empty axis".into()));
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let v = a.data()[base + i];
                    let slot = &mut out[o * inner + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        Ok(Tensor::constant(out, out_shape))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let total: f64 = a.data().iter().sum();
        let n = a.numel();
        self.record(&[a], vec![total], vec![], move |_| {
            Box::new(move |up: &[f64]| vec![Some(vec![up[0]; n])]) as BackFn
        })
    }

    /// Gathers `table[id]` rows; gradients scatter-add back into the table.
    pub fn embedding(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if table.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be rank 2, got {:?}",
                table.shape()
            )));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Domain(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let ids_cap: Vec<usize> = ids.to_vec();
        Ok(self.record(&[table], out, vec![ids.len(), d], move |_| {
            Box::new(move |up: &[f64]| {
                let mut g = vec![0.0; v * d];
                for (p, &id) in ids_cap.iter().enumerate() {
                    for (slot, &u) in g[id * d..(id + 1) * d].iter_mut().zip(&up[p * d..(p + 1) * d])
                    {
                        *slot += u;
                    }
                }
                vec![Some(g)]
            }) as BackFn
        }))
    }

    /// Mean negative log-softmax of the target entries over non-ignored
    /// positions. Errors when every position is ignored.
    pub fn cross_entropy(
        &self,
        logits: &Tensor,
        targets: &[usize],
        ignore_id: Option<usize>,
    ) -> Result<Tensor> {
        if logits.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy expects [n, V] logits, got {:?}",
                logits.shape()
            )));
        }
        let (n, v) = (logits.shape()[0], logits.shape()[1]);
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        let valid: Vec<bool> = targets.iter().map(|&t| Some(t) != ignore_id).collect();
        let n_valid = valid.iter().filter(|&&b| b).count();
        if n_valid == 0 {
            return Err(Error::Data(
                "cross_entropy: degenerate batch, every position ignored".into(),
            ));
        }
        if let Some(&bad) = targets
            .iter()
            .zip(&valid)
            .filter(|(_, &ok)| ok)
            .map(|(t, _)| t)
            .find(|&&t| t >= v)
        {
            return Err(Error::Domain(format!(
                "cross_entropy: target {bad} out of range for vocab {v}"
            )));
        }

        // Row-wise stable log-softmax; cache softmax rows for backward.
        let mut soft = vec![0.0; n * v];
        let mut total = 0.0;
        for (i, row) in logits.data().chunks_exact(v).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (s, &x) in soft[i * v..(i + 1) * v].iter_mut().zip(row) {
                *s = (x - mx).exp();
                z += *s;
            }
            for s in &mut soft[i * v..(i + 1) * v] {
                *s /= z;
            }
            if valid[i] {
                total += z.ln() + mx - row[targets[i]];
            }
        }
        let loss = total / n_valid as f64;
        let soft = Rc::new(soft);
        let targets_cap: Vec<usize> = targets.to_vec();
        Ok(self.record(&[logits], vec![loss], vec![], move |_| {
            Box::new(move |up: &[f64]| {
                let scale = up[0] / n_valid as f64;
                let mut g = vec![0.0; n * v];
                for i in 0..n {
                    if !valid[i] {
                        continue;
                    }
                    let row = &soft[i * v..(i + 1) * v];
                    let grow = &mut g[i * v..(i + 1) * v];
                    for (slot, &p) in grow.iter_mut().zip(row) {
                        *slot = p * scale;
                    }
                    grow[targets_cap[i]] -= scale;
                }
                vec![Some(g)]
            }) as BackFn
        }))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias must be [{d}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = x.numel() / d;
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gamma.data()[j] * xh + beta.data()[j];
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let gd = gamma.shared_data();
        let (nx, ng, nb) = (x.node_id(), gamma.node_id(), beta.node_id());
        Ok(self.record(&[x, gamma, beta], out, x.shape().to_vec(), move |_| {
            Box::new(move |up: &[f64]| {
                let gx = nx.is_some().then(|| {
                    let mut g = vec![0.0; rows * d];
                    for r in 0..rows {
                        let u = &up[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        // dL/dx = inv_std * (gy - mean(gy) - xhat * mean(gy .* xhat))
                        let mut mean_gy = 0.0;
                        let mut mean_gy_xh = 0.0;
                        for j in 0..d {
                            let gy = u[j] * gd[j];
                            mean_gy += gy;
                            mean_gy_xh += gy * xh[j];
                        }
                        mean_gy /= d as f64;
                        mean_gy_xh /= d as f64;
                        for j in 0..d {
                            let gy = u[j] * gd[j];
                            g[r * d + j] = inv_std[r] * (gy - mean_gy - xh[j] * mean_gy_xh);
                        }
                    }
                    g
                });
                let gg = ng.is_some().then(|| {
                    let mut g = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += up[r * d + j] * xhat[r * d + j];
                        }
                    }
                    g
                });
                let gb = nb.is_some().then(|| {
                    let mut g = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += up[r * d + j];
                        }
                    }
                    g
                });
                vec![gx, gg, gb]
            }) as BackFn
        }))
    }
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `eps`. The denominator is floored at 1e-12.
pub fn finite_diff_check<F>(f: F, x: &[f64], shape: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaf = tape.leaf_from(x.to_vec(), shape.to_vec())?;
    let loss = f(&tape, &leaf)?;
    if loss.numel() != 1 {
        return Err(Error::Shape("finite_diff_check: f must return a scalar".into()));
    }
    if !loss.item().is_finite() {
        return Err(Error::Numerical(format!(
            "finite_diff_check: non-finite value {}",
            loss.item()
        )));
    }
    let grads = tape.backward(&loss)?;
    let analytic = grads.get_or_zeros(&leaf);

    let eval = |pt: &[f64]| -> Result<f64> {
        let t = Tape::new();
        let c = Tensor::constant(pt.to_vec(), shape.to_vec());
        let v = f(&t, &c)?.item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "finite_diff_check: non-finite value {v} at perturbed point"
            )));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        pt[i] = x[i] + eps;
        let hi = eval(&pt)?;
        pt[i] = x[i] - eps;
        let lo = eval(&pt)?;
        pt[i] = x[i];
        let central = (hi - lo) / (2.0 * eps);
        let err = (analytic[i] - central).abs() / central.abs().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
