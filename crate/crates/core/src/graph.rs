//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are earlier nodes, so the node list is
//! already in topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kind plus whatever the backward rule needs from the forward pass.
#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu {
        input: Var,
        tanh: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    CausalAttention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<T>,
        probs: Vec<T>,
        denom: T,
    },
}

/// `tanh` through one `exp`; much cheaper than libm's `tanhf`.
fn tanh_exp<T: Scalar>(z: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((z * two).exp() + T::one())
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation. Build one per forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that never keeps backward state; `backward` on it is a contract error.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// `backward` populates its gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.record && t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a node's tensor out, leaving an empty placeholder.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0]))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim(format!("matmul [{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::dense(self.data(a), m, k),
            MatRef::dense(self.data(b), k, n),
            MatMut::dense(&mut out, m, n),
            false,
        );
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), g))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Add(a, b), g))
    }

    /// `x[.., d] + bias[d]`, broadcasting over every leading row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::dim("add_bias on scalar"))?;
        if self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} for rows of width {d}",
                self.shape(bias)
            )));
        }
        let bd = self.data(bias);
        let out: Vec<T> = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bd).map(|(&v, &b)| v + b))
            .collect();
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::AddBias(x, bias),
            g,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.data(a).iter().map(|&x| x * factor).collect();
        let g = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(self.shape(a).to_vec(), out)?,
            Op::Scale(a, factor),
            g,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let tanh: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| tanh_exp(c * (x + k * x * x * x)))
            .collect();
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(&tanh)
            .map(|(&x, &th)| half * x * (T::one() + th))
            .collect();
        let g = self.any_grad(&[a]);
        let op = Op::Gelu {
            input: a,
            tanh: if g { tanh } else { Vec::new() },
        };
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, op, g))
    }

    /// Normalizes each row of `x` over its last dim, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::dim("layer_norm on scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} for width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dt = T::from_usize(d).unwrap();
        let xs = self.data(x);
        let rows = xs.len() / d.max(1);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        let (gd, bd) = (self.data(gain), self.data(bias));
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let g = self.any_grad(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Gathers rows of `table` ([V, d]) for each id, giving [ids.len(), d].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("embedding id {id} >= table rows {v}")));
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let g = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(a), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(a).to_vec())
            .map_err(|_| Error::dim(format!("reshape {:?} -> {shape:?}", self.shape(a))))?;
        let g = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), g))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let g = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            g,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<T>();
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), g))
    }

    /// Multi-head causal self-attention over a packed `[batch*seq, 3*d]`
    /// query/key/value matrix. Returns `[batch*seq, d]`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (n, w) = self.dims2(qkv)?;
        if n != batch * seq || w % 3 != 0 || heads == 0 || (w / 3) % heads != 0 {
            return Err(Error::dim(format!(
                "causal_attention: qkv [{n}x{w}] for batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let src = self.data(qkv);
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); n * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let q = head_view(src, b, h, seq, dh, w, 0);
                let k = head_view(src, b, h, seq, dh, w, d);
                let v = head_view(src, b, h, seq, dh, w, 2 * d);
                gemm(q, k.t(), MatMut::dense(p, seq, seq), false);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut mx = T::neg_infinity();
                    for r in row.iter_mut().take(i + 1) {
                        *r = *r * scale;
                        mx = mx.max(*r);
                    }
                    let mut z = T::zero();
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - mx).exp();
                        z = z + *r;
                    }
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = if j <= i { *r / z } else { T::zero() };
                    }
                }
                gemm(
                    MatRef::dense(p, seq, seq),
                    v,
                    MatMut {
                        data: &mut out,
                        offset: b * seq * d + h * dh,
                        rows: seq,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    },
                    false,
                );
            }
        }
        let g = self.any_grad(&[qkv]);
        let probs = if g { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::new([n, d], out)?,
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            g,
        ))
    }

    /// Masked mean token NLL:
    /// `Σ_t mask_t · −log softmax(logits_t)[target_t] / max(1, Σ_t mask_t)`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[u8],
    ) -> Result<Var> {
        let (t_len, vocab) = self.dims2(logits)?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::dim(format!(
                "cross entropy: {t_len} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(m) = mask.iter().find(|&&m| m > 1) {
            return Err(Error::Contract(format!("mask value {m} not in {{0,1}}")));
        }
        for (t, &y) in targets.iter().enumerate() {
            if mask[t] == 1 && y >= vocab {
                return Err(Error::Index(format!(
                    "target {y} at position {t} >= vocab {vocab}"
                )));
            }
        }
        let supervised = mask.iter().filter(|&&m| m == 1).count();
        if supervised == 0 {
            return Err(Error::DegenerateMask);
        }
        let denom = T::from_usize(supervised.max(1)).unwrap();
        let g = self.any_grad(&[logits]);
        let xs = self.data(logits);
        let mut probs = if g { vec![T::zero(); xs.len()] } else { Vec::new() };
        let mut total = T::zero();
        for t in 0..t_len {
            if mask[t] == 0 {
                continue;
            }
            let row = &xs[t * vocab..(t + 1) * vocab];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = if g {
                let out = &mut probs[t * vocab..(t + 1) * vocab];
                let mut z = T::zero();
                for (p, &v) in out.iter_mut().zip(row) {
                    *p = (v - mx).exp();
                    z = z + *p;
                }
                let inv = T::one() / z;
                out.iter_mut().for_each(|p| *p = *p * inv);
                z
            } else {
                row.iter().map(|&v| (v - mx).exp()).sum::<T>()
            };
            let log_z = z.ln() + mx;
            total = total + (log_z - row[targets[t]]);
        }
        let loss = total / denom;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("cross-entropy loss = {loss}")));
        }
        let mask_t = mask.iter().map(|&m| T::from_u8(m).unwrap()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask_t,
                probs,
                denom,
            },
            g,
        ))
    }

    /// Populates gradients of every `requires_grad` leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                self.nodes[id].value.accumulate_grad(&gout);
                continue;
            }
            let contributions = self.local_backward(id, &gout);
            for (input, g) in contributions {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each of its inputs.
    fn local_backward(&self, id: usize, gout: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a).unwrap();
                let n = self.shape(*b)[1];
                let mut res = Vec::new();
                if wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        MatRef::dense(gout, m, n),
                        MatRef::dense(self.data(*b), k, n).t(),
                        MatMut::dense(&mut da, m, k),
                        false,
                    );
                    res.push((*a, da));
                }
                if wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        MatRef::dense(self.data(*a), m, k).t(),
                        MatRef::dense(gout, m, n),
                        MatMut::dense(&mut db, k, n),
                        false,
                    );
                    res.push((*b, db));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::AddBias(x, bias) => {
                let d = self.shape(*bias)[0];
                let mut db = vec![T::zero(); d];
                for row in gout.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                }
                vec![(*x, gout.to_vec()), (*bias, db)]
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                vec![
                    (*a, gout.iter().zip(bd).map(|(&g, &y)| g * y).collect()),
                    (*b, gout.iter().zip(ad).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, gout.iter().map(|&g| g * *f).collect())],
            Op::Gelu { input: a, tanh } => {
                let c = T::from_f64_lossy(GELU_C);
                let k = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let da = self
                    .data(*a)
                    .iter()
                    .zip(gout)
                    .zip(tanh)
                    .map(|((&x, &g), &th)| {
                        let dinner = c * (T::one() + three * k * x * x);
                        g * (half * (T::one() + th) + half * x * (T::one() - th * th) * dinner)
                    })
                    .collect();
                vec![(*a, da)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let dt = T::from_usize(d).unwrap();
                let gd = self.data(*gain);
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let go = &gout[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = go[j] * gd[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                        dg[j] = dg[j] + go[j] * xh[j];
                        db[j] = db[j] + go[j];
                    }
                    mean_dxh = mean_dxh / dt;
                    mean_dxh_xh = mean_dxh_xh / dt;
                    for j in 0..d {
                        let dxh = go[j] * gd[j];
                        dx[r * d + j] = rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.dims2(*table).unwrap();
                let mut dt = vec![T::zero(); v * d];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&gout[r * d..(r + 1) * d])
                        .for_each(|(a, &g)| *a = *a + g);
                }
                vec![(*table, dt)]
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a).unwrap();
                let mut da = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gout[j * r + i];
                    }
                }
                vec![(*a, da)]
            }
            Op::Reshape(a) => vec![(*a, gout.to_vec())],
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut res = Vec::with_capacity(inputs.len());
                let mut start = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    let mut g = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        g.extend_from_slice(&gout[o * row + start..o * row + start + chunk]);
                    }
                    start += chunk;
                    res.push((*v, g));
                }
                res
            }
            Op::Sum(a) => vec![(*a, vec![gout[0]; self.nodes[a.0].value.numel()])],
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let (n, w) = self.dims2(*qkv).unwrap();
                let d = w / 3;
                let dh = d / heads;
                let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
                let src = self.data(*qkv);
                let mut dqkv = vec![T::zero(); n * w];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs
                            [(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let q = head_view(src, b, h, seq, dh, w, 0);
                        let k = head_view(src, b, h, seq, dh, w, d);
                        let v = head_view(src, b, h, seq, dh, w, 2 * d);
                        let dout = MatRef {
                            data: gout,
                            offset: b * seq * d + h * dh,
                            rows: seq,
                            cols: dh,
                            rs: d,
                            cs: 1,
                        };
                        // dV = Pᵀ·dOut
                        gemm(
                            MatRef::dense(p, seq, seq).t(),
                            dout,
                            head_view_mut(&mut dqkv, b, h, seq, dh, w, 2 * d),
                            false,
                        );
                        // dP = dOut·Vᵀ
                        gemm(dout, v.t(), MatMut::dense(&mut dp, seq, seq), false);
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        // dQ = dS·K, dK = dSᵀ·Q
                        gemm(
                            MatRef::dense(&dp, seq, seq),
                            k,
                            head_view_mut(&mut dqkv, b, h, seq, dh, w, 0),
                            false,
                        );
                        gemm(
                            MatRef::dense(&dp, seq, seq).t(),
                            q,
                            head_view_mut(&mut dqkv, b, h, seq, dh, w, d),
                            false,
                        );
                    }
                }
                vec![(*qkv, dqkv)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                denom,
            } => {
                let vocab = self.shape(*logits)[1];
                let scale = gout[0] / *denom;
                let mut dl = vec![T::zero(); probs.len()];
                for (t, &m) in mask.iter().enumerate() {
                    if m == T::zero() {
                        continue;
                    }
                    let row = &mut dl[t * vocab..(t + 1) * vocab];
                    for (d, &p) in row.iter_mut().zip(&probs[t * vocab..(t + 1) * vocab]) {
                        *d = p * scale * m;
                    }
                    row[targets[t]] = row[targets[t]] - scale * m;
                }
                vec![(*logits, dl)]
            }
        }
    }
}

fn head_view<T>(
    src: &[T],
    b: usize,
    h: usize,
    seq: usize,
    dh: usize,
    w: usize,
    col0: usize,
) -> MatRef<'_, T> {
    MatRef {
        data: src,
        offset: b * seq * w + col0 + h * dh,
        rows: seq,
        cols: dh,
        rs: w,
        cs: 1,
    }
}

fn head_view_mut<T>(
    dst: &mut [T],
    b: usize,
    h: usize,
    seq: usize,
    dh: usize,
    w: usize,
    col0: usize,
) -> MatMut<'_, T> {
    MatMut {
        data: dst,
        offset: b * seq * w + col0 + h * dh,
        rows: seq,
        cols: dh,
        rs: w,
        cs: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let i = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let x = g.leaf(t(&[1, 2], &[1.0, 2.0]));
        let y = g.leaf(t(&[2, 1], &[3.0, 4.0]));
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 1]);
        assert_eq!(g.value(z).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros([2, 3]));
        let b = g.leaf(Tensor::zeros([2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::zeros([3, 4]));
        let loss = g.softmax_cross_entropy(l, &[0, 1, 3], &[1, 1, 1]).unwrap();
        assert!((g.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_hand_value() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(t(&[1, 2], &[1.0, 0.0]));
        let loss = g.softmax_cross_entropy(l, &[0], &[1]).unwrap();
        let want = (1.0 + (-1f64).exp()).ln();
        assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
        assert!((want - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn masked_target_is_ignored() {
        let logits = t(&[3, 5], &(0..15).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>());
        let eval = |targets: &[usize]| {
            let mut g = Graph::<f64>::new();
            let l = g.leaf(logits.clone());
            let loss = g.softmax_cross_entropy(l, targets, &[1, 0, 1]).unwrap();
            g.value(loss).item().unwrap()
        };
        assert_eq!(eval(&[1, 2, 3]), eval(&[1, 4, 3]));
        // masked positions may even carry out-of-range labels
        assert_eq!(eval(&[1, 2, 3]), eval(&[1, 99, 3]));
    }

    #[test]
    fn cross_entropy_errors() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::zeros([2, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(l, &[0, 3], &[1, 1]),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            g.softmax_cross_entropy(l, &[0, 1], &[0, 0]),
            Err(Error::DegenerateMask)
        ));
        let bad = g.leaf(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(
            g.softmax_cross_entropy(bad, &[0], &[1]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([2, 4], 3.5));
        let gain = g.leaf(Tensor::full([4], 1.0));
        let bias = g.leaf(Tensor::zeros([4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1]));
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn backward_of_sum_and_reuse() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
        let s1 = g.sum(x).unwrap();
        let s2 = g.sum(x).unwrap();
        let s = g.add(s1, s2).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([3]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_and_reshape_layouts() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 1], &[1.0, 2.0]));
        let b = g.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = g.reshape(c, &[3, 2]).unwrap();
        assert_eq!(g.value(r).shape(), &[3, 2]);
        assert!(g.reshape(c, &[4, 2]).is_err());
        let tr = g.transpose(b).unwrap();
        assert_eq!(g.value(tr).data(), &[3.0, 5.0, 4.0, 6.0]);
    }

    #[test]
    fn inference_graph_rejects_backward() {
        let mut g = Graph::<f64>::inference();
        let x = g.leaf(Tensor::zeros([1]).with_requires_grad(true));
        let s = g.sum(x).unwrap();
        assert!(g.backward(s).is_err());
    }
}
