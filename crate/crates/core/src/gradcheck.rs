//! Central finite-difference checks of the tape gradients, in `f64`.
//!
//! Each check reduces an op's output to a scalar through fixed random
//! weights, so every output element contributes to the probed gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::{joint_loss, joint_loss_and_grads, Task, TrainingExample};
use crate::tensor::Tensor;
use crate::tokenizer::{Segment, TokenSequence, BOS, EOS, SEP};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub type OpFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, 1.0)).unwrap()
}

fn reduced(g: &mut Graph<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    let w = g.leaf(Tensor::new(g.shape(out).to_vec(), weights.to_vec())?);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn weights_for(inputs: &[Tensor<f64>], f: &OpFn, seed: u64) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let n = g.value(out).numel();
    Ok(uniform(&mut ChaCha8Rng::seed_from_u64(seed), n, 1.0))
}

fn scalar_value(inputs: &[Tensor<f64>], f: &OpFn, weights: &[f64]) -> Result<f64> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = reduced(&mut g, out, weights)?;
    g.value(loss).item()
}

/// Compares the tape gradient of every input element against central differences.
pub fn check_op(name: &str, inputs: Vec<Tensor<f64>>, f: &OpFn, seed: u64) -> Result<CheckResult> {
    let weights = weights_for(&inputs, f, seed)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    let loss = reduced(&mut g, out, &weights)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut probe = inputs;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..probe.len() {
        for j in 0..probe[i].numel() {
            let x = probe[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = scalar_value(&probe, f, &weights)?;
            probe[i].data_mut()[j] = x - STEP;
            let down = scalar_value(&probe, f, &weights)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        checked,
        max_rel_err: worst,
    })
}

/// Random-shaped instances of every differentiable op, `cases` per op.
pub fn op_suite(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..cases {
        let s = seed.wrapping_mul(1000).wrapping_add(c as u64);
        let m = rng.random_range(1..5);
        let k = rng.random_range(1..5);
        let n = rng.random_range(1..5);

        let (a, b) = (rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n]));
        out.push(check_op("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]), s)?);

        let (a, b) = (rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[m, n]));
        out.push(check_op("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]), s)?);
        out.push(check_op("mul", vec![a.clone(), b], &|g, v| g.mul(v[0], v[1]), s)?);
        let factor = rng.random_range(-2.0..2.0);
        out.push(check_op("scale", vec![a.clone()], &|g, v| g.scale(v[0], factor), s)?);
        out.push(check_op("transpose", vec![a.clone()], &|g, v| g.transpose(v[0]), s)?);
        out.push(check_op("reshape", vec![a.clone()], &|g, v| g.reshape(v[0], &[n, m]), s)?);
        out.push(check_op("sum", vec![a.clone()], &|g, v| g.sum(v[0]), s)?);

        let bias = rand_tensor(&mut rng, &[n]);
        out.push(check_op("add_bias", vec![a.clone(), bias], &|g, v| g.add_bias(v[0], v[1]), s)?);

        let wide = Tensor::new(vec![m, n], uniform(&mut rng, m * n, 3.0))?;
        out.push(check_op("gelu", vec![wide], &|g, v| g.gelu(v[0]), s)?);

        let d = rng.random_range(2..6);
        let x = rand_tensor(&mut rng, &[m, d]);
        let gain = rand_tensor(&mut rng, &[d]);
        let lb = rand_tensor(&mut rng, &[d]);
        out.push(check_op(
            "layer_norm",
            vec![x, gain, lb],
            &|g, v| g.layer_norm(v[0], v[1], v[2]),
            s,
        )?);

        let rows = rng.random_range(2..6);
        let ids: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..rows)).collect();
        let table = rand_tensor(&mut rng, &[rows, d]);
        out.push(check_op("embedding", vec![table], &|g, v| g.embedding(v[0], &ids), s)?);

        let axis = c % 2;
        let (p, q) = if axis == 0 {
            (rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[k, n]))
        } else {
            (rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[m, k]))
        };
        out.push(check_op("concat", vec![p, q], &|g, v| g.concat(&[v[0], v[1]], axis), s)?);

        let (batch, seq, heads) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..3));
        let dh = rng.random_range(1..4);
        let qkv = rand_tensor(&mut rng, &[batch * seq, 3 * heads * dh]);
        out.push(check_op(
            "causal_attention",
            vec![qkv],
            &|g, v| g.causal_attention(v[0], batch, seq, heads),
            s,
        )?);

        let vocab = rng.random_range(2..7);
        let logits = Tensor::new(vec![m + 1, vocab], uniform(&mut rng, (m + 1) * vocab, 2.0))?;
        let targets: Vec<usize> = (0..m + 1).map(|_| rng.random_range(0..vocab)).collect();
        let mut mask: Vec<u8> = (0..m + 1).map(|_| rng.random_range(0..2u8)).collect();
        mask[0] = 1;
        out.push(check_op(
            "softmax_cross_entropy",
            vec![logits],
            &|g, v| g.softmax_cross_entropy(v[0], &targets, &mask),
            s,
        )?);
    }
    Ok(out)
}

fn random_sequence(rng: &mut ChaCha8Rng, vocab: usize, cross: bool) -> TokenSequence {
    let word = |rng: &mut ChaCha8Rng| rng.random_range(4..vocab as u32);
    let mut seq = TokenSequence::default();
    seq.push(BOS, 0, Segment::Special);
    if cross {
        for _ in 0..rng.random_range(1..4) {
            let w = word(rng);
            seq.push(w, 0, Segment::Src);
        }
        seq.push(SEP, 0, Segment::Special);
        for _ in 0..rng.random_range(1..4) {
            let w = word(rng);
            seq.push(w, 1, Segment::Tgt);
        }
    } else {
        for _ in 0..rng.random_range(1..6) {
            let w = word(rng);
            seq.push(w, 1, Segment::Mono);
        }
    }
    seq.push(EOS, 1, Segment::Special);
    seq
}

/// A tiny two-layer model with parameters spread well beyond their init scale.
pub fn tiny_model(seed: u64) -> Result<ModelParams<f64>> {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_seq_len: 12,
        dropout_rate: 0.0,
    };
    let mut p = ModelParams::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.4..0.4);
        }
    }
    Ok(p)
}

/// Joint NTP + CL loss of a full model, probed at `per_tensor` entries of every parameter tensor.
pub fn check_model(seed: u64, per_tensor: usize) -> Result<CheckResult> {
    let mut params = tiny_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = params.config.vocab_size;
    let examples: Vec<TrainingExample> = (0..4)
        .map(|i| {
            let cross = i % 2 == 1;
            TrainingExample {
                seq: random_sequence(&mut rng, v, cross),
                task: if cross { Task::Cl } else { Task::Ntp },
                pair_id: None,
            }
        })
        .collect();
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let (_, grads) = joint_loss_and_grads(&params, &refs)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let n_tensors = grads.len();
    for ti in 0..n_tensors {
        let numel = grads[ti].len();
        for _ in 0..per_tensor.min(numel) {
            let j = rng.random_range(0..numel);
            let x = params.tensors_mut()[ti].data()[j];
            params.tensors_mut()[ti].data_mut()[j] = x + STEP;
            let up = joint_loss(&params, &refs)?.total;
            params.tensors_mut()[ti].data_mut()[j] = x - STEP;
            let down = joint_loss(&params, &refs)?.total;
            params.tensors_mut()[ti].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[ti][j], numeric));
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: "two_layer_model".into(),
        checked,
        max_rel_err: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert!((rel_err(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // square via mul(a, a) is fine; an op that ignores its input gradient is not
        let a = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.5, 0.9]).unwrap();
        let ok = check_op("square", vec![a.clone()], &|g, v| g.mul(v[0], v[0]), 3).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let detached = check_op(
            "detached",
            vec![a],
            &|g, v| {
                let c = g.value(v[0]).clone().with_requires_grad(false);
                let leaf = g.leaf(c);
                g.mul(leaf, v[0])
            },
            3,
        )
        .unwrap();
        assert!(!detached.passed());
    }
}
