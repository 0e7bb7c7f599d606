//! Finite-difference gradient checks shared by the integration tests.

use kdlab::distill::{hybrid_loss, sentence_level_loss, token_level_loss};
use kdlab::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: usize = 50;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> kdlab::Result<Var>;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values away from zero, for ops with a kink there.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar objective `sum(op(inputs) * w)` with a fixed random `w`, built in
/// a fresh graph. Dropout draws from the graph seed, so every rebuild sees
/// the same mask.
fn objective(inputs: &[Tensor<f64>], weights: &Tensor<f64>, build: &Build, grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::<f64>::training(99);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    let w = g.constant(weights.clone().reshaped(g.shape(out).to_vec()).unwrap()).unwrap();
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let value = g.value(loss).data()[0];
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let gs = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();
    (value, gs)
}

fn output_len(inputs: &[Tensor<f64>], build: &Build) -> usize {
    let mut g = Graph::<f64>::training(99);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    g.value(out).numel()
}

/// Relative error of the whole gradient: `|a - n| / max(|a|, |n|)` in the
/// Euclidean norm, with an absolute floor for vanishing gradients.
fn check(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, build: &Build) -> f64 {
    let n_out = output_len(&inputs, build);
    let weights = rand_tensor(&[n_out], rng, -1.0, 1.0);
    let (_, analytic) = objective(&inputs, &weights, build, true);
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fd = (objective(&plus, &weights, build, false).0 - objective(&minus, &weights, build, false).0) / (2.0 * H);
            let a = analytic[k][i];
            diff += (a - fd).powi(2);
            na += a * a;
            nn += fd * fd;
        }
    }
    let denom = na.sqrt().max(nn.sqrt()).max(1e-6);
    let rel = diff.sqrt() / denom;
    rel
}

/// Worst relative error per op over [`INSTANCES`] random instances.
pub type Report = Vec<(String, f64)>;

fn run(out: &mut Report, name: &str, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (inputs, build) = case(&mut rng);
        worst = worst.max(check(&mut rng, inputs, &*build));
    }
    out.push((name.to_string(), worst));
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..5)
}

/// Random shape of the given rank; `extra` is added to the last dimension.
fn shape(rng: &mut ChaCha8Rng, rank: usize, extra: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..rank).map(|_| dims(rng)).collect();
    s[rank - 1] += extra;
    s
}

pub fn matmul_gradients(out: &mut Report) {
    run(out, "matmul", 1, |rng| {
        let (m, k, n) = (dims(rng), dims(rng), dims(rng));
        let lead: Vec<usize> = if rng.gen_bool(0.5) { vec![] } else { vec![dims(rng)] };
        let sa: Vec<usize> = lead.iter().copied().chain([m, k]).collect();
        let sb: Vec<usize> = lead.iter().copied().chain([k, n]).collect();
        (
            vec![rand_tensor(&sa, rng, -1.0, 1.0), rand_tensor(&sb, rng, -1.0, 1.0)],
            Box::new(|g, v| Ok(g.matmul(v[0], v[1])?)),
        )
    });
}

pub fn elementwise_binary_gradients(out: &mut Report) {
    for (name, seed) in [("add", 2), ("sub", 3), ("mul", 4)] {
        run(out, name, seed, |rng| {
            let shape = [dims(rng), dims(rng)];
            let build: Box<Build> = match name {
                "add" => Box::new(|g, v| Ok(g.add(v[0], v[1])?)),
                "sub" => Box::new(|g, v| Ok(g.sub(v[0], v[1])?)),
                _ => Box::new(|g, v| Ok(g.mul(v[0], v[1])?)),
            };
            (vec![rand_tensor(&shape, rng, -2.0, 2.0), rand_tensor(&shape, rng, -2.0, 2.0)], build)
        });
    }
}

pub fn bias_add_gradients(out: &mut Report) {
    run(out, "add_trailing", 5, |rng| {
        let d = dims(rng);
        let shape = [dims(rng), dims(rng), d];
        (
            vec![rand_tensor(&shape, rng, -1.0, 1.0), rand_tensor(&[d], rng, -1.0, 1.0)],
            Box::new(|g, v| Ok(g.add(v[0], v[1])?)),
        )
    });
}

pub fn scalar_op_gradients(out: &mut Report) {
    run(out, "scale", 6, |rng| {
        let f = rng.gen_range(-3.0..3.0);
        (vec![rand_tensor(&shape(rng, 2, 0), rng, -1.0, 1.0)], Box::new(move |g, v| Ok(g.scale(v[0], f)?)))
    });
    run(out, "add_scalar", 7, |rng| {
        let c = rng.gen_range(-3.0..3.0);
        (vec![rand_tensor(&shape(rng, 2, 0), rng, -1.0, 1.0)], Box::new(move |g, v| Ok(g.add_scalar(v[0], c)?)))
    });
}

pub fn shape_op_gradients(out: &mut Report) {
    run(out, "transpose", 8, |rng| {
        let shape = [dims(rng), dims(rng), dims(rng)];
        let (a, b) = (rng.gen_range(0..3), rng.gen_range(0..3));
        (vec![rand_tensor(&shape, rng, -1.0, 1.0)], Box::new(move |g, v| Ok(g.transpose(v[0], a, b)?)))
    });
    run(out, "reshape", 9, |rng| {
        let (a, b) = (dims(rng), dims(rng));
        (vec![rand_tensor(&[a, b], rng, -1.0, 1.0)], Box::new(move |g, v| Ok(g.reshape(v[0], &[b, a])?)))
    });
    run(out, "concat", 10, |rng| {
        let axis = rng.gen_range(0..2);
        let base = [dims(rng), dims(rng)];
        let parts = rng.gen_range(1..4);
        let inputs = (0..parts)
            .map(|_| {
                let mut s = base;
                s[axis] = dims(rng);
                rand_tensor(&s, rng, -1.0, 1.0)
            })
            .collect();
        (inputs, Box::new(move |g, v| Ok(g.concat(v, axis)?)))
    });
}

pub fn indexing_gradients(out: &mut Report) {
    run(out, "embedding_gather", 11, |rng| {
        let (rows, d) = (dims(rng) + 1, dims(rng));
        let ids: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..rows)).collect();
        (vec![rand_tensor(&[rows, d], rng, -1.0, 1.0)], Box::new(move |g, v| Ok(g.gather(v[0], &ids)?)))
    });
    run(out, "select_last", 12, |rng| {
        let (r, d) = (dims(rng), dims(rng));
        let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..d)).collect();
        (vec![rand_tensor(&[r, d], rng, -1.0, 1.0)], Box::new(move |g, v| Ok(g.select_last(v[0], &idx)?)))
    });
    run(out, "masked_fill", 13, |rng| {
        let shape = [dims(rng), dims(rng)];
        let mask: Vec<bool> = (0..shape[0] * shape[1]).map(|_| rng.gen_bool(0.3)).collect();
        let fill = rng.gen_range(-5.0..5.0);
        (vec![rand_tensor(&shape, rng, -1.0, 1.0)], Box::new(move |g, v| Ok(g.masked_fill(v[0], &mask, fill)?)))
    });
}

pub fn normalization_gradients(out: &mut Report) {
    run(out, "softmax", 14, |rng| {
        (vec![rand_tensor(&shape(rng, 2, 1), rng, -3.0, 3.0)], Box::new(|g, v| Ok(g.softmax(v[0])?)))
    });
    run(out, "log_softmax", 15, |rng| {
        (vec![rand_tensor(&shape(rng, 2, 1), rng, -3.0, 3.0)], Box::new(|g, v| Ok(g.log_softmax(v[0])?)))
    });
    run(out, "layer_norm", 16, |rng| {
        let d = dims(rng) + 1;
        (
            vec![
                rand_tensor(&[shape(rng, 1, 0)[0], d], rng, -2.0, 2.0),
                rand_tensor(&[d], rng, 0.5, 1.5),
                rand_tensor(&[d], rng, -0.5, 0.5),
            ],
            Box::new(|g, v| Ok(g.layer_norm(v[0], v[1], v[2])?)),
        )
    });
}

pub fn activation_gradients(out: &mut Report) {
    run(out, "relu", 17, |rng| (vec![off_zero(&shape(rng, 2, 0), rng)], Box::new(|g, v| Ok(g.relu(v[0])?))));
    run(out, "gelu", 18, |rng| {
        (vec![rand_tensor(&shape(rng, 2, 0), rng, -3.0, 3.0)], Box::new(|g, v| Ok(g.gelu(v[0])?)))
    });
    run(out, "sigmoid", 19, |rng| {
        (vec![rand_tensor(&shape(rng, 2, 0), rng, -4.0, 4.0)], Box::new(|g, v| Ok(g.sigmoid(v[0])?)))
    });
    run(out, "exp", 20, |rng| {
        (vec![rand_tensor(&shape(rng, 2, 0), rng, -2.0, 2.0)], Box::new(|g, v| Ok(g.exp(v[0])?)))
    });
    run(out, "log", 21, |rng| {
        (vec![rand_tensor(&shape(rng, 2, 0), rng, 0.2, 3.0)], Box::new(|g, v| Ok(g.log(v[0])?)))
    });
    run(out, "dropout", 22, |rng| {
        let p = rng.gen_range(0.1..0.6);
        (vec![rand_tensor(&shape(rng, 2, 0), rng, -1.0, 1.0)], Box::new(move |g, v| Ok(g.dropout(v[0], p)?)))
    });
}

pub fn reduction_gradients(out: &mut Report) {
    run(out, "sum", 23, |rng| (vec![rand_tensor(&shape(rng, 2, 0), rng, -1.0, 1.0)], Box::new(|g, v| Ok(g.sum(v[0])?))));
    run(out, "sum_last", 24, |rng| {
        (vec![rand_tensor(&shape(rng, 3, 0), rng, -1.0, 1.0)], Box::new(|g, v| Ok(g.sum_last(v[0])?)))
    });
    run(out, "mean", 25, |rng| (vec![rand_tensor(&shape(rng, 2, 0), rng, -1.0, 1.0)], Box::new(|g, v| Ok(g.mean(v[0])?))));
}

fn random_dists(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let v = shape[2];
    let mut t = rand_tensor(shape, rng, 0.01, 1.0);
    for row in t.data_mut().chunks_mut(v) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

fn pad_mask(rng: &mut ChaCha8Rng, b: usize, m: usize) -> Vec<bool> {
    (0..b)
        .flat_map(|_| {
            let len = rng.gen_range(1..=m);
            (0..m).map(move |j| j >= len)
        })
        .collect()
}

pub fn distillation_loss_gradients(out: &mut Report) {
    run(out, "token_level_loss", 26, |rng| {
        let (b, m, v) = (dims(rng), dims(rng), dims(rng) + 1);
        let dists = random_dists(rng, &[b, m, v]);
        let pad = pad_mask(rng, b, m);
        (
            vec![rand_tensor(&[b, m, v], rng, -2.0, 2.0)],
            Box::new(move |g, x| {
                let lp = g.log_softmax(x[0])?;
                token_level_loss(g, lp, &dists, &pad)
            }),
        )
    });
    run(out, "sentence_level_loss", 27, |rng| {
        let (b, m, v) = (dims(rng), dims(rng), dims(rng) + 4);
        let pad = pad_mask(rng, b, m);
        let labels: Vec<usize> = pad.iter().map(|&p| if p { 0 } else { rng.gen_range(4..v) }).collect();
        (
            vec![rand_tensor(&[b, m, v], rng, -2.0, 2.0)],
            Box::new(move |g, x| {
                let lp = g.log_softmax(x[0])?;
                sentence_level_loss(g, lp, &labels, &pad)
            }),
        )
    });
    run(out, "hybrid_loss", 28, |rng| {
        let b = dims(rng);
        (
            vec![
                rand_tensor(&[b], rng, -3.0, 3.0),
                rand_tensor(&[b], rng, 0.0, 3.0),
                rand_tensor(&[b], rng, 0.0, 3.0),
            ],
            Box::new(|g, x| {
                let gate = g.sigmoid(x[0])?;
                hybrid_loss(g, gate, x[1], x[2])
            }),
        )
    });
}

/// Every differentiable op and loss.
pub fn all_ops() -> Report {
    let mut out = Report::new();
    matmul_gradients(&mut out);
    elementwise_binary_gradients(&mut out);
    bias_add_gradients(&mut out);
    scalar_op_gradients(&mut out);
    shape_op_gradients(&mut out);
    indexing_gradients(&mut out);
    normalization_gradients(&mut out);
    activation_gradients(&mut out);
    reduction_gradients(&mut out);
    distillation_loss_gradients(&mut out);
    out
}
