//! Test-only oracles: finite differences and brute-force reference loops.
//! Nothing here calls into the routing or convolution kernels it checks.
#![allow(dead_code)]

use capsnet::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Inf-norm relative error between two gradient buffers, floored so that
/// all-zero gradients compare by absolute error.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Compare tape gradients of `sum(f(inputs) * R)` (fixed random `R`) with
/// central differences at step `h`. Returns the worst relative error over
/// all inputs.
pub fn fd_check<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    fd_errors(inputs, h, seed, f).into_iter().fold(0.0, f64::max)
}

/// Per-input relative errors of [`fd_check`].
pub fn fd_errors<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> Vec<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let probe = |vals: &[Tensor<f64>]| -> Tensor<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).unwrap().value()
    };
    let out_shape = probe(inputs).shape().to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let weights = uniform(&mut r, &out_shape.iter().map(|&d| d.max(1)).collect::<Vec<_>>(), -1.0, 1.0);
    let weights = if out_shape.is_empty() { Tensor::scalar(weights.item()) } else { weights };
    let project = |t: &Tensor<f64>| t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>();

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let loss = out.mul(tape.constant(weights.clone())).unwrap().sum_all().unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut errors = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).unwrap();
        let mut numeric = vec![0.0; input.numel()];
        for e in 0..input.numel() {
            let shifted = |delta: f64| {
                let mut vals = inputs.to_vec();
                let mut d = vals[k].to_vec();
                d[e] += delta;
                vals[k] = Tensor::new(input.shape().to_vec(), d).unwrap();
                project(&probe(&vals))
            };
            numeric[e] = (shifted(h) - shifted(-h)) / (2.0 * h);
        }
        errors.push(rel_err(analytic.data(), &numeric));
    }
    errors
}

/// Direct 7-deep loop cross-correlation.
pub fn conv2d_reference(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.get(&[ni, ci, iy as usize, ix as usize]).unwrap()
                                    * k.get(&[oi, ci, ky, kx]).unwrap();
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// `V_ij = M_i W_ij` by explicit 4x4 products.
pub fn votes_reference(m: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let (g, n_in, n_out) = (m.shape()[0], m.shape()[1], w.shape()[1]);
    let mut out = Vec::new();
    for gi in 0..g {
        for i in 0..n_in {
            for j in 0..n_out {
                for r in 0..4 {
                    for c in 0..4 {
                        let mut acc = 0.0;
                        for k in 0..4 {
                            acc += m.get(&[gi, i, r, k]).unwrap() * w.get(&[i, j, k, c]).unwrap();
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

pub struct MStepReference {
    pub mu: Vec<f64>,
    pub sigma_sq: Vec<f64>,
    pub a_out: Vec<f64>,
}

/// Weighted Gaussian maximum-likelihood fit for a single group, one parent
/// and one component at a time.
pub fn m_step_reference(
    r: &[f64],
    a_in: &[f64],
    votes: &[f64],
    beta_a: &[f64],
    beta_u: &[f64],
    lambda: f64,
    floor: f64,
) -> MStepReference {
    let n_in = a_in.len();
    let n_out = beta_a.len();
    let vote = |i: usize, j: usize, h: usize| votes[(i * n_out + j) * 16 + h];
    let mut out = MStepReference {
        mu: vec![],
        sigma_sq: vec![],
        a_out: vec![],
    };
    for j in 0..n_out {
        let weight = |i: usize| r[i * n_out + j] * a_in[i];
        let total: f64 = (0..n_in).map(weight).sum();
        let mut cost = 0.0;
        for h in 0..16 {
            let mean = (0..n_in).map(|i| weight(i) * vote(i, j, h)).sum::<f64>() / total;
            let var = ((0..n_in)
                .map(|i| weight(i) * (vote(i, j, h) - mean).powi(2))
                .sum::<f64>()
                / total)
                .max(floor);
            out.mu.push(mean);
            out.sigma_sq.push(var);
            cost += (beta_u[j] + var.sqrt().ln()) * total;
        }
        out.a_out.push(1.0 / (1.0 + (-lambda * (beta_a[j] - cost)).exp()));
    }
    out
}

/// Assignment probabilities from raw Gaussian densities (no log domain) for
/// a single group.
pub fn e_step_reference(mu: &[f64], var: &[f64], a: &[f64], votes: &[f64], n_in: usize) -> Vec<f64> {
    let n_out = a.len();
    let mut r = vec![0.0; n_in * n_out];
    for i in 0..n_in {
        let mut p = vec![0.0; n_out];
        for j in 0..n_out {
            let mut prod = a[j];
            for h in 0..16 {
                let d = votes[(i * n_out + j) * 16 + h] - mu[j * 16 + h];
                let s2 = var[j * 16 + h];
                prod *= (-(d * d) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            }
            p[j] = prod;
        }
        let z: f64 = p.iter().sum();
        for j in 0..n_out {
            r[i * n_out + j] = p[j] / z;
        }
    }
    r
}

/// Squared-hinge spread loss by per-item, per-class loops.
pub fn spread_loss_reference(act: &[f64], classes: usize, targets: &[usize], margin: f64) -> f64 {
    let mut total = 0.0;
    for (b, &t) in targets.iter().enumerate() {
        let at = act[b * classes + t];
        for i in 0..classes {
            if i != t {
                total += (margin - (at - act[b * classes + i])).max(0.0).powi(2);
            }
        }
    }
    total / targets.len() as f64
}
