//! Matrix capsules and EM routing.
//!
//! A capsule carries a 4x4 pose matrix and an activation in (0, 1). Each
//! child `i` votes for each parent `j` with `V_ij = M_i W_ij`. Routing fits
//! one axis-aligned Gaussian per parent to the votes it is assigned
//! (M-step), scores parent activation by how cheaply that Gaussian
//! describes its votes, and reassigns children by Gaussian likelihood
//! (E-step).
//!
//! The three heavy steps ([`compute_votes`], [`m_step`], [`e_step`]) are
//! single tape records with hand-derived adjoints so that the unrolled
//! routing iterations stay cheap to store and to differentiate. The
//! `*_forward` functions are the same arithmetic without a tape.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Entries of a flattened 4x4 pose matrix.
pub const POSE_COMPONENTS: usize = 16;

/// Threshold on `sum_i r_ij a_i` below which a parent is treated as dead.
pub const DEAD_PARENT_MASS: f64 = 1e-12;

/// Description cost assigned to a dead parent; drives its activation to ~0.
pub const DEAD_PARENT_COST: f64 = 1e4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub iterations: usize,
    pub lambda_init: f64,
    pub lambda_increment: f64,
    /// Lower bound on every fitted variance.
    pub variance_floor: f64,
    /// Constant added to each per-component description cost.
    pub k_const: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            iterations: 3,
            lambda_init: 1.0,
            lambda_increment: 1.0,
            variance_floor: 1e-9,
            k_const: 0.0,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::contract("routing.iterations must be >= 1"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::contract("routing.variance_floor must be > 0"));
        }
        if !self.lambda_init.is_finite() || !self.lambda_increment.is_finite() {
            return Err(Error::contract("routing lambda schedule must be finite"));
        }
        Ok(())
    }

    /// Inverse temperature used by the M-step of routing iteration `it` (0-based).
    pub fn lambda_at(&self, it: usize) -> f64 {
        self.lambda_init + self.lambda_increment * it as f64
    }
}

/// Poses `[G, n, 4, 4]` and activations `[G, n]` of one capsule layer.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleState<'t, T: Element> {
    pub poses: Var<'t, T>,
    pub activations: Var<'t, T>,
}

/// Learned parameters between a child layer of `n_in` and a parent layer of
/// `n_out` capsules.
#[derive(Debug, Clone, Copy)]
pub struct TransformWeights<'t, T: Element> {
    /// `[n_in, n_out, 4, 4]`
    pub w: Var<'t, T>,
    /// `[n_out]`
    pub beta_a: Var<'t, T>,
    /// `[n_out]`
    pub beta_u: Var<'t, T>,
}

impl<T: Element> TransformWeights<'_, T> {
    pub fn n_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Snapshot of the last routing iteration.
#[derive(Debug, Clone)]
pub struct RoutingState<T> {
    /// `[G, n_in, n_out]` assignments used by the final M-step.
    pub r: Tensor<T>,
    /// `[G, n_out, 16]`
    pub mu: Tensor<T>,
    /// `[G, n_out, 16]`, never below the variance floor
    pub sigma_sq: Tensor<T>,
    /// `[G, n_out]`
    pub a_out: Tensor<T>,
    /// Inverse temperature of the final M-step.
    pub lambda: f64,
}

/// Sigmoid clamped into the open interval so activations never hit 0 or 1.
#[inline]
fn open_sigmoid<T: Element>(z: T) -> T {
    let eps = T::epsilon();
    crate::ops::sigmoid(z).max(eps).min(T::one() - eps)
}

fn expect_shape(op: &'static str, what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("{what} is {got:?}, expected {want:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- votes

/// `votes[g,i,j] = poses[g,i] @ w[i,j]` with 4x4 blocks flattened row-major.
pub fn votes_forward<T: Element>(poses: &[T], w: &[T], g: usize, n_in: usize, n_out: usize) -> Vec<T> {
    let mut out = vec![T::zero(); g * n_in * n_out * POSE_COMPONENTS];
    out.par_chunks_mut(n_in * n_out * POSE_COMPONENTS)
        .enumerate()
        .for_each(|(gi, dst)| {
            for i in 0..n_in {
                let m = &poses[(gi * n_in + i) * 16..(gi * n_in + i + 1) * 16];
                for j in 0..n_out {
                    let wij = &w[(i * n_out + j) * 16..(i * n_out + j + 1) * 16];
                    let v = &mut dst[(i * n_out + j) * 16..(i * n_out + j + 1) * 16];
                    matmul4(m, wij, v);
                }
            }
        });
    out
}

#[inline]
fn matmul4<T: Element>(a: &[T], b: &[T], c: &mut [T]) {
    for r in 0..4 {
        for q in 0..4 {
            let mut acc = T::zero();
            for k in 0..4 {
                acc = acc + a[r * 4 + k] * b[k * 4 + q];
            }
            c[r * 4 + q] = acc;
        }
    }
}

/// Votes `[G, n_in, n_out, 16]` of a child layer for a parent layer.
pub fn compute_votes<'t, T: Element>(
    child: &CapsuleState<'t, T>,
    weights: &TransformWeights<'t, T>,
) -> Result<Var<'t, T>> {
    let ps = child.poses.shape();
    let ws = weights.w.shape();
    if ps.len() != 4 || ps[2..] != [4, 4] {
        return Err(Error::shape("compute_votes", format!("poses {ps:?} must be [G, n_in, 4, 4]")));
    }
    if ws.len() != 4 || ws[2..] != [4, 4] || ws[0] != ps[1] {
        return Err(Error::shape(
            "compute_votes",
            format!("weights {ws:?} must be [{}, n_out, 4, 4] for poses {ps:?}", ps[1]),
        ));
    }
    let (g, n_in, n_out) = (ps[0], ps[1], ws[1]);
    let (m, w) = (child.poses.value(), weights.w.value());
    let out = votes_forward(m.data(), w.data(), g, n_in, n_out);
    let out = Tensor::from_parts(vec![g, n_in, n_out, POSE_COMPONENTS], out);
    Ok(child.poses.tape().record1(
        "capsule_votes",
        &[child.poses, weights.w],
        out,
        Box::new(move |grad, needs| {
            let gv = grad[0].data();
            let (md, wd) = (m.data(), w.data());
            let block = n_in * n_out * 16;
            let gm = needs[0].then(|| {
                let mut gm = vec![T::zero(); md.len()];
                gm.par_chunks_mut(n_in * 16).enumerate().for_each(|(gi, dst)| {
                    for i in 0..n_in {
                        let d = &mut dst[i * 16..(i + 1) * 16];
                        for j in 0..n_out {
                            let wij = &wd[(i * n_out + j) * 16..(i * n_out + j + 1) * 16];
                            let g = &gv[gi * block + (i * n_out + j) * 16..][..16];
                            // dM = dV @ W^T
                            for r in 0..4 {
                                for c in 0..4 {
                                    let mut acc = T::zero();
                                    for q in 0..4 {
                                        acc = acc + g[r * 4 + q] * wij[c * 4 + q];
                                    }
                                    d[r * 4 + c] = d[r * 4 + c] + acc;
                                }
                            }
                        }
                    }
                });
                Tensor::from_parts(m.shape().to_vec(), gm)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); wd.len()];
                gw.par_chunks_mut(n_out * 16).enumerate().for_each(|(i, dst)| {
                    for gi in 0..g {
                        let mi = &md[(gi * n_in + i) * 16..(gi * n_in + i + 1) * 16];
                        for j in 0..n_out {
                            let gvij = &gv[gi * block + (i * n_out + j) * 16..][..16];
                            let d = &mut dst[j * 16..(j + 1) * 16];
                            // dW = M^T @ dV
                            for c in 0..4 {
                                for q in 0..4 {
                                    let mut acc = T::zero();
                                    for r in 0..4 {
                                        acc = acc + mi[r * 4 + c] * gvij[r * 4 + q];
                                    }
                                    d[c * 4 + q] = d[c * 4 + q] + acc;
                                }
                            }
                        }
                    }
                });
                Tensor::from_parts(w.shape().to_vec(), gw)
            });
            Ok(vec![gm, gw])
        }),
    ))
}

// ---------------------------------------------------------------- M-step

/// Scalar settings shared by the M-step forward and adjoint.
#[derive(Debug, Clone, Copy)]
struct MStepParams<T> {
    lambda: T,
    floor: T,
    k: T,
}

/// Output of [`m_step_forward`], each buffer laid out per group `g`.
#[derive(Debug, Clone)]
pub struct MStepOutput<T> {
    /// `[G, n_out, 16]`
    pub mu: Vec<T>,
    /// `[G, n_out, 16]`
    pub sigma_sq: Vec<T>,
    /// `[G, n_out]`
    pub a_out: Vec<T>,
    /// `[G, n_out]` assigned mass `sum_i r_ij a_i`
    pub mass: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn m_step_group<T: Element>(
    r: &[T],
    a_in: &[T],
    v: &[T],
    beta_a: &[T],
    beta_u: &[T],
    p: MStepParams<T>,
    mu: &mut [T],
    var: &mut [T],
    a_out: &mut [T],
    mass: &mut [T],
) {
    let n_out = beta_a.len();
    let n_in = a_in.len();
    let dead = T::from_f64(DEAD_PARENT_MASS);
    let half = T::from_f64(0.5);
    mass.iter_mut().for_each(|s| *s = T::zero());
    mu.iter_mut().for_each(|x| *x = T::zero());
    var.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..n_in {
        for j in 0..n_out {
            let w = r[i * n_out + j] * a_in[i];
            mass[j] = mass[j] + w;
            let vij = &v[(i * n_out + j) * 16..][..16];
            let m = &mut mu[j * 16..(j + 1) * 16];
            for h in 0..16 {
                m[h] = m[h] + w * vij[h];
            }
        }
    }
    for j in 0..n_out {
        if mass[j] < dead {
            mu[j * 16..(j + 1) * 16].iter_mut().for_each(|x| *x = T::zero());
            continue;
        }
        let inv = mass[j].recip();
        mu[j * 16..(j + 1) * 16].iter_mut().for_each(|x| *x = *x * inv);
    }
    for i in 0..n_in {
        for j in 0..n_out {
            if mass[j] < dead {
                continue;
            }
            let w = r[i * n_out + j] * a_in[i];
            let vij = &v[(i * n_out + j) * 16..][..16];
            let m = &mu[j * 16..(j + 1) * 16];
            let s = &mut var[j * 16..(j + 1) * 16];
            for h in 0..16 {
                let d = vij[h] - m[h];
                s[h] = s[h] + w * d * d;
            }
        }
    }
    for j in 0..n_out {
        let s = &mut var[j * 16..(j + 1) * 16];
        let cost = if mass[j] < dead {
            s.iter_mut().for_each(|x| *x = p.floor);
            T::from_f64(DEAD_PARENT_COST)
        } else {
            let inv = mass[j].recip();
            let mut per_component = T::zero();
            for x in s.iter_mut() {
                *x = (*x * inv).max(p.floor);
                per_component = per_component + beta_u[j] + half * x.ln() + p.k;
            }
            per_component * mass[j]
        };
        a_out[j] = open_sigmoid(p.lambda * (beta_a[j] - cost));
    }
}

/// Weighted Gaussian refit and activation for every group.
///
/// `r: [G, n_in, n_out]`, `a_in: [G, n_in]`, `votes: [G, n_in, n_out, 16]`,
/// `beta_a, beta_u: [n_out]`.
#[allow(clippy::too_many_arguments)]
pub fn m_step_forward<T: Element>(
    r: &[T],
    a_in: &[T],
    votes: &[T],
    beta_a: &[T],
    beta_u: &[T],
    g: usize,
    lambda: f64,
    cfg: &RoutingConfig,
) -> MStepOutput<T> {
    let n_out = beta_a.len();
    let n_in = a_in.len() / g.max(1);
    let p = MStepParams {
        lambda: T::from_f64(lambda),
        floor: T::from_f64(cfg.variance_floor),
        k: T::from_f64(cfg.k_const),
    };
    let mut out = MStepOutput {
        mu: vec![T::zero(); g * n_out * 16],
        sigma_sq: vec![T::zero(); g * n_out * 16],
        a_out: vec![T::zero(); g * n_out],
        mass: vec![T::zero(); g * n_out],
    };
    out.mu
        .par_chunks_mut(n_out * 16)
        .zip(out.sigma_sq.par_chunks_mut(n_out * 16))
        .zip(out.a_out.par_chunks_mut(n_out))
        .zip(out.mass.par_chunks_mut(n_out))
        .enumerate()
        .for_each(|(gi, (((mu, var), a), s))| {
            m_step_group(
                &r[gi * n_in * n_out..(gi + 1) * n_in * n_out],
                &a_in[gi * n_in..(gi + 1) * n_in],
                &votes[gi * n_in * n_out * 16..(gi + 1) * n_in * n_out * 16],
                beta_a,
                beta_u,
                p,
                mu,
                var,
                a,
                s,
            )
        });
    out
}

/// Adjoints of one group's M-step. Returns `(d_beta_a, d_beta_u)` partials
/// and writes the `r`, `a_in` and vote adjoints in place.
#[allow(clippy::too_many_arguments)]
fn m_step_group_backward<T: Element>(
    r: &[T],
    a_in: &[T],
    v: &[T],
    beta_u: &[T],
    p: MStepParams<T>,
    mu: &[T],
    var: &[T],
    a_out: &[T],
    mass: &[T],
    g_mu: &[T],
    g_var: &[T],
    g_a: &[T],
    gr: &mut [T],
    ga_in: &mut [T],
    gv: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let n_out = beta_u.len();
    let n_in = a_in.len();
    let dead = T::from_f64(DEAD_PARENT_MASS);
    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    let mut gba = vec![T::zero(); n_out];
    let mut gbu = vec![T::zero(); n_out];
    // per-parent coefficients: d(loss)/d(mass), adjusted variance adjoint
    let mut g_mass = vec![T::zero(); n_out];
    let mut g_raw = vec![T::zero(); n_out * 16];
    let mut alive = vec![false; n_out];
    for j in 0..n_out {
        let y = a_out[j];
        let gz = g_a[j] * y * (T::one() - y);
        gba[j] = gz * p.lambda;
        if mass[j] < dead {
            continue;
        }
        alive[j] = true;
        let g_cost = -gz * p.lambda;
        let mut per_component = T::zero();
        for h in 0..16 {
            let s2 = var[j * 16 + h];
            per_component = per_component + beta_u[j] + half * s2.ln() + p.k;
            if s2 > p.floor {
                g_raw[j * 16 + h] = g_var[j * 16 + h] + g_cost * mass[j] * half / s2;
            }
        }
        gbu[j] = g_cost * mass[j] * T::from_f64(16.0);
        g_mass[j] = g_cost * per_component;
    }
    for i in 0..n_in {
        let mut ga = T::zero();
        for j in 0..n_out {
            if !alive[j] {
                continue;
            }
            let inv = mass[j].recip();
            let w = r[i * n_out + j] * a_in[i];
            let vij = &v[(i * n_out + j) * 16..][..16];
            let gvij = &mut gv[(i * n_out + j) * 16..][..16];
            let mut gw = g_mass[j];
            for h in 0..16 {
                let d = vij[h] - mu[j * 16 + h];
                let gm = g_mu[j * 16 + h];
                let gs = g_raw[j * 16 + h];
                gw = gw + (gm * d + gs * (d * d - var[j * 16 + h])) * inv;
                gvij[h] = gvij[h] + (gm + two * gs * d) * w * inv;
            }
            gr[i * n_out + j] = gr[i * n_out + j] + gw * a_in[i];
            ga = ga + gw * r[i * n_out + j];
        }
        ga_in[i] = ga_in[i] + ga;
    }
    (gba, gbu)
}

/// One M-step on the tape: returns `(mu [G,n_out,16], sigma_sq [G,n_out,16], a_out [G,n_out])`.
pub fn m_step<'t, T: Element>(
    r: Var<'t, T>,
    votes: Var<'t, T>,
    a_in: Var<'t, T>,
    weights: &TransformWeights<'t, T>,
    lambda: f64,
    cfg: &RoutingConfig,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let vs = votes.shape();
    if vs.len() != 4 || vs[3] != POSE_COMPONENTS {
        return Err(Error::shape("m_step", format!("votes {vs:?} must be [G, n_in, n_out, 16]")));
    }
    let (g, n_in, n_out) = (vs[0], vs[1], vs[2]);
    expect_shape("m_step", "r", &r.shape(), &[g, n_in, n_out])?;
    expect_shape("m_step", "a_in", &a_in.shape(), &[g, n_in])?;
    expect_shape("m_step", "beta_a", &weights.beta_a.shape(), &[n_out])?;
    expect_shape("m_step", "beta_u", &weights.beta_u.shape(), &[n_out])?;
    cfg.validate()?;

    let (rt, at, vt) = (r.value(), a_in.value(), votes.value());
    let (bat, but) = (weights.beta_a.value(), weights.beta_u.value());
    let out = m_step_forward(rt.data(), at.data(), vt.data(), bat.data(), but.data(), g, lambda, cfg);
    let p = MStepParams {
        lambda: T::from_f64(lambda),
        floor: T::from_f64(cfg.variance_floor),
        k: T::from_f64(cfg.k_const),
    };
    let mu = Tensor::from_parts(vec![g, n_out, 16], out.mu);
    let var = Tensor::from_parts(vec![g, n_out, 16], out.sigma_sq);
    let act = Tensor::from_parts(vec![g, n_out], out.a_out);
    let mass = out.mass;
    let (mu_s, var_s, act_s) = (mu.clone(), var.clone(), act.clone());
    let outs = r.tape().record(
        "m_step",
        &[r, a_in, votes, weights.beta_a, weights.beta_u],
        vec![mu, var, act],
        Box::new(move |grads, _| {
            let (g_mu, g_var, g_a) = (grads[0].data(), grads[1].data(), grads[2].data());
            let mut gr = vec![T::zero(); g * n_in * n_out];
            let mut ga = vec![T::zero(); g * n_in];
            let mut gv = vec![T::zero(); g * n_in * n_out * 16];
            let partials: Vec<(Vec<T>, Vec<T>)> = gr
                .par_chunks_mut(n_in * n_out)
                .zip(ga.par_chunks_mut(n_in))
                .zip(gv.par_chunks_mut(n_in * n_out * 16))
                .enumerate()
                .map(|(gi, ((gr, ga), gv))| {
                    let po = gi * n_out;
                    m_step_group_backward(
                        &rt.data()[gi * n_in * n_out..(gi + 1) * n_in * n_out],
                        &at.data()[gi * n_in..(gi + 1) * n_in],
                        &vt.data()[gi * n_in * n_out * 16..(gi + 1) * n_in * n_out * 16],
                        but.data(),
                        p,
                        &mu_s.data()[po * 16..(po + n_out) * 16],
                        &var_s.data()[po * 16..(po + n_out) * 16],
                        &act_s.data()[po..po + n_out],
                        &mass[po..po + n_out],
                        &g_mu[po * 16..(po + n_out) * 16],
                        &g_var[po * 16..(po + n_out) * 16],
                        &g_a[po..po + n_out],
                        gr,
                        ga,
                        gv,
                    )
                })
                .collect();
            let mut gba = vec![T::zero(); n_out];
            let mut gbu = vec![T::zero(); n_out];
            for (pa, pu) in &partials {
                for j in 0..n_out {
                    gba[j] = gba[j] + pa[j];
                    gbu[j] = gbu[j] + pu[j];
                }
            }
            Ok(vec![
                Some(Tensor::from_parts(vec![g, n_in, n_out], gr)),
                Some(Tensor::from_parts(vec![g, n_in], ga)),
                Some(Tensor::from_parts(vec![g, n_in, n_out, 16], gv)),
                Some(Tensor::from_parts(vec![n_out], gba)),
                Some(Tensor::from_parts(vec![n_out], gbu)),
            ])
        }),
    );
    Ok((outs[0], outs[1], outs[2]))
}

// ---------------------------------------------------------------- E-step

fn e_step_group<T: Element>(mu: &[T], var: &[T], a: &[T], v: &[T], r: &mut [T]) {
    let n_out = a.len();
    let n_in = r.len() / n_out;
    let half = T::from_f64(0.5);
    let tiny = T::min_positive_value();
    let ln2pi = T::from_f64(LN_2PI);
    let mut bias = vec![T::zero(); n_out];
    for j in 0..n_out {
        let norm: T = var[j * 16..(j + 1) * 16].iter().map(|&s| s.ln() + ln2pi).sum();
        bias[j] = a[j].max(tiny).ln() - half * norm;
    }
    for i in 0..n_in {
        let row = &mut r[i * n_out..(i + 1) * n_out];
        let mut best = T::neg_infinity();
        for j in 0..n_out {
            let vij = &v[(i * n_out + j) * 16..][..16];
            let mut q = T::zero();
            for h in 0..16 {
                let d = vij[h] - mu[j * 16 + h];
                q = q + d * d / var[j * 16 + h];
            }
            row[j] = bias[j] - half * q;
            best = best.max(row[j]);
        }
        let mut z = T::zero();
        for x in row.iter_mut() {
            *x = (*x - best).exp();
            z = z + *x;
        }
        for x in row.iter_mut() {
            *x = *x / z;
        }
    }
}

/// Log-domain Gaussian reassignment of every child over its parents.
///
/// `mu, sigma_sq: [G, n_out, 16]`, `a_out: [G, n_out]`,
/// `votes: [G, n_in, n_out, 16]`; returns `r: [G, n_in, n_out]`.
pub fn e_step_forward<T: Element>(
    mu: &[T],
    sigma_sq: &[T],
    a_out: &[T],
    votes: &[T],
    g: usize,
    n_in: usize,
    n_out: usize,
) -> Vec<T> {
    let mut r = vec![T::zero(); g * n_in * n_out];
    r.par_chunks_mut(n_in * n_out).enumerate().for_each(|(gi, rg)| {
        e_step_group(
            &mu[gi * n_out * 16..(gi + 1) * n_out * 16],
            &sigma_sq[gi * n_out * 16..(gi + 1) * n_out * 16],
            &a_out[gi * n_out..(gi + 1) * n_out],
            &votes[gi * n_in * n_out * 16..(gi + 1) * n_in * n_out * 16],
            rg,
        )
    });
    r
}

/// One E-step on the tape; returns `r: [G, n_in, n_out]`.
pub fn e_step<'t, T: Element>(
    mu: Var<'t, T>,
    sigma_sq: Var<'t, T>,
    a_out: Var<'t, T>,
    votes: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let vs = votes.shape();
    if vs.len() != 4 || vs[3] != POSE_COMPONENTS {
        return Err(Error::shape("e_step", format!("votes {vs:?} must be [G, n_in, n_out, 16]")));
    }
    let (g, n_in, n_out) = (vs[0], vs[1], vs[2]);
    expect_shape("e_step", "mu", &mu.shape(), &[g, n_out, 16])?;
    expect_shape("e_step", "sigma_sq", &sigma_sq.shape(), &[g, n_out, 16])?;
    expect_shape("e_step", "a_out", &a_out.shape(), &[g, n_out])?;
    let (mt, st, at, vt) = (mu.value(), sigma_sq.value(), a_out.value(), votes.value());
    let r = e_step_forward(mt.data(), st.data(), at.data(), vt.data(), g, n_in, n_out);
    let r = Tensor::from_parts(vec![g, n_in, n_out], r);
    let r_saved = r.clone();
    Ok(mu.tape().record1(
        "e_step",
        &[mu, sigma_sq, a_out, votes],
        r,
        Box::new(move |grads, _| {
            let gr = grads[0].data();
            let rd = r_saved.data();
            let (md, sd, ad, vd) = (mt.data(), st.data(), at.data(), vt.data());
            let half = T::from_f64(0.5);
            let tiny = T::min_positive_value();
            let mut g_mu = vec![T::zero(); g * n_out * 16];
            let mut g_var = vec![T::zero(); g * n_out * 16];
            let mut g_a = vec![T::zero(); g * n_out];
            let mut g_v = vec![T::zero(); g * n_in * n_out * 16];
            g_mu.par_chunks_mut(n_out * 16)
                .zip(g_var.par_chunks_mut(n_out * 16))
                .zip(g_a.par_chunks_mut(n_out))
                .zip(g_v.par_chunks_mut(n_in * n_out * 16))
                .enumerate()
                .for_each(|(gi, (((gm, gs), ga), gv))| {
                    let rb = gi * n_in * n_out;
                    let pb = gi * n_out;
                    for i in 0..n_in {
                        let rr = &rd[rb + i * n_out..rb + (i + 1) * n_out];
                        let gg = &gr[rb + i * n_out..rb + (i + 1) * n_out];
                        let dot: T = rr.iter().zip(gg).map(|(&x, &y)| x * y).sum();
                        for j in 0..n_out {
                            let gq = rr[j] * (gg[j] - dot);
                            if ad[pb + j] > tiny {
                                ga[j] = ga[j] + gq / ad[pb + j];
                            }
                            let vij = &vd[(rb + i * n_out + j) * 16..][..16];
                            let gvij = &mut gv[(i * n_out + j) * 16..][..16];
                            for h in 0..16 {
                                let p = (pb + j) * 16 + h;
                                let inv = sd[p].recip();
                                let d = vij[h] - md[p];
                                let t = gq * d * inv;
                                gvij[h] = -t;
                                gm[j * 16 + h] = gm[j * 16 + h] + t;
                                gs[j * 16 + h] = gs[j * 16 + h] + gq * half * (d * d * inv * inv - inv);
                            }
                        }
                    }
                });
            Ok(vec![
                Some(Tensor::from_parts(vec![g, n_out, 16], g_mu)),
                Some(Tensor::from_parts(vec![g, n_out, 16], g_var)),
                Some(Tensor::from_parts(vec![g, n_out], g_a)),
                Some(Tensor::from_parts(vec![g, n_in, n_out, 16], g_v)),
            ])
        }),
    ))
}

// ---------------------------------------------------------------- routing

/// Route a child layer into its parents; see [`em_routing_traced`].
pub fn em_routing<'t, T: Element>(
    child: &CapsuleState<'t, T>,
    weights: &TransformWeights<'t, T>,
    cfg: &RoutingConfig,
) -> Result<CapsuleState<'t, T>> {
    em_routing_traced(child, weights, cfg).map(|(s, _)| s)
}

/// EM routing with every iteration recorded on the tape.
///
/// Starts from uniform assignments, runs `cfg.iterations` M-steps with an
/// E-step between consecutive ones, and raises the inverse temperature by
/// `cfg.lambda_increment` after each iteration. Parent poses are the fitted
/// means reshaped to 4x4.
pub fn em_routing_traced<'t, T: Element>(
    child: &CapsuleState<'t, T>,
    weights: &TransformWeights<'t, T>,
    cfg: &RoutingConfig,
) -> Result<(CapsuleState<'t, T>, RoutingState<T>)> {
    cfg.validate()?;
    let tape = child.poses.tape();
    let votes = compute_votes(child, weights)?;
    let vs = votes.shape();
    let (g, n_in, n_out) = (vs[0], vs[1], vs[2]);
    expect_shape("em_routing", "activations", &child.activations.shape(), &[g, n_in])?;

    let mut r = tape.constant(Tensor::full(vec![g, n_in, n_out], T::from_f64(1.0 / n_out as f64)));
    let mut it = 0;
    loop {
        let lambda = cfg.lambda_at(it);
        let (mu, sigma_sq, a_out) = m_step(r, votes, child.activations, weights, lambda, cfg)?;
        it += 1;
        if it == cfg.iterations {
            let state = RoutingState {
                r: r.value(),
                mu: mu.value(),
                sigma_sq: sigma_sq.value(),
                a_out: a_out.value(),
                lambda,
            };
            let poses = mu.reshape(vec![g, n_out, 4, 4])?;
            return Ok((
                CapsuleState {
                    poses,
                    activations: a_out,
                },
                state,
            ));
        }
        r = e_step(mu, sigma_sq, a_out, votes)?;
    }
}

// ---------------------------------------------------------------- loss

/// Squared-hinge spread loss, summed over non-target classes and averaged
/// over the batch: `mean_b sum_{i != t} max(0, m - (a_t - a_i))^2`.
pub fn spread_loss<'t, T: Element>(
    activations: Var<'t, T>,
    targets: &[usize],
    margin: f64,
) -> Result<Var<'t, T>> {
    let s = activations.shape();
    if s.len() != 2 {
        return Err(Error::shape("spread_loss", format!("activations {s:?} must be [B, classes]")));
    }
    let (b, c) = (s[0], s[1]);
    if targets.len() != b {
        return Err(Error::contract(format!(
            "spread_loss: {} targets for batch of {b}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::contract(format!("spread_loss: target {t} out of range for {c} classes")));
    }
    if !(margin > 0.0 && margin <= 1.0) {
        return Err(Error::contract(format!("spread_loss: margin {margin} outside (0, 1]")));
    }
    let tape = activations.tape();
    let one_hot = Tensor::from_fn(vec![b, c], |ix| T::from_f64((targets[ix[0]] == ix[1]) as u8 as f64));
    let off_target_t = Tensor::from_fn(vec![c, b], |ix| T::from_f64((targets[ix[1]] != ix[0]) as u8 as f64));
    let target_act = activations.mul(tape.constant(one_hot))?.reduce_sum(1)?; // [B]
    let by_class = activations.transpose()?; // [C, B]
    let hinge = by_class.sub(target_act)?.add_scalar(margin)?.relu()?;
    hinge
        .square()?
        .mul(tape.constant(off_target_t))?
        .sum_all()?
        .scale(1.0 / b as f64)
}
