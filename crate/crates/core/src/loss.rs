//! Objective terms and their gradients.
//!
//! * batch-softmax collaborative filtering loss over in-batch negatives,
//! * the same loss restricted to each environment,
//! * gradients of the environment losses with respect to the soft masks and
//!   the variance of those gradients across environments,
//! * the contrastive loss between factual and augmented views,
//! * the weighted total.
//!
//! Gradients with respect to embeddings, encoder weights and masks are
//! computed by hand in reverse mode. The gradient of the variance penalty
//! with respect to gamma is taken by central differences, since it is itself
//! a function of first-order gradients and gamma is low-dimensional.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{IflError, Result};
use crate::model::{
    clip_mask, mask_backward, tower_backward_deferred, FirstLayerAcc, ModelState, Projection, Trace,
};
use crate::rng::{stream, Stream};
use crate::scalar::{axpy, dot, norm, Scalar};
use crate::schema::{FeatureVector, Side};

pub const MIN_TAU: f64 = 1e-3;

fn check_batch<T: Scalar>(b: usize, tau: T) -> Result<()> {
    if b < 2 {
        return Err(IflError::BatchTooSmall(b));
    }
    if !(tau.as_f64() >= MIN_TAU) {
        return Err(IflError::Invalid(format!("temperature {tau} below {MIN_TAU}")));
    }
    Ok(())
}

/// Loss and gradients of a batch-softmax over cosine similarities.
#[derive(Debug, Clone)]
pub struct SoftmaxGrad<T> {
    pub loss: T,
    pub grad_a: Vec<Vec<T>>,
    pub grad_b: Vec<Vec<T>>,
}

/// `-(1/B) sum_k log( exp(s(a_k,b_k)/tau) / sum_j exp(s(a_k,b_j)/tau) )`
/// with cosine `s`, max-subtracted. Gradients are returned when `want_grad`.
pub fn batch_softmax<T: Scalar>(
    a: &[Vec<T>],
    b: &[Vec<T>],
    tau: T,
    want_grad: bool,
) -> Result<SoftmaxGrad<T>> {
    let n = a.len();
    assert_eq!(n, b.len(), "paired batches");
    check_batch(n, tau)?;
    let dim = a[0].len();
    // unit vectors, row-major; zero vectors stay zero
    let unit = |vs: &[Vec<T>]| -> (Vec<T>, Vec<T>) {
        let mut flat = Vec::with_capacity(vs.len() * dim);
        let mut norms = Vec::with_capacity(vs.len());
        for v in vs {
            let nv = norm(v);
            if nv.is_zero() {
                flat.extend(std::iter::repeat_n(T::zero(), dim));
            } else {
                flat.extend(v.iter().map(|x| *x / nv));
            }
            norms.push(nv);
        }
        (flat, norms)
    };
    let (ua, na) = unit(a);
    let (ub, nb) = unit(b);
    let row_a = |k: usize| &ua[k * dim..(k + 1) * dim];
    let row_b = |j: usize| &ub[j * dim..(j + 1) * dim];

    let bn = T::of(n as f64);
    let mut loss = T::zero();
    let mut cos = vec![T::zero(); n * n];
    // softmax probabilities, later turned into dL/dcos
    let mut g = vec![T::zero(); n * n];
    for k in 0..n {
        let row = &mut cos[k * n..(k + 1) * n];
        for (j, c) in row.iter_mut().enumerate() {
            *c = dot(row_a(k), row_b(j));
        }
        let mx = row.iter().fold(T::neg_infinity(), |m, c| m.max(*c / tau));
        let e = &mut g[k * n..(k + 1) * n];
        let mut denom = T::zero();
        for (ej, c) in e.iter_mut().zip(row.iter()) {
            *ej = (*c / tau - mx).exp();
            denom += *ej;
        }
        loss += denom.ln() + mx - row[k] / tau;
        if want_grad {
            let scale = T::one() / (bn * tau);
            for (j, ej) in e.iter_mut().enumerate() {
                let p = *ej / denom;
                *ej = if j == k { (p - T::one()) * scale } else { p * scale };
            }
        }
    }
    loss /= bn;

    let mut grad_a = Vec::new();
    let mut grad_b = Vec::new();
    if want_grad {
        // d cos(a, b) / d a = (b^ - cos a^) / |a|, and symmetrically for b
        let mut acc_b = vec![T::zero(); n * dim];
        let mut s_b = vec![T::zero(); n];
        grad_a = Vec::with_capacity(n);
        for k in 0..n {
            let mut acc = vec![T::zero(); dim];
            let mut s_a = T::zero();
            for j in 0..n {
                let gkj = g[k * n + j];
                let c = cos[k * n + j];
                axpy(gkj, row_b(j), &mut acc);
                axpy(gkj, row_a(k), &mut acc_b[j * dim..(j + 1) * dim]);
                s_a += gkj * c;
                s_b[j] += gkj * c;
            }
            if !na[k].is_zero() {
                for (x, u) in acc.iter_mut().zip(row_a(k)) {
                    *x = (*x - s_a * *u) / na[k];
                }
            } else {
                acc.iter_mut().for_each(|x| *x = T::zero());
            }
            grad_a.push(acc);
        }
        grad_b = (0..n)
            .map(|j| {
                let acc = &acc_b[j * dim..(j + 1) * dim];
                if nb[j].is_zero() {
                    return vec![T::zero(); dim];
                }
                acc.iter()
                    .zip(row_b(j))
                    .map(|(x, u)| (*x - s_b[j] * *u) / nb[j])
                    .collect()
            })
            .collect();
    }
    Ok(SoftmaxGrad {
        loss,
        grad_a,
        grad_b,
    })
}

/// Collaborative filtering loss with in-batch negatives.
pub fn cf_loss<T: Scalar>(z_users: &[Vec<T>], z_items: &[Vec<T>], tau: T) -> Result<T> {
    Ok(batch_softmax(z_users, z_items, tau, false)?.loss)
}

/// Contrastive loss between factual (unmasked) and augmented views of the same entities.
pub fn ssl_loss<T: Scalar>(z_fac: &[Vec<T>], z_inv: &[Vec<T>], tau: T) -> Result<T> {
    Ok(batch_softmax(z_fac, z_inv, tau, false)?.loss)
}

// ---------------------------------------------------------------------------
// Batches

/// A minibatch of positive interactions with the environment of each member.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub users: Vec<FeatureVector>,
    pub items: Vec<FeatureVector>,
    pub envs: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn features(&self, side: Side) -> &[FeatureVector] {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }
}

/// First-layer projections for every batch member on both sides.
#[derive(Debug, Clone)]
pub struct BatchProjection<T> {
    pub user: Vec<Projection<T>>,
    pub item: Vec<Projection<T>>,
}

impl<T: Scalar> BatchProjection<T> {
    pub fn new(state: &ModelState<T>, batch: &Batch) -> Self {
        // each (field, value) is projected once and shared across the batch
        let proj = |side: Side| {
            let enc = state.encoder(side);
            let tables = state.embeddings.side(side);
            let dim = state.embeddings.dim;
            let mut cache: BTreeMap<(usize, u32), Vec<T>> = BTreeMap::new();
            batch
                .features(side)
                .iter()
                .map(|fv| {
                    fv.values
                        .iter()
                        .enumerate()
                        .map(|(k, v)| {
                            cache
                                .entry((k, *v))
                                .or_insert_with(|| {
                                    let mut p = vec![T::zero(); enc.layers[0].bias.len()];
                                    enc.layers[0]
                                        .weight
                                        .matvec_cols_acc(k * dim, tables[k].row(*v as usize), &mut p);
                                    p
                                })
                                .clone()
                        })
                        .collect()
                })
                .collect()
        };
        Self {
            user: proj(Side::User),
            item: proj(Side::Item),
        }
    }

    pub fn side(&self, side: Side) -> &[Projection<T>] {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }
}

fn forward_all<T: Scalar>(
    state: &ModelState<T>,
    side: Side,
    proj: &[Projection<T>],
    masks: &[Option<&[T]>],
) -> Vec<Trace<T>> {
    let enc = state.encoder(side);
    proj.iter()
        .zip(masks)
        .map(|(p, m)| enc.forward(p, *m))
        .collect()
}

fn outputs<T: Scalar>(traces: &[Trace<T>]) -> Vec<Vec<T>> {
    traces.iter().map(|t| t.output().to_vec()).collect()
}

// ---------------------------------------------------------------------------
// Environment losses

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvLoss<T> {
    pub env: usize,
    /// Absent when the environment has fewer than two members in the batch.
    pub loss: Option<T>,
    pub members: usize,
}

fn env_members(envs: &[usize], n_envs: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_envs];
    for (i, e) in envs.iter().enumerate() {
        out[*e].push(i);
    }
    out
}

/// Collaborative filtering loss within each environment's batch members.
pub fn env_losses<T: Scalar>(
    z_users: &[Vec<T>],
    z_items: &[Vec<T>],
    envs: &[usize],
    n_envs: usize,
    tau: T,
) -> Result<Vec<EnvLoss<T>>> {
    env_members(envs, n_envs)
        .into_iter()
        .enumerate()
        .map(|(env, idx)| {
            let members = idx.len();
            let loss = if members < 2 {
                None
            } else {
                let zu: Vec<Vec<T>> = idx.iter().map(|i| z_users[*i].clone()).collect();
                let zi: Vec<Vec<T>> = idx.iter().map(|i| z_items[*i].clone()).collect();
                Some(cf_loss(&zu, &zi, tau)?)
            };
            Ok(EnvLoss { env, loss, members })
        })
        .collect()
}

/// Gradients of one environment's loss with respect to the user and item masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMaskGrad<T> {
    pub env: usize,
    pub loss: T,
    pub grad_u: Vec<T>,
    pub grad_i: Vec<T>,
}

/// Evaluates environment losses and their mask gradients at arbitrary mask
/// points with theta fixed. Projections are computed once.
pub struct MaskProbe<'a, T> {
    state: &'a ModelState<T>,
    proj: BatchProjection<T>,
    groups: Vec<Vec<usize>>,
    tau: T,
}

impl<'a, T: Scalar> MaskProbe<'a, T> {
    pub fn new(state: &'a ModelState<T>, batch: &Batch, n_envs: usize, tau: T) -> Self {
        Self {
            state,
            proj: BatchProjection::new(state, batch),
            groups: env_members(&batch.envs, n_envs),
            tau,
        }
    }

    pub fn with_projection(state: &'a ModelState<T>, proj: BatchProjection<T>, envs: &[usize], n_envs: usize, tau: T) -> Self {
        Self {
            state,
            proj,
            groups: env_members(envs, n_envs),
            tau,
        }
    }

    pub fn present_envs(&self) -> usize {
        self.groups.iter().filter(|g| g.len() >= 2).count()
    }

    /// Loss of every present environment at masks `(m_u, m_i)`.
    pub fn env_losses(&self, m_u: &[T], m_i: &[T]) -> Result<Vec<(usize, T)>> {
        let zu = outputs(&forward_all(self.state, Side::User, &self.proj.user, &vec![Some(m_u); self.proj.user.len()]));
        let zi = outputs(&forward_all(self.state, Side::Item, &self.proj.item, &vec![Some(m_i); self.proj.item.len()]));
        let mut out = Vec::new();
        for (env, idx) in self.groups.iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let a: Vec<Vec<T>> = idx.iter().map(|i| zu[*i].clone()).collect();
            let b: Vec<Vec<T>> = idx.iter().map(|i| zi[*i].clone()).collect();
            out.push((env, cf_loss(&a, &b, self.tau)?));
        }
        Ok(out)
    }

    /// Gradient of every present environment's loss with respect to `(m_u, m_i)`.
    pub fn env_mask_grads(&self, m_u: &[T], m_i: &[T]) -> Result<Vec<EnvMaskGrad<T>>> {
        let tu = forward_all(self.state, Side::User, &self.proj.user, &vec![Some(m_u); self.proj.user.len()]);
        let ti = forward_all(self.state, Side::Item, &self.proj.item, &vec![Some(m_i); self.proj.item.len()]);
        let mut out = Vec::new();
        for (env, idx) in self.groups.iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let a: Vec<Vec<T>> = idx.iter().map(|i| tu[*i].output().to_vec()).collect();
            let b: Vec<Vec<T>> = idx.iter().map(|i| ti[*i].output().to_vec()).collect();
            let sg = batch_softmax(&a, &b, self.tau, true)?;
            let mut grad_u = vec![T::zero(); m_u.len()];
            let mut grad_i = vec![T::zero(); m_i.len()];
            for (pos, i) in idx.iter().enumerate() {
                mask_backward(self.state.encoder(Side::User), &self.proj.user[*i], &tu[*i], &sg.grad_a[pos], &mut grad_u);
                mask_backward(self.state.encoder(Side::Item), &self.proj.item[*i], &ti[*i], &sg.grad_b[pos], &mut grad_i);
            }
            out.push(EnvMaskGrad {
                env,
                loss: sg.loss,
                grad_u,
                grad_i,
            });
        }
        Ok(out)
    }

    /// Variance penalty at masks `(m_u, m_i)`.
    pub fn variance_loss_at(&self, m_u: &[T], m_i: &[T]) -> Result<T> {
        Ok(variance_loss(&self.env_mask_grads(m_u, m_i)?))
    }

    /// Central-difference gradient of the variance penalty with respect to gamma.
    pub fn variance_loss_gamma_grad(&self, h: T) -> Result<(Vec<T>, Vec<T>)> {
        if !(h > T::zero()) {
            return Err(IflError::Invalid(format!("finite-difference step {h} must be positive")));
        }
        let gu = &self.state.masks.gamma_u;
        let gi = &self.state.masks.gamma_i;
        if self.present_envs() < 2 {
            return Ok((vec![T::zero(); gu.len()], vec![T::zero(); gi.len()]));
        }
        let mut out_u = vec![T::zero(); gu.len()];
        let mut out_i = vec![T::zero(); gi.len()];
        for side in Side::BOTH {
            let gamma = self.state.masks.gamma(side);
            for k in 0..gamma.len() {
                let (lo, hi) = (gamma[k] - h, gamma[k] + h);
                let flat = (hi <= T::zero()) || (lo >= T::one());
                if flat {
                    continue;
                }
                let at = |g: T| -> Result<T> {
                    let mut gam = gamma.to_vec();
                    gam[k] = g;
                    let m = clip_mask(&gam);
                    let v = match side {
                        Side::User => self.variance_loss_at(&m, &clip_mask(gi))?,
                        Side::Item => self.variance_loss_at(&clip_mask(gu), &m)?,
                    };
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(IflError::UnstableVarianceLoss {
                            side: side.as_str(),
                            field: k,
                        })
                    }
                };
                let d = (at(hi)? - at(lo)?) / (h + h);
                match side {
                    Side::User => out_u[k] = d,
                    Side::Item => out_i[k] = d,
                }
            }
        }
        Ok((out_u, out_i))
    }
}

/// Per-environment gradients of the environment losses with respect to the
/// masks, evaluated at `clip(gamma, 0, 1)` with theta held fixed.
pub fn mask_gradients<T: Scalar>(
    state: &ModelState<T>,
    batch: &Batch,
    n_envs: usize,
    tau: T,
) -> Result<Vec<EnvMaskGrad<T>>> {
    let probe = MaskProbe::new(state, batch, n_envs, tau);
    probe.env_mask_grads(&state.masks.eval_mask(Side::User), &state.masks.eval_mask(Side::Item))
}

/// `sum_c |g_c^u - mean_u|^2 + sum_c |g_c^i - mean_i|^2` over the given environments.
pub fn variance_loss<T: Scalar>(grads: &[EnvMaskGrad<T>]) -> T {
    if grads.len() < 2 {
        return T::zero();
    }
    let c = T::of(grads.len() as f64);
    let spread = |pick: &dyn Fn(&EnvMaskGrad<T>) -> &Vec<T>| -> T {
        // offsets from the first environment keep identical gradients at exactly zero
        let base = pick(&grads[0]);
        let offsets: Vec<Vec<T>> = grads
            .iter()
            .map(|g| pick(g).iter().zip(base).map(|(x, b)| *x - *b).collect())
            .collect();
        let mut mean = vec![T::zero(); base.len()];
        for o in &offsets {
            for (m, x) in mean.iter_mut().zip(o) {
                *m += *x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c);
        offsets.iter().map(|o| crate::scalar::sq_dist(o, &mean)).sum()
    };
    spread(&|g| &g.grad_u) + spread(&|g| &g.grad_i)
}

/// Central-difference gradient of the variance penalty with respect to
/// `gamma_u` and `gamma_i`, theta fixed. Entries whose perturbations both stay
/// in a clip plateau are zero.
pub fn variance_loss_gamma_grad<T: Scalar>(
    state: &ModelState<T>,
    batch: &Batch,
    n_envs: usize,
    tau: T,
    h: T,
) -> Result<(Vec<T>, Vec<T>)> {
    MaskProbe::new(state, batch, n_envs, tau).variance_loss_gamma_grad(h)
}

// ---------------------------------------------------------------------------
// Reverse-mode gradients of the training objective

/// Masks used on the prediction path of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMasks<T> {
    pub m_u: Vec<T>,
    pub m_i: Vec<T>,
    /// `d m / d gamma`: 1 inside the open interval (0, 1), 0 when clipped.
    pub dm_dgamma_u: Vec<T>,
    pub dm_dgamma_i: Vec<T>,
}

impl<T: Scalar> StepMasks<T> {
    /// `m = clip(gamma + noise, 0, 1)`.
    pub fn from_noise(state: &ModelState<T>, noise_u: &[T], noise_i: &[T]) -> Self {
        let side = |gamma: &[T], noise: &[T]| -> (Vec<T>, Vec<T>) {
            gamma
                .iter()
                .zip(noise)
                .map(|(g, e)| {
                    let raw = *g + *e;
                    let inside = raw > T::zero() && raw < T::one();
                    (raw.clip(T::zero(), T::one()), if inside { T::one() } else { T::zero() })
                })
                .unzip()
        };
        let (m_u, dm_dgamma_u) = side(&state.masks.gamma_u, noise_u);
        let (m_i, dm_dgamma_i) = side(&state.masks.gamma_i, noise_i);
        Self {
            m_u,
            m_i,
            dm_dgamma_u,
            dm_dgamma_i,
        }
    }

    pub fn eval(state: &ModelState<T>) -> Self {
        let zu = vec![T::zero(); state.masks.gamma_u.len()];
        let zi = vec![T::zero(); state.masks.gamma_i.len()];
        Self::from_noise(state, &zu, &zi)
    }

    /// Frozen all-ones masks carrying no gradient to gamma.
    pub fn ones(state: &ModelState<T>) -> Self {
        let n = state.masks.gamma_u.len();
        let m = state.masks.gamma_i.len();
        Self {
            m_u: vec![T::one(); n],
            m_i: vec![T::one(); m],
            dm_dgamma_u: vec![T::zero(); n],
            dm_dgamma_i: vec![T::zero(); m],
        }
    }

    pub fn mask(&self, side: Side) -> &[T] {
        match side {
            Side::User => &self.m_u,
            Side::Item => &self.m_i,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_side<T: Scalar>(
    state: &ModelState<T>,
    grads: &mut ModelState<T>,
    side: Side,
    features: &[FeatureVector],
    proj: &[Projection<T>],
    masks: &[Option<&[T]>],
    traces: &[Trace<T>],
    dz: &[Vec<T>],
    mut dmask: Option<&mut [T]>,
) {
    let enc = state.encoder(side);
    let (genc, gtab) = match side {
        Side::User => (&mut grads.user_encoder, &mut grads.embeddings.user),
        Side::Item => (&mut grads.item_encoder, &mut grads.embeddings.item),
    };
    let mut acc = FirstLayerAcc::new();
    for i in 0..features.len() {
        tower_backward_deferred(
            enc,
            &features[i],
            &proj[i],
            masks[i],
            &traces[i],
            &dz[i],
            genc,
            &mut acc,
            dmask.as_deref_mut(),
        );
    }
    acc.flush(enc, state.embeddings.side(side), genc, gtab);
}

/// Collaborative filtering loss at the given masks. Adds `scale * dL` to
/// `grads` for theta and, through `dm/dgamma`, for gamma.
pub fn cf_backward<T: Scalar>(
    state: &ModelState<T>,
    batch: &Batch,
    proj: &BatchProjection<T>,
    masks: &StepMasks<T>,
    tau: T,
    scale: T,
    grads: &mut ModelState<T>,
) -> Result<T> {
    let b = batch.len();
    let mu = vec![Some(masks.m_u.as_slice()); b];
    let mi = vec![Some(masks.m_i.as_slice()); b];
    let tu = forward_all(state, Side::User, &proj.user, &mu);
    let ti = forward_all(state, Side::Item, &proj.item, &mi);
    let sg = batch_softmax(&outputs(&tu), &outputs(&ti), tau, true)?;
    let scaled = |g: Vec<Vec<T>>| -> Vec<Vec<T>> {
        g.into_iter()
            .map(|v| v.into_iter().map(|x| x * scale).collect())
            .collect()
    };
    let (da, db) = (scaled(sg.grad_a), scaled(sg.grad_b));
    let mut dm_u = vec![T::zero(); masks.m_u.len()];
    let mut dm_i = vec![T::zero(); masks.m_i.len()];
    accumulate_side(state, grads, Side::User, &batch.users, &proj.user, &mu, &tu, &da, Some(&mut dm_u));
    accumulate_side(state, grads, Side::Item, &batch.items, &proj.item, &mi, &ti, &db, Some(&mut dm_i));
    for ((g, d), j) in grads.masks.gamma_u.iter_mut().zip(&dm_u).zip(&masks.dm_dgamma_u) {
        *g += *d * *j;
    }
    for ((g, d), j) in grads.masks.gamma_i.iter_mut().zip(&dm_i).zip(&masks.dm_dgamma_i) {
        *g += *d * *j;
    }
    Ok(sg.loss)
}

/// Contrastive loss of one tower between the unmasked view and the views kept
/// by the binary vectors `keep`. Adds `scale * dL/dtheta` to `grads`.
pub fn ssl_backward<T: Scalar>(
    state: &ModelState<T>,
    side: Side,
    features: &[FeatureVector],
    proj: &[Projection<T>],
    keep: &[Vec<T>],
    tau: T,
    scale: T,
    grads: &mut ModelState<T>,
) -> Result<T> {
    let b = features.len();
    let none: Vec<Option<&[T]>> = vec![None; b];
    let kept: Vec<Option<&[T]>> = keep.iter().map(|k| Some(k.as_slice())).collect();
    let t_fac = forward_all(state, side, proj, &none);
    let t_inv = forward_all(state, side, proj, &kept);
    let sg = batch_softmax(&outputs(&t_fac), &outputs(&t_inv), tau, true)?;
    let scaled = |g: Vec<Vec<T>>| -> Vec<Vec<T>> {
        g.into_iter()
            .map(|v| v.into_iter().map(|x| x * scale).collect())
            .collect()
    };
    accumulate_side(state, grads, side, features, proj, &none, &t_fac, &scaled(sg.grad_a), None);
    accumulate_side(state, grads, side, features, proj, &kept, &t_inv, &scaled(sg.grad_b), None);
    Ok(sg.loss)
}

/// Adds `2 * scale * theta` to the theta part of `grads`; returns `|theta|^2`.
pub fn l2_backward<T: Scalar>(state: &ModelState<T>, scale: T, grads: &mut ModelState<T>) -> T {
    let mut params: Vec<&[T]> = Vec::new();
    state.for_each_theta(|p| params.push(p));
    let mut i = 0;
    let two = scale + scale;
    grads.for_each_theta_mut(|g| {
        for (gi, p) in g.iter_mut().zip(params[i]) {
            *gi += two * *p;
        }
        i += 1;
    });
    state.theta_sq_norm()
}

// ---------------------------------------------------------------------------
// Totals

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cf: f64,
    /// One entry per environment; `None` when the environment had fewer than two batch members.
    pub l_env: Vec<Option<f64>>,
    pub l_v: f64,
    pub l_ssl_user: f64,
    pub l_ssl_item: f64,
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossParts {
    pub l_cf: f64,
    pub l_env: Vec<Option<f64>>,
    pub l_v: f64,
    pub l_ssl_user: f64,
    pub l_ssl_item: f64,
}

/// `total = l_cf + alpha (l_ssl_user + l_ssl_item) + beta l_v + lambda |theta|^2`.
pub fn total_loss(parts: LossParts, w: LossWeights, theta_sq_norm: f64) -> LossBreakdown {
    let total = parts.l_cf
        + w.alpha * (parts.l_ssl_user + parts.l_ssl_item)
        + w.beta * parts.l_v
        + w.lambda * theta_sq_norm;
    LossBreakdown {
        l_cf: parts.l_cf,
        l_env: parts.l_env,
        l_v: parts.l_v,
        l_ssl_user: parts.l_ssl_user,
        l_ssl_item: parts.l_ssl_item,
        l_reg: theta_sq_norm,
        total,
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradComponent {
    Cf,
    Ssl,
    Mask,
}

/// `|a - n| / (|a| + 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

fn perturbed<T: Scalar>(state: &ModelState<T>, idx: usize, delta: T) -> ModelState<T> {
    let mut s = state.clone();
    let mut i = 0;
    s.for_each_param_mut(|p| {
        if idx >= i && idx < i + p.len() {
            p[idx - i] += delta;
        }
        i += p.len();
    });
    s
}

fn flat_params<T: Scalar>(state: &ModelState<T>) -> Vec<T> {
    let mut out = Vec::new();
    state.for_each_param(|p| out.extend_from_slice(p));
    out
}

/// Keep vectors used by the contrastive grad check: a fixed-seed draw from `augment`.
pub fn grad_check_keep<T: Scalar>(state: &ModelState<T>, batch: &Batch, side: Side) -> Vec<Vec<T>> {
    let mut rng = stream(0, Stream::Augment);
    batch
        .features(side)
        .iter()
        .map(|_| crate::model::augment(state.masks.gamma(side), &mut rng))
        .collect()
}

/// Maximum relative error between reverse-mode gradients and central
/// differences with step `h`.
///
/// * `Cf`: every theta and gamma entry, masks at `clip(gamma, 0, 1)`.
/// * `Ssl`: every theta entry, summed over both towers with fixed keep vectors.
/// * `Mask`: each environment's mask gradient (see [`mask_gradients`]).
pub fn grad_check<T: Scalar>(component: GradComponent, state: &ModelState<T>, batch: &Batch, n_envs: usize, tau: T, h: T) -> Result<f64> {
    match component {
        GradComponent::Mask => {
            let probe = MaskProbe::new(state, batch, n_envs, tau);
            let m_u = state.masks.eval_mask(Side::User);
            let m_i = state.masks.eval_mask(Side::Item);
            let analytic = probe.env_mask_grads(&m_u, &m_i)?;
            let mut worst = 0.0_f64;
            for side in Side::BOTH {
                let width = state.schema.n_fields(side);
                for k in 0..width {
                    let at = |d: T| -> Result<Vec<(usize, T)>> {
                        let (mut a, mut b) = (m_u.clone(), m_i.clone());
                        match side {
                            Side::User => a[k] += d,
                            Side::Item => b[k] += d,
                        }
                        probe.env_losses(&a, &b)
                    };
                    let (plus, minus) = (at(h)?, at(-h)?);
                    for ((g, p), m) in analytic.iter().zip(&plus).zip(&minus) {
                        let numeric = (p.1 - m.1) / (h + h);
                        let a = match side {
                            Side::User => g.grad_u[k],
                            Side::Item => g.grad_i[k],
                        };
                        worst = worst.max(relative_error(a.as_f64(), numeric.as_f64()));
                    }
                }
            }
            Ok(worst)
        }
        GradComponent::Cf | GradComponent::Ssl => {
            let eval = |s: &ModelState<T>, grads: Option<&mut ModelState<T>>| -> Result<T> {
                let proj = BatchProjection::new(s, batch);
                let mut scratch;
                let g = match grads {
                    Some(g) => g,
                    None => {
                        scratch = s.zeros_like();
                        &mut scratch
                    }
                };
                match component {
                    GradComponent::Cf => {
                        let masks = StepMasks::eval(s);
                        cf_backward(s, batch, &proj, &masks, tau, T::one(), g)
                    }
                    _ => {
                        let mut total = T::zero();
                        for side in Side::BOTH {
                            let keep = grad_check_keep(state, batch, side);
                            total += ssl_backward(s, side, batch.features(side), proj.side(side), &keep, tau, T::one(), g)?;
                        }
                        Ok(total)
                    }
                }
            };
            let mut grads = state.zeros_like();
            eval(state, Some(&mut grads))?;
            let analytic = flat_params(&grads);
            let n_theta = state.n_theta();
            let limit = if component == GradComponent::Cf { analytic.len() } else { n_theta };
            let mut worst = 0.0_f64;
            for (idx, a) in analytic.iter().enumerate().take(limit) {
                let numeric = (eval(&perturbed(state, idx, h), None)? - eval(&perturbed(state, idx, -h), None)?) / (h + h);
                worst = worst.max(relative_error(a.as_f64(), numeric.as_f64()));
            }
            Ok(worst)
        }
    }
}
