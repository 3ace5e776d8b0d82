//! Two-tower model with per-field soft masks.
//!
//! Each side owns one embedding table per field and a stack of affine layers
//! with rectifiers in between. Field `k` enters the first layer through its own
//! column block `W0[:, kD..(k+1)D]`, so the first pre-activation is
//! `sum_k m[k] * (W0_k e_k) + b0`. The per-field projections `W0_k e_k` are
//! computed once per entity and reused whenever only the mask changes.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IflError, Result};
use crate::rng::Rng;
use crate::scalar::{axpy, dot, norm, Scalar};
use crate::schema::{FeatureSchema, FeatureVector, Side};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width D.
    pub dim: usize,
    /// Representation width R.
    pub rep_dim: usize,
    /// Hidden layer widths; empty means a single affine layer.
    pub hidden: Vec<usize>,
    pub gamma_init: f64,
    pub embed_std: f64,
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        if self.dim == 0 || self.rep_dim == 0 || self.hidden.contains(&0) {
            return Err(IflError::Config("model widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_init) {
            return Err(IflError::Config("model.gamma_init must lie in [0, 1]".into()));
        }
        if !(self.embed_std >= 0.0) {
            return Err(IflError::Config("model.embed_std must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            rep_dim: 64,
            hidden: Vec::new(),
            gamma_init: 0.5,
            embed_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskParameters<T> {
    pub gamma_u: Vec<T>,
    pub gamma_i: Vec<T>,
    pub sigma_eps: T,
}

impl<T: Scalar> MaskParameters<T> {
    pub fn gamma(&self, side: Side) -> &[T] {
        match side {
            Side::User => &self.gamma_u,
            Side::Item => &self.gamma_i,
        }
    }

    pub fn gamma_mut(&mut self, side: Side) -> &mut Vec<T> {
        match side {
            Side::User => &mut self.gamma_u,
            Side::Item => &mut self.gamma_i,
        }
    }

    /// Deterministic mask `clip(gamma, 0, 1)`.
    pub fn eval_mask(&self, side: Side) -> Vec<T> {
        clip_mask(self.gamma(side))
    }
}

pub fn clip_mask<T: Scalar>(gamma: &[T]) -> Vec<T> {
    gamma.iter().map(|g| g.clip(T::zero(), T::one())).collect()
}

/// Clipped-Gaussian gate: `m[k] = clip(gamma[k] + eps[k], 0, 1)` with
/// `eps ~ N(0, sigma_eps^2)` in train mode and `eps = 0` in eval mode.
pub fn sample_mask<T: Scalar>(gamma: &[T], sigma_eps: T, mode: MaskMode, rng: &mut Rng) -> Vec<T> {
    match mode {
        MaskMode::Eval => clip_mask(gamma),
        MaskMode::Train => {
            let noise: Vec<T> = gamma
                .iter()
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    sigma_eps * T::of(z)
                })
                .collect();
            mask_from_noise(gamma, &noise)
        }
    }
}

pub fn mask_from_noise<T: Scalar>(gamma: &[T], noise: &[T]) -> Vec<T> {
    gamma
        .iter()
        .zip(noise)
        .map(|(g, e)| (*g + *e).clip(T::zero(), T::one()))
        .collect()
}

/// Scale field `k`'s embedding by `m[k]`.
pub fn apply_mask<T: Scalar>(field_embeddings: &[Vec<T>], m: &[T]) -> Vec<Vec<T>> {
    assert_eq!(field_embeddings.len(), m.len(), "one mask entry per field");
    field_embeddings
        .iter()
        .zip(m)
        .map(|(e, mk)| e.iter().map(|x| *x * *mk).collect())
        .collect()
}

pub fn interaction_rep<T: Scalar>(z_u: &[T], z_i: &[T]) -> Vec<T> {
    assert_eq!(z_u.len(), z_i.len(), "towers must emit equal widths");
    let mut out = Vec::with_capacity(z_u.len() * 2);
    out.extend_from_slice(z_u);
    out.extend_from_slice(z_i);
    out
}

/// Cosine similarity; a zero-norm input yields 0.
pub fn similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (norm(a), norm(b));
    if na.is_zero() || nb.is_zero() {
        log::debug!("cosine similarity with a zero-norm vector; returning 0");
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

const MAX_AUGMENT_REDRAWS: usize = 16;

/// Binary keep vector: field `k` is dropped with probability `1 - clip(gamma[k], 0, 1)`.
pub fn augment<T: Scalar>(gamma: &[T], rng: &mut Rng) -> Vec<T> {
    let drop: Vec<f64> = gamma
        .iter()
        .map(|g| 1.0 - g.clip(T::zero(), T::one()).as_f64())
        .collect();
    augment_with_drop_probs(&drop, gamma, rng)
}

/// Keep vector for explicit drop probabilities. If every field is dropped the
/// draw is repeated; after the last redraw the field with the largest
/// `priority` (lowest index on ties) is kept alone.
pub fn augment_with_drop_probs<T: Scalar>(drop: &[f64], priority: &[T], rng: &mut Rng) -> Vec<T> {
    for _ in 0..=MAX_AUGMENT_REDRAWS {
        let keep: Vec<T> = drop
            .iter()
            .map(|p| if rng.random::<f64>() < *p { T::zero() } else { T::one() })
            .collect();
        if keep.iter().any(|k| !k.is_zero()) {
            return keep;
        }
    }
    let mut best = 0;
    for (k, p) in priority.iter().enumerate() {
        if *p > priority[best] {
            best = k;
        }
    }
    let mut keep = vec![T::zero(); drop.len()];
    keep[best] = T::one();
    keep
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables<T> {
    pub dim: usize,
    pub user: Vec<Matrix<T>>,
    pub item: Vec<Matrix<T>>,
}

impl<T: Scalar> EmbeddingTables<T> {
    pub fn side(&self, side: Side) -> &[Matrix<T>] {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut [Matrix<T>] {
        match side {
            Side::User => &mut self.user,
            Side::Item => &mut self.item,
        }
    }

    /// Row of each field's table for `features`.
    pub fn lookup(&self, side: Side, features: &FeatureVector) -> Vec<Vec<T>> {
        self.side(side)
            .iter()
            .zip(&features.values)
            .map(|(t, v)| t.row(*v as usize).to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine<T> {
    /// out x in
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder<T> {
    pub layers: Vec<Affine<T>>,
}

/// Forward pass record for one entity.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Pre-activation of every layer; the last one is the representation.
    pub pre: Vec<Vec<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.pre.last().expect("encoder has at least one layer")
    }
}

/// Per-field first-layer projections `W0_k e_k` of one entity.
pub type Projection<T> = Vec<Vec<T>>;

impl<T: Scalar> Encoder<T> {
    pub fn input_width(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    pub fn project(&self, tables: &[Matrix<T>], features: &FeatureVector) -> Projection<T> {
        let w0 = &self.layers[0].weight;
        let mut col = 0;
        tables
            .iter()
            .zip(&features.values)
            .map(|(t, v)| {
                let e = t.row(*v as usize);
                let mut p = vec![T::zero(); w0.rows()];
                w0.matvec_cols_acc(col, e, &mut p);
                col += e.len();
                p
            })
            .collect()
    }

    /// `mask = None` encodes with every field at full weight.
    pub fn forward(&self, proj: &Projection<T>, mask: Option<&[T]>) -> Trace<T> {
        let first = &self.layers[0];
        let mut h = first.bias.clone();
        for (k, p) in proj.iter().enumerate() {
            let m = mask.map_or(T::one(), |m| m[k]);
            axpy(m, p, &mut h);
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        pre.push(h);
        for layer in &self.layers[1..] {
            let input: Vec<T> = pre.last().unwrap().iter().map(|x| x.max(T::zero())).collect();
            let mut out = layer.bias.clone();
            layer.weight.matvec_cols_acc(0, &input, &mut out);
            pre.push(out);
        }
        Trace { pre }
    }

    /// Gradient of the first-layer pre-activation given `dz`, accumulating
    /// layer (>=1) parameter gradients into `grads` when provided.
    fn backward_to_first(&self, trace: &Trace<T>, dz: &[T], mut grads: Option<&mut Encoder<T>>) -> Vec<T> {
        let mut delta = dz.to_vec();
        for l in (1..self.layers.len()).rev() {
            let input: Vec<T> = trace.pre[l - 1].iter().map(|x| x.max(T::zero())).collect();
            if let Some(g) = grads.as_deref_mut() {
                g.layers[l].weight.add_outer_cols(0, T::one(), &delta, &input);
                axpy(T::one(), &delta, &mut g.layers[l].bias);
            }
            let mut prev = vec![T::zero(); input.len()];
            self.layers[l].weight.tmatvec_cols_acc(0, &delta, &mut prev);
            for (p, x) in prev.iter_mut().zip(&trace.pre[l - 1]) {
                if *x <= T::zero() {
                    *p = T::zero();
                }
            }
            delta = prev;
        }
        delta
    }
}

/// Accumulates `d loss / d mask` for one entity into `dmask`.
pub fn mask_backward<T: Scalar>(
    encoder: &Encoder<T>,
    proj: &Projection<T>,
    trace: &Trace<T>,
    dz: &[T],
    dmask: &mut [T],
) {
    let delta = encoder.backward_to_first(trace, dz, None);
    for (d, p) in dmask.iter_mut().zip(proj) {
        *d += dot(&delta, p);
    }
}

/// First-layer gradients collected per (field, value) and expanded once.
///
/// The first layer is linear in each field's embedding row, so the weight and
/// embedding gradients only depend on the sum of `m_k * delta` over the
/// entities sharing a value.
#[derive(Debug, Clone, Default)]
pub struct FirstLayerAcc<T> {
    sums: BTreeMap<(usize, u32), Vec<T>>,
}

impl<T: Scalar> FirstLayerAcc<T> {
    pub fn new() -> Self {
        Self { sums: BTreeMap::new() }
    }

    fn add(&mut self, features: &FeatureVector, mask: Option<&[T]>, delta: &[T]) {
        for (k, v) in features.values.iter().enumerate() {
            let m = mask.map_or(T::one(), |m| m[k]);
            if m.is_zero() {
                continue;
            }
            let slot = self
                .sums
                .entry((k, *v))
                .or_insert_with(|| vec![T::zero(); delta.len()]);
            axpy(m, delta, slot);
        }
    }

    /// Adds the collected first-layer weight and embedding gradients.
    pub fn flush(self, encoder: &Encoder<T>, tables: &[Matrix<T>], grad_encoder: &mut Encoder<T>, grad_tables: &mut [Matrix<T>]) {
        let w0 = &encoder.layers[0].weight;
        let dim = tables.first().map_or(0, |t| t.cols());
        for ((k, v), s) in self.sums {
            let col = k * dim;
            let e = tables[k].row(v as usize);
            grad_encoder.layers[0].weight.add_outer_cols(col, T::one(), &s, e);
            let mut de = vec![T::zero(); dim];
            w0.tmatvec_cols_acc(col, &s, &mut de);
            axpy(T::one(), &de, grad_tables[k].row_mut(v as usize));
        }
    }
}

/// Reverse pass for one entity. Gradients of layers after the first and of
/// the first-layer bias go straight into `grad_encoder`; first-layer weight
/// and embedding gradients are collected in `acc`.
#[allow(clippy::too_many_arguments)]
pub fn tower_backward_deferred<T: Scalar>(
    encoder: &Encoder<T>,
    features: &FeatureVector,
    proj: &Projection<T>,
    mask: Option<&[T]>,
    trace: &Trace<T>,
    dz: &[T],
    grad_encoder: &mut Encoder<T>,
    acc: &mut FirstLayerAcc<T>,
    dmask: Option<&mut [T]>,
) {
    let delta = encoder.backward_to_first(trace, dz, Some(grad_encoder));
    axpy(T::one(), &delta, &mut grad_encoder.layers[0].bias);
    if let Some(dm) = dmask {
        for (d, p) in dm.iter_mut().zip(proj) {
            *d += dot(&delta, p);
        }
    }
    acc.add(features, mask, &delta);
}

/// Full reverse pass for one entity: accumulates gradients of every encoder
/// parameter, the used embedding rows and (optionally) the mask.
#[allow(clippy::too_many_arguments)]
pub fn tower_backward<T: Scalar>(
    encoder: &Encoder<T>,
    tables: &[Matrix<T>],
    features: &FeatureVector,
    proj: &Projection<T>,
    mask: Option<&[T]>,
    trace: &Trace<T>,
    dz: &[T],
    grad_encoder: &mut Encoder<T>,
    grad_tables: &mut [Matrix<T>],
    dmask: Option<&mut [T]>,
) {
    let mut acc = FirstLayerAcc::new();
    tower_backward_deferred(encoder, features, proj, mask, trace, dz, grad_encoder, &mut acc, dmask);
    acc.flush(encoder, tables, grad_encoder, grad_tables);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T> {
    pub schema: FeatureSchema,
    pub embeddings: EmbeddingTables<T>,
    pub user_encoder: Encoder<T>,
    pub item_encoder: Encoder<T>,
    pub masks: MaskParameters<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Embeddings from `N(0, embed_std^2)`, weights from `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, zero biases, `gamma = gamma_init`.
    pub fn init(schema: &FeatureSchema, cfg: &ModelConfig, sigma_eps: f64, rng: &mut Rng) -> Self {
        let mut tables = |side: Side| -> Vec<Matrix<T>> {
            schema
                .fields(side)
                .iter()
                .map(|f| {
                    Matrix::from_fn(f.vocab_size, cfg.dim, |_, _| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::of(z * cfg.embed_std)
                    })
                })
                .collect()
        };
        let user = tables(Side::User);
        let item = tables(Side::Item);
        let mut encoder = |n_fields: usize| -> Encoder<T> {
            let mut widths = vec![n_fields * cfg.dim];
            widths.extend(&cfg.hidden);
            widths.push(cfg.rep_dim);
            let layers = widths
                .windows(2)
                .map(|w| {
                    let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
                    Affine {
                        weight: Matrix::from_fn(w[1], w[0], |_, _| T::of(rng.random_range(-a..a))),
                        bias: vec![T::zero(); w[1]],
                    }
                })
                .collect();
            Encoder { layers }
        };
        let user_encoder = encoder(schema.user_fields.len());
        let item_encoder = encoder(schema.item_fields.len());
        let g = T::of(cfg.gamma_init);
        Self {
            schema: schema.clone(),
            embeddings: EmbeddingTables {
                dim: cfg.dim,
                user,
                item,
            },
            user_encoder,
            item_encoder,
            masks: MaskParameters {
                gamma_u: vec![g; schema.user_fields.len()],
                gamma_i: vec![g; schema.item_fields.len()],
                sigma_eps: T::of(sigma_eps),
            },
        }
    }

    /// Same shapes, every entry zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(|p| p.iter_mut().for_each(|x| *x = T::zero()));
        z.masks.sigma_eps = T::zero();
        z
    }

    pub fn encoder(&self, side: Side) -> &Encoder<T> {
        match side {
            Side::User => &self.user_encoder,
            Side::Item => &self.item_encoder,
        }
    }

    pub fn encoder_mut(&mut self, side: Side) -> &mut Encoder<T> {
        match side {
            Side::User => &mut self.user_encoder,
            Side::Item => &mut self.item_encoder,
        }
    }

    pub fn project(&self, side: Side, features: &FeatureVector) -> Projection<T> {
        self.encoder(side).project(self.embeddings.side(side), features)
    }

    /// Representation of one entity; `mask = None` leaves every field unscaled.
    pub fn encode(&self, side: Side, features: &FeatureVector, mask: Option<&[T]>) -> Vec<T> {
        let proj = self.project(side, features);
        let mut t = self.encoder(side).forward(&proj, mask);
        t.pre.pop().unwrap()
    }

    /// Eval-mode representations of every entity on `side`.
    pub fn encode_all(&self, side: Side, entities: &[FeatureVector]) -> Vec<Vec<T>> {
        let mask = self.masks.eval_mask(side);
        entities
            .iter()
            .map(|fv| self.encode(side, fv, Some(&mask)))
            .collect()
    }

    /// Embedding tables and encoder weights (theta) in a fixed order. Gamma is excluded.
    pub fn for_each_theta<'a>(&'a self, mut f: impl FnMut(&'a [T])) {
        for t in self.embeddings.user.iter().chain(&self.embeddings.item) {
            f(t.as_slice());
        }
        for enc in [&self.user_encoder, &self.item_encoder] {
            for l in &enc.layers {
                f(l.weight.as_slice());
                f(&l.bias);
            }
        }
    }

    pub fn for_each_theta_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for t in self.embeddings.user.iter_mut().chain(self.embeddings.item.iter_mut()) {
            f(t.as_mut_slice());
        }
        for enc in [&mut self.user_encoder, &mut self.item_encoder] {
            for l in enc.layers.iter_mut() {
                f(l.weight.as_mut_slice());
                f(&mut l.bias);
            }
        }
    }

    /// Theta followed by gamma_u and gamma_i.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        self.for_each_theta_mut(&mut f);
        f(&mut self.masks.gamma_u);
        f(&mut self.masks.gamma_i);
    }

    pub fn for_each_param<'a>(&'a self, mut f: impl FnMut(&'a [T])) {
        self.for_each_theta(&mut f);
        f(&self.masks.gamma_u);
        f(&self.masks.gamma_i);
    }

    pub fn theta_sq_norm(&self) -> T {
        let mut acc = T::zero();
        self.for_each_theta(|p| acc += p.iter().map(|x| *x * *x).sum::<T>());
        acc
    }

    pub fn n_theta(&self) -> usize {
        let mut n = 0;
        self.for_each_theta(|p| n += p.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = self.masks.sigma_eps.is_finite();
        self.for_each_param(|p| ok &= p.iter().all(|x| x.is_finite()));
        ok
    }

    /// Hash of every parameter bit pattern.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.for_each_param(|p| {
            for x in p {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        });
        h.update(self.masks.sigma_eps.as_f64().to_bits().to_le_bytes());
        crate::schema::hex16(&h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let m = |x: &Matrix<T>| Matrix::from_vec(x.rows(), x.cols(), x.as_slice().iter().map(|v| U::of(v.as_f64())).collect());
        let v = |x: &[T]| x.iter().map(|v| U::of(v.as_f64())).collect::<Vec<U>>();
        let enc = |e: &Encoder<T>| Encoder {
            layers: e
                .layers
                .iter()
                .map(|l| Affine {
                    weight: m(&l.weight),
                    bias: v(&l.bias),
                })
                .collect(),
        };
        ModelState {
            schema: self.schema.clone(),
            embeddings: EmbeddingTables {
                dim: self.embeddings.dim,
                user: self.embeddings.user.iter().map(m).collect(),
                item: self.embeddings.item.iter().map(m).collect(),
            },
            user_encoder: enc(&self.user_encoder),
            item_encoder: enc(&self.item_encoder),
            masks: MaskParameters {
                gamma_u: v(&self.masks.gamma_u),
                gamma_i: v(&self.masks.gamma_i),
                sigma_eps: U::of(self.masks.sigma_eps.as_f64()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub side: Side,
    pub field: String,
    pub value: f64,
}

/// Eval-mode mask value of every field, user side first.
pub fn mask_report<T: Scalar>(state: &ModelState<T>) -> Vec<MaskRow> {
    Side::BOTH
        .into_iter()
        .flat_map(|side| {
            state
                .schema
                .fields(side)
                .iter()
                .zip(state.masks.eval_mask(side))
                .map(move |(f, m)| MaskRow {
                    side,
                    field: f.name.clone(),
                    value: m.as_f64(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn tiny(n: usize, m: usize, dim: usize, rep: usize, hidden: Vec<usize>) -> ModelState<f64> {
        let schema = FeatureSchema::uniform(n, m, 5).unwrap();
        let cfg = ModelConfig {
            dim,
            rep_dim: rep,
            hidden,
            embed_std: 0.5,
            ..Default::default()
        };
        ModelState::init(&schema, &cfg, 0.5, &mut stream(3, Stream::Init))
    }

    #[test]
    fn mask_clip_bounds() {
        assert_eq!(mask_from_noise(&[0.7], &[0.5]), vec![1.0]);
        assert_eq!(mask_from_noise(&[0.2], &[-0.5]), vec![0.0]);
        let mut rng = stream(0, Stream::Noise);
        assert_eq!(
            sample_mask(&[0.3, 1.4, -0.2], 0.5, MaskMode::Eval, &mut rng),
            vec![0.3, 1.0, 0.0]
        );
    }

    #[test]
    fn apply_mask_cases() {
        let e = vec![vec![2.0, -4.0], vec![1.0, 1.0]];
        assert_eq!(apply_mask(&e, &[0.5, 0.0]), vec![vec![1.0, -2.0], vec![0.0, 0.0]]);
        assert_eq!(apply_mask(&e, &[1.0, 1.0]), e);
    }

    #[test]
    fn identity_encoder_returns_concatenated_embeddings() {
        let mut s = tiny(3, 2, 4, 12, vec![]);
        s.user_encoder.layers[0].weight = Matrix::identity(12);
        s.user_encoder.layers[0].bias = vec![0.0; 12];
        let fv = FeatureVector::new(vec![1, 4, 2]);
        let z = s.encode(Side::User, &fv, None);
        let concat: Vec<f64> = s.embeddings.lookup(Side::User, &fv).concat();
        assert_eq!(z, concat);
    }

    #[test]
    fn zero_mask_zero_bias_gives_zero() {
        let s = tiny(3, 2, 4, 6, vec![5]);
        let fv = FeatureVector::new(vec![1, 2, 3]);
        let z = s.encode(Side::User, &fv, Some(&[0.0, 0.0, 0.0]));
        assert!(z.iter().all(|x| *x == 0.0));
        assert_eq!(z, s.encode(Side::User, &fv, Some(&[0.0, 0.0, 0.0])));
    }

    #[test]
    fn similarity_cases() {
        assert!((similarity(&[1.0, 2.0], &[1.0, 2.0]) - 1.0_f64).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(similarity(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn interaction_rep_concatenates_in_order() {
        assert_eq!(interaction_rep(&[1.0, 2.0], &[3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
        assert_ne!(interaction_rep(&[1.0, 2.0], &[3.0, 4.0]), interaction_rep(&[3.0, 4.0], &[1.0, 2.0]));
        assert_eq!(interaction_rep(&[0.0; 3], &[0.0; 3]), vec![0.0; 6]);
    }

    #[test]
    fn augment_extremes() {
        let mut rng = stream(1, Stream::Augment);
        for _ in 0..100 {
            assert_eq!(augment(&[1.0, 1.0, 1.0], &mut rng), vec![1.0, 1.0, 1.0]);
            assert_eq!(augment(&[1.0, 0.0, 1.2], &mut rng), vec![1.0, 0.0, 1.0]);
        }
        // every field certain to drop: fallback keeps the largest gamma
        assert_eq!(augment(&[-1.0, -0.2, -3.0], &mut rng), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn augment_drop_frequency() {
        let mut rng = stream(2, Stream::Augment);
        // with 10 fields the all-dropped redraw shifts the marginal by < 1e-3
        let gamma = [0.5; 10];
        let mut dropped = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            for (d, k) in dropped.iter_mut().zip(augment(&gamma, &mut rng)) {
                *d += usize::from(k == 0.0);
            }
        }
        for d in dropped {
            let f = d as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.02, "drop frequency {f}");
        }
    }

    #[test]
    fn mask_report_rows() {
        let mut s = tiny(2, 1, 2, 2, vec![]);
        assert!(mask_report(&s).iter().all(|r| r.value == 0.5));
        s.masks.gamma_u = vec![1.2, -0.3];
        let before = s.digest();
        let rows = mask_report(&s);
        assert_eq!(s.digest(), before);
        assert_eq!(rows[0], MaskRow { side: Side::User, field: "u0".into(), value: 1.0 });
        assert_eq!(rows[1], MaskRow { side: Side::User, field: "u1".into(), value: 0.0 });
        assert_eq!(rows[2].side, Side::Item);
    }

    #[test]
    fn f32_model_encodes() {
        let s: ModelState<f32> = tiny(2, 2, 3, 4, vec![3]).cast();
        let z = s.encode(Side::Item, &FeatureVector::new(vec![0, 1]), None);
        assert_eq!(z.len(), 4);
        assert!(z.iter().all(|x| x.is_finite()));
    }
}
