#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ifl_core::loss::{variance_loss, Batch, EnvMaskGrad, MaskProbe};
use ifl_core::model::{similarity, ModelConfig, ModelState};
use ifl_core::rng::{stream, Stream};
use ifl_core::schema::{load_dir, Dataset, FeatureSchema, FeatureVector, LoadOptions, Side, Split};
use rand::Rng;

pub const TAU: f64 = 0.5;

pub const VOCAB: usize = 5;

/// Random tiny model: D=4, R=4, N=M=3, gammas strictly inside (0.15, 0.85).
pub fn tiny_state(seed: u64, hidden: Vec<usize>) -> ModelState<f64> {
    let schema = FeatureSchema::uniform(3, 3, VOCAB).unwrap();
    let cfg = ModelConfig {
        dim: 4,
        rep_dim: 4,
        hidden,
        embed_std: 0.5,
        ..Default::default()
    };
    let mut rng = stream(seed, Stream::Init);
    let mut s = ModelState::init(&schema, &cfg, 0.5, &mut rng);
    for g in s.masks.gamma_u.iter_mut().chain(s.masks.gamma_i.iter_mut()) {
        *g = rng.random_range(0.15..0.85);
    }
    for enc in [&mut s.user_encoder, &mut s.item_encoder] {
        for l in enc.layers.iter_mut() {
            for b in l.bias.iter_mut() {
                *b = rng.random_range(-0.3..0.3);
            }
        }
    }
    s
}

/// Batch of `b` random members split across two environments.
pub fn tiny_batch(seed: u64, b: usize) -> Batch {
    let mut rng = stream(seed, Stream::Shuffle);
    let fv = |rng: &mut ifl_core::rng::Rng| {
        FeatureVector::new((0..3).map(|_| rng.random_range(0..VOCAB as u32)).collect())
    };
    let users = (0..b).map(|_| fv(&mut rng)).collect();
    let items = (0..b).map(|_| fv(&mut rng)).collect();
    let envs = (0..b).map(|i| i % 2).collect();
    Batch { users, items, envs }
}

/// Variance penalty with every mask gradient itself taken by central differences.
pub fn nested_fd_variance(state: &ModelState<f64>, batch: &Batch, m_u: &[f64], m_i: &[f64], h: f64) -> f64 {
    let probe = MaskProbe::new(state, batch, 2, TAU);
    let base = probe.env_losses(m_u, m_i).unwrap();
    let mut grads: Vec<EnvMaskGrad<f64>> = base
        .iter()
        .map(|(env, loss)| EnvMaskGrad {
            env: *env,
            loss: *loss,
            grad_u: vec![0.0; m_u.len()],
            grad_i: vec![0.0; m_i.len()],
        })
        .collect();
    for side in Side::BOTH {
        let width = if side == Side::User { m_u.len() } else { m_i.len() };
        for k in 0..width {
            let at = |d: f64| {
                let (mut a, mut b) = (m_u.to_vec(), m_i.to_vec());
                if side == Side::User { a[k] += d } else { b[k] += d }
                probe.env_losses(&a, &b).unwrap()
            };
            let (p, m) = (at(h), at(-h));
            for (g, (pp, mm)) in grads.iter_mut().zip(p.iter().zip(&m)) {
                let d = (pp.1 - mm.1) / (2.0 * h);
                if side == Side::User { g.grad_u[k] = d } else { g.grad_i[k] = d }
            }
        }
    }
    variance_loss(&grads)
}

pub const USERS: usize = 5;
pub const ITEMS: usize = 10;

fn split_of(u: usize, i: usize) -> Split {
    match (u * 7 + i * 3) % 10 {
        0..=4 => Split::Train,
        5 | 6 => Split::Val,
        7 | 8 => Split::TestIid,
        _ => Split::TestOod,
    }
}

/// 5 users x 10 items with id features and a fixed random model.
pub fn metric_fixture() -> (Dataset, ModelState<f64>) {
    let dir = tempfile::tempdir().unwrap();
    let mut users = String::from("id,f1\n");
    for u in 0..USERS {
        writeln!(users, "u{u},a{}", u % 2).unwrap();
    }
    let mut items = String::from("id,g1\n");
    for i in 0..ITEMS {
        writeln!(items, "i{i},b{}", i % 3).unwrap();
    }
    let mut inter = String::from("user_id,item_id,label,split\n");
    for u in 0..USERS {
        for i in 0..ITEMS {
            let label = u8::from((u * i + u + i) % 3 != 0);
            writeln!(inter, "u{u},i{i},{label},{}", split_of(u, i).as_str()).unwrap();
        }
    }
    std::fs::write(dir.path().join("users.csv"), users).unwrap();
    std::fs::write(dir.path().join("items.csv"), items).unwrap();
    std::fs::write(dir.path().join("interactions.csv"), inter).unwrap();
    let d = load_dir(dir.path(), &LoadOptions { id_as_feature: true }).unwrap();
    let cfg = ModelConfig {
        dim: 4,
        rep_dim: 4,
        embed_std: 1.0,
        ..Default::default()
    };
    let mut state = ModelState::init(&d.schema, &cfg, 0.5, &mut stream(11, Stream::Init));
    state.masks.gamma_u = vec![1.0, 0.6];
    state.masks.gamma_i = vec![0.8, 1.0];
    (d, state)
}

/// Mean Recall@K / NDCG@K by enumerating every score and counting ranks.
pub fn brute_force(d: &Dataset, state: &ModelState<f64>, split: Split, k: usize) -> (f64, f64, usize) {
    let hidden: &[Split] = if split == Split::Val {
        &[Split::Train]
    } else {
        &[Split::Train, Split::Val]
    };
    let mut relevant: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut excluded: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for r in d.interactions.iter().filter(|r| r.label == 1) {
        if r.split == split {
            relevant.entry(r.user).or_default().insert(r.item);
        } else if hidden.contains(&r.split) {
            excluded.entry(r.user).or_default().insert(r.item);
        }
    }
    let mu = state.masks.eval_mask(Side::User);
    let mi = state.masks.eval_mask(Side::Item);
    let (mut recall, mut ndcg) = (0.0, 0.0);
    for (u, rel) in &relevant {
        let zu = state.encode(Side::User, &d.users[*u], Some(&mu));
        let ex = excluded.get(u).cloned().unwrap_or_default();
        let scores: Vec<f64> = (0..d.n_items())
            .map(|i| similarity(&zu, &state.encode(Side::Item, &d.items[i], Some(&mi))))
            .collect();
        let rank = |j: usize| {
            1 + (0..d.n_items())
                .filter(|o| !ex.contains(o))
                .filter(|o| scores[*o] > scores[j] || (scores[*o] == scores[j] && *o < j))
                .count()
        };
        let hits: Vec<usize> = rel.iter().map(|j| rank(*j)).filter(|r| *r <= k).collect();
        recall += hits.len() as f64 / rel.len() as f64;
        let dcg: f64 = hits.iter().map(|r| 1.0 / ((*r + 1) as f64).log2()).sum();
        let idcg: f64 = (1..=k.min(rel.len())).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
        ndcg += dcg / idcg;
    }
    let n = relevant.len();
    (recall / n as f64, ndcg / n as f64, n)
}
