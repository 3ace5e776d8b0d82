//! Semi-synthetic data with planted invariant and spurious fields.
//!
//! Every entity carries invariant fields, which alone decide the true label
//! through a random affinity table, and spurious fields, which never touch the
//! label. A selection filter then keeps candidates more often when some
//! spurious value's parity agrees with the label, which plants a correlation in
//! the biased (train / val / test_iid) pool. The OOD pool is filtered either
//! uniformly or with the two keep probabilities swapped.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{IflError, Result};
use crate::rng::{derive_seed, stream, Rng, Stream};
use crate::schema::{Dataset, LoadOptions, RawEntities, RawInteraction, RawInteractions, Side, Split};

pub const LABEL_NOISE_STD: f64 = 0.1;
const MAX_AFFINITY_ENTRIES: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldGroup {
    pub count: usize,
    pub vocab_size: usize,
}

impl FieldGroup {
    pub const fn new(count: usize, vocab_size: usize) -> Self {
        Self { count, vocab_size }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodMode {
    Uniform,
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub invariant_user_fields: FieldGroup,
    pub spurious_user_fields: FieldGroup,
    pub invariant_item_fields: FieldGroup,
    pub spurious_item_fields: FieldGroup,
    /// Distinct candidate items drawn per user before filtering.
    pub interactions_per_user: usize,
    /// Keep probability when a spurious parity agrees with the label.
    pub bias_strength: f64,
    /// `reversed` swaps the two keep probabilities in the OOD pool.
    pub ood_mode: OodMode,
    /// Probability that a candidate is routed to the OOD pool.
    pub ood_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 300,
            invariant_user_fields: FieldGroup::new(2, 8),
            spurious_user_fields: FieldGroup::new(1, 8),
            invariant_item_fields: FieldGroup::new(2, 8),
            spurious_item_fields: FieldGroup::new(1, 8),
            interactions_per_user: 40,
            bias_strength: 0.9,
            ood_mode: OodMode::Reversed,
            ood_fraction: 0.25,
            seed: 0,
        }
    }
}

impl GenConfig {
    fn groups(&self, side: Side) -> (FieldGroup, FieldGroup) {
        match side {
            Side::User => (self.invariant_user_fields, self.spurious_user_fields),
            Side::Item => (self.invariant_item_fields, self.spurious_item_fields),
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(IflError::Config(m));
        if self.n_users == 0 || self.n_items == 0 {
            return bad("n_users and n_items must be positive".into());
        }
        for side in Side::BOTH {
            let (inv, sp) = self.groups(side);
            if inv.count == 0 {
                return bad(format!("{side} side needs at least one invariant field"));
            }
            if inv.vocab_size == 0 || (sp.count > 0 && sp.vocab_size == 0) {
                return bad(format!("{side} side has a field with vocab_size 0"));
            }
        }
        if self.interactions_per_user == 0 || self.interactions_per_user > self.n_items {
            return bad(format!(
                "interactions_per_user must be in 1..={} (n_items)",
                self.n_items
            ));
        }
        if !(0.5..=1.0).contains(&self.bias_strength) {
            return bad(format!("bias_strength {} outside [0.5, 1]", self.bias_strength));
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) {
            return bad(format!("ood_fraction {} outside [0, 1]", self.ood_fraction));
        }
        let profiles = self.profile_count(Side::User)? as u128 * self.profile_count(Side::Item)? as u128;
        if profiles > MAX_AFFINITY_ENTRIES as u128 {
            return bad(format!("affinity table would have {profiles} entries"));
        }
        Ok(())
    }

    fn profile_count(&self, side: Side) -> Result<usize> {
        let inv = self.groups(side).0;
        (0..inv.count)
            .try_fold(1usize, |acc, _| acc.checked_mul(inv.vocab_size))
            .ok_or_else(|| IflError::Config(format!("too many invariant {side} profiles")))
    }
}

/// Oracle for the planted structure. Field indices refer to schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub invariant_user_field_indices: Vec<usize>,
    pub spurious_user_field_indices: Vec<usize>,
    pub invariant_item_field_indices: Vec<usize>,
    pub spurious_item_field_indices: Vec<usize>,
    pub n_user_profiles: usize,
    pub n_item_profiles: usize,
    /// Row-major `n_user_profiles x n_item_profiles`.
    pub affinity: Vec<f64>,
}

impl GroundTruth {
    pub fn spurious(&self, side: Side) -> &[usize] {
        match side {
            Side::User => &self.spurious_user_field_indices,
            Side::Item => &self.spurious_item_field_indices,
        }
    }

    pub fn invariant(&self, side: Side) -> &[usize] {
        match side {
            Side::User => &self.invariant_user_field_indices,
            Side::Item => &self.invariant_item_field_indices,
        }
    }

    pub fn affinity(&self, user_profile: usize, item_profile: usize) -> f64 {
        self.affinity[user_profile * self.n_item_profiles + item_profile]
    }
}

/// Raw field values (`0..vocab_size`) of one side, invariant fields first.
#[derive(Debug, Clone, PartialEq)]
struct Entities {
    values: Vec<Vec<u32>>,
    n_invariant: usize,
    vocab: u32,
}

impl Entities {
    fn profile(&self, e: usize) -> usize {
        self.values[e][..self.n_invariant]
            .iter()
            .fold(0, |acc, v| acc * self.vocab as usize + *v as usize)
    }

    fn spurious(&self, e: usize) -> &[u32] {
        &self.values[e][self.n_invariant..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    user: usize,
    item: usize,
    label: u8,
}

struct World {
    users: Entities,
    items: Entities,
    truth: GroundTruth,
    candidates: Vec<Candidate>,
}

fn draw_entities(n: usize, inv: FieldGroup, sp: FieldGroup, features: &mut Rng, spurious: &mut Rng) -> Entities {
    let values = (0..n)
        .map(|_| {
            let mut v: Vec<u32> = (0..inv.count)
                .map(|_| features.random_range(0..inv.vocab_size as u32))
                .collect();
            v.extend((0..sp.count).map(|_| spurious.random_range(0..sp.vocab_size as u32)));
            v
        })
        .collect();
    Entities {
        values,
        n_invariant: inv.count,
        vocab: inv.vocab_size as u32,
    }
}

/// Entities, affinity table and labelled candidates. Spurious values come from
/// their own stream seeded by `spurious_seed`, so they cannot influence labels.
fn sample_world(cfg: &GenConfig, spurious_seed: u64) -> Result<World> {
    cfg.check()?;
    let mut features = stream(cfg.seed, Stream::Features);
    let mut spurious = stream(spurious_seed, Stream::Spurious);
    let users = draw_entities(
        cfg.n_users,
        cfg.invariant_user_fields,
        cfg.spurious_user_fields,
        &mut features,
        &mut spurious,
    );
    let items = draw_entities(
        cfg.n_items,
        cfg.invariant_item_fields,
        cfg.spurious_item_fields,
        &mut features,
        &mut spurious,
    );

    let n_up = cfg.profile_count(Side::User)?;
    let n_ip = cfg.profile_count(Side::Item)?;
    let mut aff_rng = stream(cfg.seed, Stream::Affinity);
    let affinity: Vec<f64> = (0..n_up * n_ip).map(|_| aff_rng.random::<f64>()).collect();

    let n_inv_u = cfg.invariant_user_fields.count;
    let n_inv_i = cfg.invariant_item_fields.count;
    let truth = GroundTruth {
        invariant_user_field_indices: (0..n_inv_u).collect(),
        spurious_user_field_indices: (n_inv_u..n_inv_u + cfg.spurious_user_fields.count).collect(),
        invariant_item_field_indices: (0..n_inv_i).collect(),
        spurious_item_field_indices: (n_inv_i..n_inv_i + cfg.spurious_item_fields.count).collect(),
        n_user_profiles: n_up,
        n_item_profiles: n_ip,
        affinity,
    };

    let mut cand_rng = stream(cfg.seed, Stream::Candidates);
    let mut noise_rng = stream(cfg.seed, Stream::LabelNoise);
    let noise = Normal::new(0.0, LABEL_NOISE_STD).expect("valid normal");
    let mut candidates = Vec::with_capacity(cfg.n_users * cfg.interactions_per_user);
    for u in 0..cfg.n_users {
        let mut picks = rand::seq::index::sample(&mut cand_rng, cfg.n_items, cfg.interactions_per_user).into_vec();
        picks.sort_unstable();
        let up = users.profile(u);
        for i in picks {
            let a = truth.affinity(up, items.profile(i));
            let label = u8::from(a + noise.sample(&mut noise_rng) > 0.5);
            candidates.push(Candidate { user: u, item: i, label });
        }
    }
    Ok(World {
        users,
        items,
        truth,
        candidates,
    })
}

fn any_parity_equals(users: &Entities, items: &Entities, c: &Candidate, parity: u32) -> bool {
    users
        .spurious(c.user)
        .iter()
        .chain(items.spurious(c.item))
        .any(|v| v % 2 == parity)
}

fn raw_side(prefix: &str, field_prefix: &str, ents: &Entities, n_spurious: usize) -> RawEntities {
    let n_inv = ents.n_invariant;
    let mut field_names: Vec<String> = (0..n_inv).map(|k| format!("{field_prefix}{k}")).collect();
    field_names.extend((0..n_spurious).map(|k| format!("{field_prefix}{}", n_inv + k)));
    RawEntities {
        source: format!("{prefix}.csv").into(),
        field_names,
        keys: (0..ents.values.len()).map(|e| format!("{}{e}", &prefix[..1])).collect(),
        rows: ents
            .values
            .iter()
            .map(|v| v.iter().map(u32::to_string).collect())
            .collect(),
        lines: (0..ents.values.len() as u64).map(|l| l + 2).collect(),
    }
}

fn generate_inner(cfg: &GenConfig, spurious_seed: u64) -> Result<(Dataset, GroundTruth)> {
    let world = sample_world(cfg, spurious_seed)?;
    let rho = cfg.bias_strength;
    let mut filter = stream(cfg.seed, Stream::Filter);
    let mut rows = Vec::new();
    for c in &world.candidates {
        // fixed draw order per candidate: pool, keep, split
        let to_ood = filter.random::<f64>() < cfg.ood_fraction;
        let keep_u = filter.random::<f64>();
        let split_u = filter.random::<f64>();
        let y = u32::from(c.label);
        let agree = any_parity_equals(&world.users, &world.items, c, y);
        let p_keep = match (to_ood, cfg.ood_mode) {
            (true, OodMode::Uniform) => 0.5,
            (true, OodMode::Reversed) if agree => 1.0 - rho,
            (true, OodMode::Reversed) => rho,
            (false, _) if agree => rho,
            (false, _) => 1.0 - rho,
        };
        if keep_u >= p_keep {
            continue;
        }
        let split = if to_ood {
            Split::TestOod
        } else if split_u < 0.8 {
            Split::Train
        } else if split_u < 0.9 {
            Split::Val
        } else {
            Split::TestIid
        };
        rows.push(RawInteraction {
            user_key: format!("u{}", c.user),
            item_key: format!("i{}", c.item),
            label: c.label,
            split,
            line: rows.len() as u64 + 2,
        });
    }
    let mut positives: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
    for r in &rows {
        *positives.get_mut(&r.split).expect("split") += usize::from(r.label);
    }
    let empty = positives
        .iter()
        .find(|(s, n)| **n == 0 && (**s != Split::TestOod || cfg.ood_fraction > 0.0));
    if let Some((s, _)) = empty {
        return Err(IflError::DegenerateBias(s.as_str()));
    }
    let users = raw_side("users", "uf", &world.users, cfg.spurious_user_fields.count);
    let items = raw_side("items", "if", &world.items, cfg.spurious_item_fields.count);
    let inter = RawInteractions {
        source: "interactions.csv".into(),
        rows,
    };
    let d = Dataset::from_raw(&users, &items, &inter, &LoadOptions { id_as_feature: false })?;
    Ok((d, world.truth))
}

/// Samples a dataset and the oracle describing its planted structure.
pub fn generate(cfg: &GenConfig) -> Result<(Dataset, GroundTruth)> {
    generate_inner(cfg, cfg.seed)
}

#[derive(Debug, Serialize)]
struct GroundTruthFile<'a> {
    ground_truth: &'a GroundTruth,
    config: &'a GenConfig,
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth, cfg: &GenConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(&GroundTruthFile {
        ground_truth: truth,
        config: cfg,
    })?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    #[derive(Deserialize)]
    struct File {
        ground_truth: GroundTruth,
    }
    let f: File = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(f.ground_truth)
}

// ---------------------------------------------------------------------------
// Conditional shift

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CondCell {
    pub positives: usize,
    pub records: usize,
}

impl CondCell {
    /// `None` when the value has no records in the split.
    pub fn p(&self) -> Option<f64> {
        (self.records > 0).then(|| self.positives as f64 / self.records as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub value: String,
    pub cells: BTreeMap<Split, CondCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub side: Side,
    pub field: usize,
    pub field_name: String,
    pub rows: Vec<ShiftRow>,
}

impl ShiftReport {
    /// Largest `|P_a(y=1|v) - P_b(y=1|v)|` over values present in both splits.
    pub fn max_abs_shift(&self, a: Split, b: Split) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| Some((r.cells[&a].p()? - r.cells[&b].p()?).abs()))
            .reduce(f64::max)
    }

    /// Largest `P(y=1|v)` gap between any two values within one split.
    pub fn spread(&self, split: Split) -> Option<f64> {
        let ps: Vec<f64> = self.rows.iter().filter_map(|r| r.cells[&split].p()).collect();
        let max = ps.iter().copied().reduce(f64::max)?;
        let min = ps.iter().copied().reduce(f64::min)?;
        Some(max - min)
    }

    /// `value,<split>_p,<split>_n,...`; absent cells are left empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["value".to_string()];
        for s in Split::ALL {
            header.push(format!("{s}_p"));
            header.push(format!("{s}_n"));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.value.clone()];
            for s in Split::ALL {
                let c = r.cells[&s];
                rec.push(c.p().map(|p| format!("{p:.6}")).unwrap_or_default());
                rec.push(c.records.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `P(y=1 | field value)` per split, by counting.
pub fn shift_report(d: &Dataset, side: Side, field: usize) -> Result<ShiftReport> {
    let fields = d.schema.fields(side);
    let spec = fields.get(field).ok_or_else(|| {
        IflError::Invalid(format!("{side} field {field} out of range (have {})", fields.len()))
    })?;
    let vocab = &d.vocab.side(side)[field];
    let mut rows: Vec<ShiftRow> = vocab
        .iter()
        .map(|v| ShiftRow {
            value: v.clone(),
            cells: Split::ALL.iter().map(|s| (*s, CondCell::default())).collect(),
        })
        .collect();
    for r in &d.interactions {
        let v = d.record_value(r, side, field) as usize;
        let cell = rows[v].cells.get_mut(&r.split).expect("split");
        cell.records += 1;
        cell.positives += usize::from(r.is_positive());
    }
    rows.retain(|r| r.cells.values().any(|c| c.records > 0));
    Ok(ShiftReport {
        side,
        field,
        field_name: spec.name.clone(),
        rows,
    })
}

/// Seed of the `k`-th dataset replica derived from `cfg.seed`.
pub fn replica_seed(cfg: &GenConfig, k: u64) -> u64 {
    derive_seed(cfg.seed, k)
}
