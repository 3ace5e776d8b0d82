//! Feature/interaction data model and the CSV dataset format.
//!
//! `users.csv` and `items.csv` carry a header `id,f1,f2,...` and one row per
//! entity; `interactions.csv` carries `user_id,item_id,label,split`. Tokens are
//! categorical and must not contain commas.
//!
//! Vocabularies are built per field from the entities referenced by at least
//! one `train` interaction, in file order. Index 0 of every field is reserved
//! for values never seen there.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IflError, Result};

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const UNKNOWN_INDEX: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::User, Side::Item];

    pub fn as_str(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = IflError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" | "u" => Ok(Side::User),
            "item" | "i" => Ok(Side::Item),
            other => Err(IflError::Invalid(format!("unknown side `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test_iid")]
    TestIid,
    #[serde(rename = "test_ood")]
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestIid, Split::TestOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIid => "test_iid",
            Split::TestOod => "test_ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = IflError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| IflError::UnknownSplit(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub vocab_size: usize,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, vocab_size: usize) -> Self {
        Self {
            name: name.into(),
            vocab_size,
        }
    }
}

/// Ordered user and item fields. `N = user_fields.len()`, `M = item_fields.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub user_fields: Vec<FieldSpec>,
    pub item_fields: Vec<FieldSpec>,
    /// Field 0 of each side is the entity id.
    #[serde(default)]
    pub id_field: bool,
}

impl FeatureSchema {
    pub fn new(user_fields: Vec<FieldSpec>, item_fields: Vec<FieldSpec>) -> Result<Self> {
        let schema = Self {
            user_fields,
            item_fields,
            id_field: false,
        };
        let problems = schema.problems();
        if let Some(first) = problems.into_iter().next() {
            return Err(IflError::Invalid(first));
        }
        Ok(schema)
    }

    /// Uniform schema with `n` user and `m` item fields named `u0..`, `i0..`.
    pub fn uniform(n: usize, m: usize, vocab_size: usize) -> Result<Self> {
        Self::new(
            (0..n).map(|k| FieldSpec::new(format!("u{k}"), vocab_size)).collect(),
            (0..m).map(|k| FieldSpec::new(format!("i{k}"), vocab_size)).collect(),
        )
    }

    pub fn fields(&self, side: Side) -> &[FieldSpec] {
        match side {
            Side::User => &self.user_fields,
            Side::Item => &self.item_fields,
        }
    }

    pub fn n_fields(&self, side: Side) -> usize {
        self.fields(side).len()
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for side in Side::BOTH {
            let fields = self.fields(side);
            if fields.is_empty() {
                out.push(format!("{side} side has no fields"));
            }
            let mut seen = HashMap::new();
            for f in fields {
                if f.vocab_size == 0 {
                    out.push(format!("{side} field `{}` has vocab_size 0", f.name));
                }
                if seen.insert(f.name.as_str(), ()).is_some() {
                    out.push(format!("duplicate {side} field name `{}`", f.name));
                }
            }
        }
        out
    }

    /// Stable hash of field names and vocabulary sizes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for side in Side::BOTH {
            h.update(side.as_str().as_bytes());
            for f in self.fields(side) {
                h.update(f.name.as_bytes());
                h.update([0u8]);
                h.update((f.vocab_size as u64).to_le_bytes());
            }
        }
        h.update([self.id_field as u8]);
        hex16(&h.finalize())
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-field value indices in schema order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<u32>,
}

impl FeatureVector {
    pub fn new(values: Vec<u32>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub label: u8,
    pub split: Split,
}

impl InteractionRecord {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// Tokens of every field, index-aligned with the value indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vocabularies {
    pub user: Vec<Vec<String>>,
    pub item: Vec<Vec<String>>,
}

impl Vocabularies {
    pub fn side(&self, side: Side) -> &[Vec<String>] {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub users: Vec<FeatureVector>,
    pub items: Vec<FeatureVector>,
    pub interactions: Vec<InteractionRecord>,
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
    pub vocab: Vocabularies,
}

impl Dataset {
    pub fn entities(&self, side: Side) -> &[FeatureVector] {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Value index of `field` on `side` for the entity of a record.
    pub fn record_value(&self, rec: &InteractionRecord, side: Side, field: usize) -> u32 {
        match side {
            Side::User => self.users[rec.user].values[field],
            Side::Item => self.items[rec.item].values[field],
        }
    }

    /// Content hash over schema, features and interactions.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.schema.fingerprint().as_bytes());
        for fv in self.users.iter().chain(&self.items) {
            for v in &fv.values {
                h.update(v.to_le_bytes());
            }
            h.update([0xff]);
        }
        for r in &self.interactions {
            h.update((r.user as u64).to_le_bytes());
            h.update((r.item as u64).to_le_bytes());
            h.update([r.label, r.split as u8]);
        }
        hex16(&h.finalize())
    }
}

/// Records of `split` with label 1, in dataset order.
pub fn positives(d: &Dataset, split: Split) -> Vec<InteractionRecord> {
    d.interactions
        .iter()
        .filter(|r| r.split == split && r.is_positive())
        .copied()
        .collect()
}

/// Records of `split` with label other than 1, in dataset order.
pub fn non_positives(d: &Dataset, split: Split) -> Vec<InteractionRecord> {
    d.interactions
        .iter()
        .filter(|r| r.split == split && !r.is_positive())
        .copied()
        .collect()
}

// ---------------------------------------------------------------------------
// Raw token tables and the canonical builder

#[derive(Debug, Clone, Default)]
pub struct RawEntities {
    pub source: PathBuf,
    /// Field names, excluding the id column.
    pub field_names: Vec<String>,
    pub keys: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub label: u8,
    pub split: Split,
    pub line: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RawInteractions {
    pub source: PathBuf,
    pub rows: Vec<RawInteraction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Treat the `id` column as categorical field 0 of its side.
    pub id_as_feature: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            id_as_feature: true,
        }
    }
}

fn index_keys(raw: &RawEntities, side: &'static str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(raw.keys.len());
    for (i, k) in raw.keys.iter().enumerate() {
        if map.insert(k.clone(), i).is_some() {
            return Err(IflError::Malformed {
                file: raw.source.clone(),
                line: raw.lines.get(i).copied().unwrap_or(0),
                msg: format!("duplicate {side} id `{k}`"),
            });
        }
    }
    Ok(map)
}

/// Columns of one side as seen by the vocabulary builder, id column first when it is a feature.
fn side_columns(raw: &RawEntities, id_as_feature: bool) -> (Vec<String>, Vec<Vec<&str>>) {
    let mut names = Vec::new();
    if id_as_feature {
        names.push("id".to_string());
    }
    names.extend(raw.field_names.iter().cloned());
    let rows = raw
        .keys
        .iter()
        .zip(&raw.rows)
        .map(|(k, row)| {
            let mut cols: Vec<&str> = Vec::with_capacity(names.len());
            if id_as_feature {
                cols.push(k.as_str());
            }
            cols.extend(row.iter().map(String::as_str));
            cols
        })
        .collect();
    (names, rows)
}

fn build_side(
    raw: &RawEntities,
    id_as_feature: bool,
    in_train: &[bool],
) -> (Vec<FieldSpec>, Vec<FeatureVector>, Vec<Vec<String>>) {
    let (names, rows) = side_columns(raw, id_as_feature);
    let n_fields = names.len();
    let mut lookup: Vec<HashMap<&str, u32>> = vec![HashMap::new(); n_fields];
    let mut tokens: Vec<Vec<String>> = vec![vec![UNKNOWN_TOKEN.to_string()]; n_fields];
    for (row, _) in rows.iter().zip(in_train).filter(|(_, t)| **t) {
        for (f, tok) in row.iter().enumerate() {
            if !lookup[f].contains_key(tok) {
                let idx = tokens[f].len() as u32;
                lookup[f].insert(tok, idx);
                tokens[f].push(tok.to_string());
            }
        }
    }
    let vectors = rows
        .iter()
        .map(|row| {
            FeatureVector::new(
                row.iter()
                    .enumerate()
                    .map(|(f, tok)| lookup[f].get(tok).copied().unwrap_or(UNKNOWN_INDEX))
                    .collect(),
            )
        })
        .collect();
    let specs = names
        .into_iter()
        .zip(&tokens)
        .map(|(name, t)| FieldSpec::new(name, t.len()))
        .collect();
    (specs, vectors, tokens)
}

impl Dataset {
    /// Canonical construction from token tables; the CSV loader and the
    /// synthetic generator both go through here.
    pub fn from_raw(
        users: &RawEntities,
        items: &RawEntities,
        interactions: &RawInteractions,
        opts: &LoadOptions,
    ) -> Result<Self> {
        if interactions.rows.is_empty() {
            return Err(IflError::NoInteractions);
        }
        let user_idx = index_keys(users, "user")?;
        let item_idx = index_keys(items, "item")?;
        let mut records = Vec::with_capacity(interactions.rows.len());
        let mut user_in_train = vec![false; users.keys.len()];
        let mut item_in_train = vec![false; items.keys.len()];
        for r in &interactions.rows {
            let user = *user_idx
                .get(&r.user_key)
                .ok_or_else(|| IflError::UnknownEntity {
                    side: "user",
                    id: r.user_key.clone(),
                    file: interactions.source.clone(),
                    line: r.line,
                })?;
            let item = *item_idx
                .get(&r.item_key)
                .ok_or_else(|| IflError::UnknownEntity {
                    side: "item",
                    id: r.item_key.clone(),
                    file: interactions.source.clone(),
                    line: r.line,
                })?;
            if r.split == Split::Train {
                user_in_train[user] = true;
                item_in_train[item] = true;
            }
            records.push(InteractionRecord {
                user,
                item,
                label: r.label,
                split: r.split,
            });
        }
        let (uf, uv, ut) = build_side(users, opts.id_as_feature, &user_in_train);
        let (itf, iv, it) = build_side(items, opts.id_as_feature, &item_in_train);
        let mut schema = FeatureSchema::new(uf, itf)?;
        schema.id_field = opts.id_as_feature;
        Ok(Self {
            schema,
            users: uv,
            items: iv,
            interactions: records,
            user_keys: users.keys.clone(),
            item_keys: items.keys.clone(),
            vocab: Vocabularies { user: ut, item: it },
        })
    }

    /// Token tables that rebuild this dataset through [`Dataset::from_raw`].
    pub fn to_raw(&self) -> (RawEntities, RawEntities, RawInteractions) {
        let side_raw = |side: Side| {
            let skip = usize::from(self.schema.id_field);
            let keys = match side {
                Side::User => &self.user_keys,
                Side::Item => &self.item_keys,
            };
            let vocab = self.vocab.side(side);
            RawEntities {
                source: PathBuf::new(),
                field_names: self.schema.fields(side)[skip..]
                    .iter()
                    .map(|f| f.name.clone())
                    .collect(),
                keys: keys.clone(),
                rows: self
                    .entities(side)
                    .iter()
                    .map(|fv| {
                        fv.values[skip..]
                            .iter()
                            .enumerate()
                            .map(|(f, v)| vocab[f + skip][*v as usize].clone())
                            .collect()
                    })
                    .collect(),
                lines: (0..keys.len() as u64).map(|l| l + 2).collect(),
            }
        };
        let inter = RawInteractions {
            source: PathBuf::new(),
            rows: self
                .interactions
                .iter()
                .enumerate()
                .map(|(i, r)| RawInteraction {
                    user_key: self.user_keys[r.user].clone(),
                    item_key: self.item_keys[r.item].clone(),
                    label: r.label,
                    split: r.split,
                    line: i as u64 + 2,
                })
                .collect(),
        };
        (side_raw(Side::User), side_raw(Side::Item), inter)
    }
}

// ---------------------------------------------------------------------------
// CSV IO

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_reader(file))
}

fn malformed(path: &Path, line: u64, msg: impl Into<String>) -> IflError {
    IflError::Malformed {
        file: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_entities(path: &Path) -> Result<RawEntities> {
    let mut rdr = reader(path)?;
    let mut out = RawEntities {
        source: path.to_path_buf(),
        ..Default::default()
    };
    let mut header: Option<usize> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        match header {
            None => {
                if rec.get(0) != Some("id") {
                    return Err(malformed(path, line, "header must start with `id`"));
                }
                out.field_names = rec.iter().skip(1).map(str::to_string).collect();
                header = Some(rec.len());
            }
            Some(width) => {
                if rec.len() != width {
                    return Err(malformed(
                        path,
                        line,
                        format!("expected {width} columns, found {}", rec.len()),
                    ));
                }
                if rec.iter().any(str::is_empty) {
                    return Err(malformed(path, line, "empty token"));
                }
                out.keys.push(rec[0].to_string());
                out.rows.push(rec.iter().skip(1).map(str::to_string).collect());
                out.lines.push(line);
            }
        }
    }
    if header.is_none() {
        return Err(malformed(path, 1, "missing header"));
    }
    Ok(out)
}

const INTERACTION_HEADER: [&str; 4] = ["user_id", "item_id", "label", "split"];

fn read_interactions(path: &Path) -> Result<RawInteractions> {
    let mut rdr = reader(path)?;
    let mut out = RawInteractions {
        source: path.to_path_buf(),
        rows: Vec::new(),
    };
    let mut seen_header = false;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if !seen_header {
            if rec.iter().ne(INTERACTION_HEADER) {
                return Err(malformed(
                    path,
                    line,
                    "header must be `user_id,item_id,label,split`",
                ));
            }
            seen_header = true;
            continue;
        }
        if rec.len() != 4 {
            return Err(malformed(path, line, format!("expected 4 columns, found {}", rec.len())));
        }
        let label = match &rec[2] {
            "0" => 0,
            "1" => 1,
            other => return Err(malformed(path, line, format!("label `{other}` is not 0 or 1"))),
        };
        let split = rec[3].parse::<Split>().map_err(|_| IflError::Malformed {
            file: path.to_path_buf(),
            line,
            msg: format!("unknown split tag `{}`", &rec[3]),
        })?;
        out.rows.push(RawInteraction {
            user_key: rec[0].to_string(),
            item_key: rec[1].to_string(),
            label,
            split,
            line,
        });
    }
    Ok(out)
}

pub fn load_dataset(
    user_path: &Path,
    item_path: &Path,
    interaction_path: &Path,
    opts: &LoadOptions,
) -> Result<Dataset> {
    let users = read_entities(user_path)?;
    let items = read_entities(item_path)?;
    let inter = read_interactions(interaction_path)?;
    Dataset::from_raw(&users, &items, &inter, opts)
}

/// Load `users.csv`, `items.csv`, `interactions.csv` from `dir`.
pub fn load_dir(dir: &Path, opts: &LoadOptions) -> Result<Dataset> {
    load_dataset(
        &dir.join("users.csv"),
        &dir.join("items.csv"),
        &dir.join("interactions.csv"),
        opts,
    )
}

fn write_entities(path: &Path, raw: &RawEntities) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(raw.field_names.iter().cloned());
    w.write_record(&header)?;
    for (k, row) in raw.keys.iter().zip(&raw.rows) {
        w.write_field(k)?;
        for tok in row {
            w.write_field(tok)?;
        }
        w.write_record(None::<&[u8]>)?;
    }
    w.flush()?;
    Ok(())
}

/// Write the three CSV files into `dir`. Reloading with
/// `LoadOptions { id_as_feature: d.schema.id_field }` yields an equal dataset.
pub fn write_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (users, items, inter) = d.to_raw();
    write_entities(&dir.join("users.csv"), &users)?;
    write_entities(&dir.join("items.csv"), &items)?;
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Never)
        .from_path(dir.join("interactions.csv"))?;
    w.write_record(INTERACTION_HEADER)?;
    for r in &inter.rows {
        w.write_record([
            r.user_key.as_str(),
            r.item_key.as_str(),
            if r.label == 1 { "1" } else { "0" },
            r.split.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub records: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
    pub split_counts: BTreeMap<Split, SplitCounts>,
    pub user_vocab_sizes: Vec<usize>,
    pub item_vocab_sizes: Vec<usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(d: &Dataset) -> ValidationReport {
    let mut violations = d.schema.problems();
    let mut warnings = Vec::new();

    for side in Side::BOTH {
        let fields = d.schema.fields(side);
        for (e, fv) in d.entities(side).iter().enumerate() {
            if fv.len() != fields.len() {
                violations.push(format!(
                    "{side} {e}: feature length {} != {}",
                    fv.len(),
                    fields.len()
                ));
                continue;
            }
            for (f, (v, spec)) in fv.values.iter().zip(fields).enumerate() {
                if *v as usize >= spec.vocab_size {
                    violations.push(format!(
                        "{side} {e}: value {v} of field {f} out of vocabulary ({})",
                        spec.vocab_size
                    ));
                }
            }
        }
    }

    let mut split_counts: BTreeMap<Split, SplitCounts> =
        Split::ALL.iter().map(|s| (*s, SplitCounts::default())).collect();
    // per user: (seen in ood, seen elsewhere)
    let mut user_presence = vec![(false, false); d.n_users()];
    for (i, r) in d.interactions.iter().enumerate() {
        if r.user >= d.n_users() {
            violations.push(format!("interaction {i}: dangling user reference {}", r.user));
        }
        if r.item >= d.n_items() {
            violations.push(format!("interaction {i}: dangling item reference {}", r.item));
        }
        if r.label > 1 {
            violations.push(format!("interaction {i}: label {} not in {{0,1}}", r.label));
        }
        let c = split_counts.entry(r.split).or_default();
        c.records += 1;
        c.positives += usize::from(r.is_positive());
        if let Some(p) = user_presence.get_mut(r.user) {
            if r.split == Split::TestOod {
                p.0 = true;
            } else {
                p.1 = true;
            }
        }
    }
    for (u, (ood, other)) in user_presence.iter().enumerate() {
        if *ood && !*other {
            warnings.push(format!("cold-start user in OOD split: {}", d.user_keys.get(u).map_or("?", |s| s)));
        }
    }

    ValidationReport {
        violations,
        warnings,
        split_counts,
        user_vocab_sizes: d.schema.user_fields.iter().map(|f| f.vocab_size).collect(),
        item_vocab_sizes: d.schema.item_fields.iter().map(|f| f.vocab_size).collect(),
    }
}
