//! Run configuration: one JSON document with `data`, `model`, `train` and
//! `eval` sections, plus `key=value` overrides addressed by dot paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{IflError, Result};
use crate::eval::DEFAULT_KS;
use crate::model::ModelConfig;
use crate::schema::{load_dir, Dataset, LoadOptions};
use crate::syndata::{generate, GenConfig, GroundTruth};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `users.csv`, `items.csv` and `interactions.csv`.
    /// When unset, the synthetic generator runs with `synthetic`.
    pub dir: Option<PathBuf>,
    pub id_as_feature: bool,
    pub synthetic: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            id_as_feature: false,
            synthetic: GenConfig::default(),
        }
    }
}

impl DataConfig {
    /// Loads or generates the dataset. Ground truth exists only for generated data.
    pub fn dataset(&self) -> Result<(Dataset, Option<GroundTruth>)> {
        match &self.dir {
            Some(dir) => Ok((
                load_dir(dir, &LoadOptions {
                    id_as_feature: self.id_as_feature,
                })?,
                None,
            )),
            None => {
                let (d, t) = generate(&self.synthetic)?;
                Ok((d, Some(t)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves `key` to a full dot path. A bare key is looked up among the
/// sections' direct fields and must match exactly one.
fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>> {
    if key.contains('.') {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        let mut at = tree;
        for part in &path {
            at = at
                .as_object()
                .and_then(|o| o.get(part))
                .ok_or_else(|| IflError::Config(format!("unknown config key `{key}`")))?;
        }
        return Ok(path);
    }
    let hits: Vec<&String> = tree
        .as_object()
        .into_iter()
        .flatten()
        .filter(|(_, v)| v.as_object().is_some_and(|o| o.contains_key(key)))
        .map(|(section, _)| section)
        .collect();
    match hits.as_slice() {
        [section] => Ok(vec![section.to_string(), key.to_string()]),
        [] => Err(IflError::Config(format!("unknown config key `{key}`"))),
        _ => Err(IflError::Config(format!(
            "ambiguous config key `{key}`; use one of {}",
            hits.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Applies one `key=value` override. The value is read as JSON when it
/// parses, otherwise as a string.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| IflError::Config(format!("override `{assignment}` is not key=value")))?;
    let path = resolve_key(tree, key.trim())?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut at = tree;
    for part in &path {
        at = at.get_mut(part).expect("resolved path");
    }
    *at = value;
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file (if any), then the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| IflError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| IflError::Config(format!("{}: {e}", p.display())))?;
            if !file.is_object() {
                return Err(IflError::Config(format!("{}: expected a JSON object", p.display())));
            }
            merge(&mut tree, file);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| IflError::Config(e.to_string()))?;
        cfg.model.check()?;
        cfg.train.check()?;
        cfg.data.synthetic.check()?;
        if cfg.eval.ks.is_empty() || cfg.eval.ks.contains(&0) {
            return Err(IflError::Config("eval.ks must be non-empty and positive".into()));
        }
        Ok(cfg)
    }

    /// The Ks reported by evaluation, always including the early-stopping K.
    pub fn ks(&self) -> Vec<usize> {
        let mut ks = self.eval.ks.clone();
        if !ks.contains(&self.train.eval_k) {
            ks.push(self.train.eval_k);
        }
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides() {
        let c = RunConfig::load(None, &["train.beta=0".into(), "C=4".into(), "model.hidden=[8]".into()]).unwrap();
        assert_eq!(c.train.beta, 0.0);
        assert_eq!(c.train.n_envs, 4);
        assert_eq!(c.model.hidden, vec![8]);
        let c = RunConfig::load(None, &["train.variant=no_mask".into()]).unwrap();
        assert_eq!(c.train.variant, crate::train::Variant::NoMask);
    }

    #[test]
    fn unknown_and_ambiguous_keys() {
        let err = RunConfig::load(None, &["train.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("train.bogus"), "{err}");
        let err = RunConfig::load(None, &["bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(RunConfig::load(None, &["train.lr=-1".into()]).is_err());
        assert!(RunConfig::load(None, &["gamma_init=1.5".into()]).is_err());
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"beta": 0.5, "epochs": 3}}"#).unwrap();
        let c = RunConfig::load(Some(&p), &["beta=0.25".into()]).unwrap();
        assert_eq!((c.train.beta, c.train.epochs), (0.25, 3));
        std::fs::write(&p, r#"{"train": {"betta": 0.5}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(IflError::Config(_))));
    }
}
