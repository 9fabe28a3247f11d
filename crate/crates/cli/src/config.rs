//! Layered run configuration: defaults < file < `ABSA_*` environment <
//! command-line flags.

use std::path::{Path, PathBuf};

use absa_core::finetune::{EncoderSettings, StageKind, TrainConfig, VocabConfig};
use absa_core::model::HeadSpec;
use absa_core::text::InputField;
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "ABSA_";

/// What a task stage learns to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Long/short stance of a VIC write-up.
    Position,
    AspectL1,
    AspectL2,
    Sentiment,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Position => "position",
            Target::AspectL1 => "aspect_l1",
            Target::AspectL2 => "aspect_l2",
            Target::Sentiment => "sentiment",
        }
    }

    pub fn is_regression(self) -> bool {
        self == Target::Sentiment
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Plain text (one document per line) or JSON-lines for LM stages;
    /// VIC JSON-lines for the position task; FiQA otherwise.
    pub train: Option<PathBuf>,
    /// Held-out file. Unset: `valid_frac` of `train`, split by `seed`.
    pub valid: Option<PathBuf>,
    /// 0 with no `valid` file validates on the training set itself.
    pub valid_frac: f64,
    /// L2 -> L1 aspect table, required for FiQA input.
    pub hierarchy: Option<PathBuf>,
    pub field: InputField,
    /// Unset: the command's natural target.
    pub target: Option<Target>,
    /// Abort on the first invalid record instead of skipping it.
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            valid: None,
            valid_frac: 0.1,
            hierarchy: None,
            field: InputField::Sentence,
            target: None,
            strict: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub kind: StageKind,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            kind: StageKind::TargetClassify,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Stage name recorded in provenance. Unset: derived from the command.
    pub name: Option<String>,
    pub input_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub encoder: EncoderSettings,
    pub vocab: VocabConfig,
    pub train: TrainConfig,
    pub head: Option<HeadSpec>,
    pub curve: CurveConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("out"),
            name: None,
            input_checkpoint: None,
            data: DataConfig::default(),
            encoder: EncoderSettings::default(),
            vocab: VocabConfig::default(),
            train: TrainConfig::default(),
            head: None,
            curve: CurveConfig::default(),
        }
    }
}

impl RunConfig {
    /// Hash of the resolved configuration, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        absa_core::finetune::sha256_json(&c)
    }
}

/// Flag-level overrides, applied last.
#[derive(Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// Paths in a config file are relative to the file's directory.
const PATH_KEYS: &[&[&str]] = &[
    &["out_dir"],
    &["input_checkpoint"],
    &["data", "train"],
    &["data", "valid"],
    &["data", "hierarchy"],
];

pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    overrides: &Overrides,
) -> Result<RunConfig> {
    let mut merged = serde_json::to_value(RunConfig::default())?;

    if let Some(path) = file {
        let mut layer = read_file_layer(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for key in PATH_KEYS {
            if let Some(Value::String(p)) = get_mut(&mut layer, key) {
                let joined = base.join(&*p);
                *p = joined.to_string_lossy().into_owned();
            }
        }
        merge(&mut merged, layer);
    }

    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    env.sort();
    for (k, v) in env {
        let key: Vec<String> = k[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if key.iter().any(String::is_empty) {
            bail!("environment variable {k} has an empty key segment");
        }
        set_path(&mut merged, &key, parse_scalar(&v))
            .with_context(|| format!("environment variable {k}"))?;
    }

    for s in &overrides.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got {s:?}"))?;
        let key: Vec<String> = k.trim().split('.').map(str::to_string).collect();
        if key.iter().any(String::is_empty) {
            bail!("--set key {k:?} has an empty segment");
        }
        set_path(&mut merged, &key, parse_scalar(v.trim()))
            .with_context(|| format!("--set {s}"))?;
    }
    if let Some(seed) = overrides.seed {
        merged["seed"] = Value::from(seed);
    }
    if let Some(dir) = &overrides.out_dir {
        merged["out_dir"] = Value::from(dir.to_string_lossy().into_owned());
    }

    serde_json::from_value(merged).context("invalid configuration")
}

fn read_file_layer(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value = if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        let table: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(table)?
    };
    if !value.is_object() {
        bail!("{}: top level must be a table", path.display());
    }
    Ok(value)
}

/// Reads an override value as a TOML scalar or inline table, falling back
/// to a plain string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn get_mut<'a>(v: &'a mut Value, key: &[&str]) -> Option<&'a mut Value> {
    key.iter().try_fold(v, |cur, k| cur.get_mut(*k))
}

fn set_path(root: &mut Value, key: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, k) in key.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Map::new());
            } else {
                bail!("{} is not a table", key[..i].join("."));
            }
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == key.len() {
            obj.insert(k.clone(), value);
            return Ok(());
        }
        cur = obj.entry(k.clone()).or_insert(Value::Null);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_only() {
        let c = resolve(None, vec![], &Overrides::default()).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn precedence_flags_env_file_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 1\n[train]\nlr_max = 0.1\nepochs = 3\nbatch_size = 4\n[data]\ntrain = \"a.txt\"\n",
        )
        .unwrap();
        let o = Overrides {
            sets: vec!["train.epochs=7".into()],
            seed: Some(9),
            out_dir: None,
        };
        let c = resolve(
            Some(&path),
            env(&[
                ("ABSA_TRAIN__LR_MAX", "0.2"),
                ("ABSA_TRAIN__EPOCHS", "5"),
                ("OTHER", "x"),
            ]),
            &o,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.lr_max, 0.2);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.bptt, TrainConfig::default().bptt);
        assert_eq!(c.data.train.unwrap(), dir.path().join("a.txt"));
    }

    #[test]
    fn json_files_and_string_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"data": {"target": "aspect_l1"}}"#).unwrap();
        let o = Overrides {
            sets: vec!["train.unfreeze.strategy=chain_thaw_full".into()],
            ..Overrides::default()
        };
        let c = resolve(Some(&path), vec![], &o).unwrap();
        assert_eq!(c.data.target, Some(Target::AspectL1));
        assert_eq!(
            c.train.unfreeze,
            Some(absa_core::finetune::UnfreezeStrategy::ChainThawFull)
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let o = Overrides {
            sets: vec!["train.lr_maxx=0.1".into()],
            ..Overrides::default()
        };
        assert!(resolve(None, vec![], &o).is_err());
        assert!(resolve(
            None,
            env(&[("ABSA_SEED", "\"abc\"")]),
            &Overrides::default()
        )
        .is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
