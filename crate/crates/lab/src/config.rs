//! Experiment configs: JSON documents, dotted overrides and content hashes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::experiments;
use crate::schema::Params;

/// Environment variable naming the default output root.
pub const OUTPUT_DIR_ENV: &str = "TDLAB_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_ROOT: &str = "tdlab-runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Figure1Mountaincar,
    KernelCircle,
    KernelGeneralization,
    RankEvolution,
    SecondOrderScaling,
    DistillCompare,
    FourierTrajectory,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Figure1Mountaincar,
        Experiment::KernelCircle,
        Experiment::KernelGeneralization,
        Experiment::RankEvolution,
        Experiment::SecondOrderScaling,
        Experiment::DistillCompare,
        Experiment::FourierTrajectory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Figure1Mountaincar => "figure1-mountaincar",
            Experiment::KernelCircle => "kernel-circle",
            Experiment::KernelGeneralization => "kernel-generalization",
            Experiment::RankEvolution => "rank-evolution",
            Experiment::SecondOrderScaling => "second-order-scaling",
            Experiment::DistillCompare => "distill-compare",
            Experiment::FourierTrajectory => "fourier-trajectory",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

/// A validated config with every parameter resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub parameters: Params,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

const TOP_LEVEL: [&str; 4] = ["experiment", "parameters", "seeds", "output_dir"];

impl ExperimentConfig {
    /// Validates a raw JSON document, reporting every violation at once.
    pub fn from_value(doc: &Value) -> Result<Self> {
        let Some(obj) = doc.as_object() else {
            return Err(LabError::Config(vec!["config must be a JSON object".into()]));
        };
        let mut errors = Vec::new();
        for key in obj.keys() {
            if !TOP_LEVEL.contains(&key.as_str()) {
                errors.push(format!("{key}: unknown field"));
            }
        }
        let experiment = match obj.get("experiment") {
            None => {
                errors.push("experiment: missing".into());
                None
            }
            Some(v) => match v.as_str().map(Experiment::from_str) {
                Some(Ok(e)) => Some(e),
                Some(Err(msg)) => {
                    errors.push(format!("experiment: {msg}"));
                    None
                }
                None => {
                    errors.push(format!("experiment: expected a string, got {v}"));
                    None
                }
            },
        };
        let seeds = match obj.get("seeds") {
            None => {
                errors.push("seeds: missing".into());
                Vec::new()
            }
            Some(v) => match v.as_array().map(|a| a.iter().map(Value::as_u64).collect::<Option<Vec<u64>>>()) {
                Some(Some(s)) if s.is_empty() => {
                    errors.push("seeds: must not be empty".into());
                    s
                }
                Some(Some(s)) => s,
                _ => {
                    errors.push(format!("seeds: expected a list of nonnegative integers, got {v}"));
                    Vec::new()
                }
            },
        };
        let empty = Map::new();
        let given = match obj.get("parameters") {
            None => &empty,
            Some(Value::Object(m)) => m,
            Some(v) => {
                errors.push(format!("parameters: expected an object, got {v}"));
                &empty
            }
        };
        let output_dir = match obj.get("output_dir") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if !s.is_empty() => Some(PathBuf::from(s)),
            Some(v) => {
                errors.push(format!("output_dir: expected a nonempty path string, got {v}"));
                None
            }
        };
        let parameters = experiment.and_then(|e| match experiments::schema(e).resolve(given) {
            Ok(p) => Some(p),
            Err(errs) => {
                errors.extend(errs);
                None
            }
        });
        match (experiment, parameters) {
            (Some(experiment), Some(parameters)) if errors.is_empty() => {
                Ok(ExperimentConfig { experiment, parameters, seeds, output_dir })
            }
            _ => Err(LabError::Config(errors)),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| LabError::Config(vec![format!("not valid JSON: {e}")]))?;
        Self::from_value(&doc)
    }

    /// Reads a config file, applying `key.path=value` overrides first.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut doc: Value =
            serde_json::from_str(&text).map_err(|e| LabError::Json { path: path.to_path_buf(), source: e })?;
        let errors: Vec<String> = overrides.iter().filter_map(|o| apply_override(&mut doc, o).err()).collect();
        if !errors.is_empty() {
            return Err(LabError::Config(errors));
        }
        Self::from_value(&doc)
    }

    /// Default config of a preset.
    pub fn preset(experiment: Experiment) -> Self {
        ExperimentConfig {
            experiment,
            parameters: experiments::schema(experiment).defaults(),
            seeds: experiments::default_seeds(experiment),
            output_dir: None,
        }
    }

    /// The hashed content: everything that determines the artifacts.
    /// `output_dir` is excluded since it only decides where they land.
    pub fn canonical(&self) -> Value {
        json!({
            "experiment": self.experiment.name(),
            "parameters": self.parameters.to_json(),
            "seeds": self.seeds,
        })
    }

    pub fn to_json(&self) -> Value {
        let mut v = self.canonical();
        if let Some(dir) = &self.output_dir {
            v["output_dir"] = json!(dir);
        }
        v
    }

    /// Hex sha256 of the canonical JSON (object keys sorted).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.canonical()).expect("JSON values always serialize");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `output_dir` if set, else `<root>/<experiment>-<hash prefix>`.
    pub fn resolve_output_dir(&self, root: Option<&Path>) -> PathBuf {
        match &self.output_dir {
            Some(dir) => dir.clone(),
            None => {
                let root = root.map(Path::to_path_buf).unwrap_or_else(default_output_root);
                root.join(format!("{}-{}", self.experiment.name(), &self.hash()[..12]))
            }
        }
    }
}

/// `$TDLAB_OUTPUT_DIR`, falling back to `tdlab-runs`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Sets a leaf addressed by a dotted path, e.g. `parameters.discount=0.5`.
/// The value is parsed as JSON, falling back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> std::result::Result<(), String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override {assignment:?}: expected key.path=value"))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("override {assignment:?}: empty path segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for (depth, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(format!("override {assignment:?}: {} is not an object", keys[..depth].join(".")));
        };
        if depth + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("paths have at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
            assert_eq!(serde_json::to_value(e).unwrap(), json!(e.name()));
        }
    }

    #[test]
    fn empty_seeds_rejected() {
        let err = ExperimentConfig::from_json(r#"{"experiment": "kernel-circle", "seeds": []}"#).unwrap_err();
        assert!(err.to_string().contains("seeds: must not be empty"), "{err}");
    }

    #[test]
    fn hash_ignores_key_order_and_output_dir() {
        let a = ExperimentConfig::from_json(
            r#"{"experiment": "kernel-circle", "seeds": [1, 2], "parameters": {"td_steps": 50, "mc_steps": 300}}"#,
        )
        .unwrap();
        let b = ExperimentConfig::from_json(
            r#"{"output_dir": "x", "parameters": {"mc_steps": 300, "td_steps": 50}, "seeds": [1, 2], "experiment": "kernel-circle"}"#,
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_json(r#"{"experiment": "kernel-circle", "seeds": [1, 3]}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn explicit_defaults_hash_like_omitted_ones() {
        let a = ExperimentConfig::from_json(r#"{"experiment": "kernel-circle", "seeds": [0]}"#).unwrap();
        let b = ExperimentConfig::from_json(r#"{"experiment": "kernel-circle", "seeds": [0], "parameters": {"n_states": 50}}"#)
            .unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn overrides_set_nested_leaves() {
        let mut doc = json!({"experiment": "kernel-circle", "seeds": [0]});
        apply_override(&mut doc, "parameters.td_steps=7").unwrap();
        apply_override(&mut doc, "output_dir=out/run").unwrap();
        apply_override(&mut doc, "seeds=[4,5]").unwrap();
        assert_eq!(doc["parameters"]["td_steps"], json!(7));
        assert_eq!(doc["output_dir"], json!("out/run"));
        assert_eq!(doc["seeds"], json!([4, 5]));
        assert!(apply_override(&mut doc, "seeds.x=1").is_err());
        assert!(apply_override(&mut doc, "no-equals").is_err());
    }

    #[test]
    fn aggregated_errors_list_everything() {
        let err = ExperimentConfig::from_json(
            r#"{"experiment": "kernel-circle", "seeds": "all", "parameters": {"td_steps": "many", "bogus": 1}, "colour": 2}"#,
        )
        .unwrap_err();
        let LabError::Config(errs) = err else { panic!("expected a config error") };
        assert_eq!(errs.len(), 4, "{errs:?}");
    }

    #[test]
    fn output_dir_defaults_under_root() {
        let cfg = ExperimentConfig::preset(Experiment::KernelCircle);
        let dir = cfg.resolve_output_dir(Some(Path::new("/tmp/root")));
        assert!(dir.starts_with("/tmp/root"));
        assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("kernel-circle-"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hash_ignores_key_order_and_number_spelling(
                discount in 0.0f64..0.99,
                hidden in 1u64..64,
                seeds in proptest::collection::vec(0u64..1000, 1..6),
                reversed in any::<bool>(),
            ) {
                let mut params = Map::new();
                let entries = [("discount", json!(discount)), ("hidden", json!(hidden)), ("total_time", json!(1))];
                let order: Vec<_> = if reversed { entries.iter().rev().collect() } else { entries.iter().collect() };
                for (k, v) in order {
                    params.insert(k.to_string(), v.clone());
                }
                let a = ExperimentConfig::from_value(&json!({
                    "experiment": "second-order-scaling", "parameters": params, "seeds": seeds,
                })).unwrap();
                let b = ExperimentConfig::from_value(&json!({
                    "output_dir": "elsewhere", "seeds": seeds, "experiment": "second-order-scaling",
                    "parameters": {"total_time": 1.0, "hidden": hidden, "discount": discount},
                })).unwrap();
                prop_assert_eq!(a.hash(), b.hash());

                let mut c = a.clone();
                c.seeds.push(1000);
                prop_assert_ne!(a.hash(), c.hash());
            }
        }
    }
}
