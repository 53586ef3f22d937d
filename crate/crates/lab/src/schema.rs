//! Typed parameter tables for experiment presets.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamType {
    /// Finite number in `[min, max]`, or `(min, max]` when `open_min`.
    Float { min: f64, max: f64, open_min: bool },
    /// Integer `>= min`.
    Int { min: u64 },
    Bool,
    FloatList { min: f64, open_min: bool, min_len: usize },
    IntList { min: u64, min_len: usize },
    Choice(&'static [&'static str]),
    ChoiceList { options: &'static [&'static str], min_len: usize },
}

impl ParamType {
    pub const fn positive() -> Self {
        ParamType::Float { min: 0.0, max: f64::INFINITY, open_min: true }
    }

    pub const fn nonnegative() -> Self {
        ParamType::Float { min: 0.0, max: f64::INFINITY, open_min: false }
    }

    /// Discount factors live in `[0, 1)`; the upper bound is checked separately.
    pub const fn discount() -> Self {
        ParamType::Float { min: 0.0, max: 1.0, open_min: false }
    }

    pub const fn unit() -> Self {
        ParamType::Float { min: 0.0, max: 1.0, open_min: false }
    }

    pub const fn count() -> Self {
        ParamType::Int { min: 1 }
    }

    fn describe(&self) -> String {
        match self {
            ParamType::Float { min, max, open_min } => {
                format!("a number in {}{min}, {max}]", if *open_min { "(" } else { "[" })
            }
            ParamType::Int { min } => format!("an integer >= {min}"),
            ParamType::Bool => "a boolean".into(),
            ParamType::FloatList { min, open_min, min_len } => {
                format!("a list of at least {min_len} numbers {} {min}", if *open_min { ">" } else { ">=" })
            }
            ParamType::IntList { min, min_len } => format!("a list of at least {min_len} integers >= {min}"),
            ParamType::Choice(options) => format!("one of {}", options.join(", ")),
            ParamType::ChoiceList { options, min_len } => {
                format!("a list of at least {min_len} distinct entries from {}", options.join(", "))
            }
        }
    }

    /// Numbers in float fields are stored as floats so `1` and `1.0`
    /// hash alike.
    fn normalize(&self, v: &Value) -> Value {
        match self {
            ParamType::Float { .. } => Value::from(v.as_f64().expect("accepted")),
            ParamType::FloatList { .. } => {
                Value::Array(v.as_array().expect("accepted").iter().map(|x| Value::from(x.as_f64().expect("accepted"))).collect())
            }
            _ => v.clone(),
        }
    }

    fn float_ok(x: f64, min: f64, open_min: bool) -> bool {
        x.is_finite() && if open_min { x > min } else { x >= min }
    }

    fn accepts(&self, v: &Value) -> bool {
        match *self {
            ParamType::Float { min, max, open_min } => {
                v.as_f64().is_some_and(|x| Self::float_ok(x, min, open_min) && x <= max)
            }
            ParamType::Int { min } => v.as_u64().is_some_and(|x| x >= min),
            ParamType::Bool => v.is_boolean(),
            ParamType::FloatList { min, open_min, min_len } => v.as_array().is_some_and(|a| {
                a.len() >= min_len && a.iter().all(|x| x.as_f64().is_some_and(|x| Self::float_ok(x, min, open_min)))
            }),
            ParamType::IntList { min, min_len } => v
                .as_array()
                .is_some_and(|a| a.len() >= min_len && a.iter().all(|x| x.as_u64().is_some_and(|x| x >= min))),
            ParamType::Choice(options) => v.as_str().is_some_and(|s| options.contains(&s)),
            ParamType::ChoiceList { options, min_len } => v.as_array().is_some_and(|a| {
                let names: Option<Vec<&str>> = a.iter().map(Value::as_str).collect();
                names.is_some_and(|n| {
                    n.len() >= min_len
                        && n.iter().all(|s| options.contains(s))
                        && n.iter().enumerate().all(|(i, s)| !n[..i].contains(s))
                })
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: &'static str,
    pub ty: ParamType,
    pub default: Value,
    pub doc: &'static str,
}

pub fn param(name: &'static str, ty: ParamType, default: impl Into<Value>, doc: &'static str) -> ParamSpec {
    ParamSpec { name, ty, default: default.into(), doc }
}

/// Cross-field rule run after every field type-checks.
pub type Rule = fn(&Params) -> Vec<String>;

#[derive(Clone, Debug)]
pub struct Schema {
    pub params: Vec<ParamSpec>,
    pub rules: Vec<Rule>,
}

impl Schema {
    pub fn defaults(&self) -> Params {
        Params(self.params.iter().map(|p| (p.name.to_string(), p.default.clone())).collect())
    }

    /// Merges `given` over the defaults, collecting every violation.
    pub fn resolve(&self, given: &Map<String, Value>) -> std::result::Result<Params, Vec<String>> {
        let mut errors = Vec::new();
        for key in given.keys() {
            if !self.params.iter().any(|p| p.name == key) {
                errors.push(format!("parameters.{key}: unknown parameter"));
            }
        }
        let mut resolved = BTreeMap::new();
        for p in &self.params {
            let v = given.get(p.name).unwrap_or(&p.default);
            if p.ty.accepts(v) {
                resolved.insert(p.name.to_string(), p.ty.normalize(v));
            } else {
                errors.push(format!("parameters.{}: expected {}, got {v}", p.name, p.ty.describe()));
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        let params = Params(resolved);
        for rule in &self.rules {
            errors.extend(rule(&params));
        }
        if errors.is_empty() {
            Ok(params)
        } else {
            Err(errors)
        }
    }
}

/// Resolved, type-checked parameters. Getters panic only on names the
/// schema does not declare, which is a programming error.
#[derive(Clone, Debug, PartialEq)]
pub struct Params(BTreeMap<String, Value>);

impl Params {
    fn get(&self, name: &str) -> &Value {
        self.0.get(name).unwrap_or_else(|| panic!("parameter {name} is not in the schema"))
    }

    pub fn f64(&self, name: &str) -> f64 {
        self.get(name).as_f64().expect("validated number")
    }

    pub fn usize(&self, name: &str) -> usize {
        self.get(name).as_u64().expect("validated integer") as usize
    }

    pub fn u64(&self, name: &str) -> u64 {
        self.get(name).as_u64().expect("validated integer")
    }

    pub fn bool(&self, name: &str) -> bool {
        self.get(name).as_bool().expect("validated boolean")
    }

    pub fn str(&self, name: &str) -> &str {
        self.get(name).as_str().expect("validated string")
    }

    pub fn str_list(&self, name: &str) -> Vec<String> {
        self.get(name)
            .as_array()
            .expect("validated list")
            .iter()
            .map(|v| v.as_str().expect("validated").to_string())
            .collect()
    }

    pub fn f64_list(&self, name: &str) -> Vec<f64> {
        self.get(name).as_array().expect("validated list").iter().map(|v| v.as_f64().expect("validated")).collect()
    }

    pub fn usize_list(&self, name: &str) -> Vec<usize> {
        self.get(name)
            .as_array()
            .expect("validated list")
            .iter()
            .map(|v| v.as_u64().expect("validated") as usize)
            .collect()
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.0.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    }
}

/// Violation unless every discount in `names` is strictly below one.
pub fn discounts_below_one(p: &Params, names: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for &name in names {
        let values = match p.get(name) {
            Value::Array(_) => p.f64_list(name),
            _ => vec![p.f64(name)],
        };
        if values.iter().any(|&g| g >= 1.0) {
            out.push(format!("parameters.{name}: discount must be below 1"));
        }
    }
    out
}
