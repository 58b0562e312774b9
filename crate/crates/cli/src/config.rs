//! Parameter resolution and the run record written beside every output.
//!
//! Each subcommand has a parameter struct with defaults. A flat JSON config
//! file overrides the defaults and flags override the file. Unknown keys are
//! usage errors.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use structmiss::Precision;

/// Keys of the config file that are not subcommand parameters.
const GLOBAL_KEYS: [&str; 3] = ["seed", "precision", "threads"];

pub const RUN_CONFIG: &str = "run_config.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<structmiss::Error> for CliError {
    fn from(e: structmiss::Error) -> Self {
        match e {
            structmiss::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn runtime(msg: impl fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

pub fn read_config_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(usage(format!("config {}: expected a JSON object", path.display()))),
        Err(e) => Err(usage(format!("config {}: {e}", path.display()))),
    }
}

#[derive(Clone, Debug)]
pub struct Globals {
    pub seed: u64,
    pub precision: Option<Precision>,
    pub threads: Option<usize>,
    pub out: PathBuf,
}

impl Globals {
    pub fn resolve(
        file: &Map<String, Value>,
        seed: Option<u64>,
        precision: Option<Precision>,
        threads: Option<usize>,
        out: PathBuf,
    ) -> Result<Self, CliError> {
        fn field<T: DeserializeOwned>(file: &Map<String, Value>, key: &str) -> Result<Option<T>, CliError> {
            file.get(key)
                .map(|v| serde_json::from_value(v.clone()).map_err(|e| usage(format!("config key `{key}`: {e}"))))
                .transpose()
        }
        Ok(Self {
            seed: match seed {
                Some(s) => s,
                None => field(file, "seed")?.unwrap_or(0),
            },
            precision: match precision {
                Some(p) => Some(p),
                None => field(file, "precision")?,
            },
            threads: match threads {
                Some(t) => Some(t),
                None => field(file, "threads")?,
            },
            out,
        })
    }
}

/// Defaults, then the config file, then the flags that were given.
pub fn resolve<P, F>(file: &Map<String, Value>, flags: &F) -> Result<P, CliError>
where
    P: Default + Serialize + DeserializeOwned,
    F: Serialize,
{
    let mut merged = match serde_json::to_value(P::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("parameter structs serialize to objects"),
    };
    for (k, v) in file {
        if GLOBAL_KEYS.contains(&k.as_str()) {
            continue;
        }
        if !merged.contains_key(k) {
            return Err(usage(format!("unknown config key `{k}`")));
        }
        merged.insert(k.clone(), v.clone());
    }
    if let Ok(Value::Object(m)) = serde_json::to_value(flags) {
        for (k, v) in m {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("parameters: {e}")))
}

/// Creates the output directory and records the resolved configuration.
pub fn prepare_out<P: Serialize>(g: &Globals, command: &str, params: &P) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&g.out).map_err(|e| runtime(format!("{}: {e}", g.out.display())))?;
    let record = serde_json::json!({
        "command": command,
        "seed": g.seed,
        "precision": g.precision,
        "threads": g.threads,
        "params": params,
    });
    write_json(&g.out.join(RUN_CONFIG), &record)?;
    Ok(g.out.clone())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn required<T: Clone>(v: &Option<T>, name: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| usage(format!("missing required parameter `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Default, Serialize, Deserialize, Debug, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct P {
        a: u32,
        b: Option<String>,
    }

    #[derive(Serialize)]
    struct F {
        a: Option<u32>,
    }

    fn file(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let f = file(serde_json::json!({"a": 3, "b": "x", "seed": 9}));
        let p: P = resolve(&f, &F { a: Some(5) }).unwrap();
        assert_eq!(p, P { a: 5, b: Some("x".into()) });
        let p: P = resolve(&f, &F { a: None }).unwrap();
        assert_eq!(p.a, 3);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let f = file(serde_json::json!({"c": 1}));
        let e = resolve::<P, F>(&f, &F { a: None }).unwrap_err();
        assert_eq!(e.code(), 1);
    }

    #[test]
    fn file_seed_used_without_flag() {
        let f = file(serde_json::json!({"seed": 11}));
        assert_eq!(Globals::resolve(&f, None, None, None, "o".into()).unwrap().seed, 11);
        assert_eq!(Globals::resolve(&f, Some(2), None, None, "o".into()).unwrap().seed, 2);
    }
}
