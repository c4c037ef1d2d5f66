//! The run configuration file: TOML with `${VAR}` environment interpolation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use toml::Value;

use mckd::backends::BackendSpec;
use mckd::corpus::DataFormat;
use mckd::pipeline::RunConfig;

use crate::Usage;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub format: DataFormat,
    pub unlabeled: PathBuf,
    /// Gold-labeled pool that demonstrations are drawn from.
    #[serde(default)]
    pub labeled: Option<PathBuf>,
    /// Gold-labeled evaluation data.
    #[serde(default)]
    pub heldout: Option<PathBuf>,
    #[serde(default = "default_demos")]
    pub demos: usize,
}

fn default_demos() -> usize {
    30
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub run: RunConfig,
    pub teacher: BackendSpec,
    pub student: BackendSpec,
}

/// A parsed config plus the snapshot to store next to the run.
#[derive(Debug)]
pub struct Loaded {
    pub config: ConfigFile,
    /// Un-interpolated, with paths made absolute and literal secrets removed.
    pub snapshot: String,
}

const PATH_KEYS: [&str; 3] = ["unlabeled", "labeled", "heldout"];

fn is_secret_key(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    ["key", "token", "secret", "password", "credential"]
        .iter()
        .any(|s| k.contains(s))
        && !k.ends_with("_env")
}

fn is_reference(s: &str) -> bool {
    let s = s.trim();
    s.starts_with("${") && s.ends_with('}') && s[2..s.len() - 1].chars().all(|c| c.is_alphanumeric() || c == '_')
}

fn redact(v: &mut Value) {
    match v {
        Value::Table(t) => {
            for (k, x) in t.iter_mut() {
                if is_secret_key(k) {
                    if let Value::String(s) = x {
                        if !is_reference(s) {
                            *s = "<redacted>".into();
                        }
                        continue;
                    }
                }
                redact(x);
            }
        }
        Value::Array(a) => a.iter_mut().for_each(redact),
        _ => {}
    }
}

/// Replace `${VAR}` in a string from the environment.
pub fn interpolate_str(s: &str, lookup: &dyn Fn(&str) -> Option<String>) -> anyhow::Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            bail!(Usage(format!("unterminated `${{` in `{s}`")));
        };
        let name = &after[..end];
        match lookup(name) {
            Some(v) => out.push_str(&v),
            None => bail!(Usage(format!("environment variable `{name}` is not set"))),
        }
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate(v: &mut Value, lookup: &dyn Fn(&str) -> Option<String>) -> anyhow::Result<()> {
    match v {
        Value::String(s) => *s = interpolate_str(s, lookup)?,
        Value::Table(t) => {
            for (_, x) in t.iter_mut() {
                interpolate(x, lookup)?;
            }
        }
        Value::Array(a) => {
            for x in a {
                interpolate(x, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn absolutize(v: &mut Value, base: &Path) {
    let Value::Table(root) = v else { return };
    if let Some(Value::String(s)) = root.get_mut("output_dir") {
        if !s.contains("${") {
            *s = base.join(&*s).to_string_lossy().into_owned();
        }
    }
    if let Some(Value::Table(data)) = root.get_mut("data") {
        for key in PATH_KEYS {
            if let Some(Value::String(s)) = data.get_mut(key) {
                if !s.contains("${") {
                    *s = base.join(&*s).to_string_lossy().into_owned();
                }
            }
        }
    }
}

pub fn parse(text: &str, base: &Path, lookup: &dyn Fn(&str) -> Option<String>) -> anyhow::Result<Loaded> {
    let mut raw: Value = toml::from_str(text).map_err(|e| Usage(format!("invalid config: {e}")))?;
    absolutize(&mut raw, base);
    let mut snap = raw.clone();
    redact(&mut snap);
    let snapshot = toml::to_string_pretty(&snap).context("rendering the config snapshot")?;
    interpolate(&mut raw, lookup)?;
    let config: ConfigFile = raw.try_into().map_err(|e| Usage(format!("invalid config: {e}")))?;
    config.run.validate().map_err(|e| Usage(e.to_string()))?;
    config.teacher.validate().map_err(|e| Usage(e.to_string()))?;
    config.student.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(Loaded { config, snapshot })
}

pub fn load(path: &Path) -> anyhow::Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read {}: {e}", path.display())))?;
    let base = path
        .canonicalize()
        .ok()
        .and_then(|p| p.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    parse(&text, &base, &|k| std::env::var(k).ok())
}
