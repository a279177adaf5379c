//! Configuration documents: a TOML file naming a profile and overriding any
//! subset of its keys. Keys the profile does not have are rejected.

use std::path::Path;

use datamix::pipeline::{PipelineConfig, CONFIG_VERSION};
use datamix::{Error, Result};
use toml::Value;

/// Parses a configuration document into the fully resolved config.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
    let version = match doc.get("version") {
        Some(Value::Integer(v)) => *v,
        Some(_) => return Err(Error::Config("version must be an integer".into())),
        None => return Err(Error::Config("missing required key `version`".into())),
    };
    if version != CONFIG_VERSION as i64 {
        return Err(Error::Config(format!(
            "config version {version} is not supported (expected {CONFIG_VERSION})"
        )));
    }
    let profile = match doc.get("profile") {
        Some(Value::String(p)) => p.clone(),
        Some(_) => return Err(Error::Config("profile must be a string".into())),
        None => "desk".to_string(),
    };
    let base = PipelineConfig::profile(&profile)?;
    let mut merged = Value::try_from(&base).map_err(|e| Error::Config(format!("profile {profile}: {e}")))?;
    merge(&mut merged, Value::Table(doc), "")?;
    let cfg: PipelineConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// The resolved config as a TOML document that reloads to the same value.
pub fn render_config(cfg: &PipelineConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("render config: {e}")))
}

/// Overlays `over` onto `base`. Tables merge key by key; anything else
/// replaces the base value, which must exist and have the same kind.
fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            let same_kind = matches!(
                (&*slot, &v),
                (Value::Integer(_), Value::Integer(_))
                    | (Value::Float(_), Value::Float(_) | Value::Integer(_))
                    | (Value::String(_), Value::String(_))
                    | (Value::Boolean(_), Value::Boolean(_))
                    | (Value::Array(_), Value::Array(_))
            );
            if !same_kind {
                return Err(Error::Config(format!("`{path}` has the wrong type")));
            }
            *slot = match (&*slot, v) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            Ok(())
        }
    }
}
