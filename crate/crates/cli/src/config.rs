//! Config loading: defaults, then an optional JSON file merged over them, then
//! `--set key.path=value` assignments, then the named flags.

use std::fs;
use std::path::Path;

use albedo_core::pipeline::PipelineConfig;
use albedo_core::Error;
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Recursively overlays `top` onto `base`. Objects merge key by key; anything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

fn assign(root: &mut Value, key: &str, raw: &str) -> CliResult<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(CliError::Usage(format!("--set {key}: `{}` is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Usage(format!("--set {key}: empty key")))
}

pub fn load(path: Option<&Path>, sets: &[String]) -> CliResult<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default()).expect("serializable default");
    let origin = path.map(Path::to_path_buf).unwrap_or_else(|| "<flags>".into());
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let user: Value = serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?;
        if !user.is_object() {
            return Err(Error::format(p, "config must be a JSON object").into());
        }
        merge(&mut value, user);
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
        assign(&mut value, k.trim(), v.trim())?;
    }
    let cfg: PipelineConfig = serde_path_to_error::deserialize(value).map_err(|e| CliError::Config {
        origin: origin.clone(),
        field: e.path().to_string(),
        detail: e.inner().to_string(),
    })?;
    if cfg.version != albedo_core::pipeline::CONFIG_VERSION {
        return Err(CliError::Config {
            origin,
            field: "version".into(),
            detail: format!("unsupported config version {}", cfg.version),
        });
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_merge_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"lambda": 0.25}}"#).unwrap();
        let cfg = load(Some(&p), &["inference.n_samples=3".into()]).unwrap();
        assert_eq!(cfg.train.lambda, 0.25);
        assert_eq!(cfg.train.blur_prob, 0.5);
        assert_eq!(cfg.inference.n_samples, 3);
    }

    #[test]
    fn unknown_and_mistyped_fields_are_named() {
        match load(None, &["train.lamda=1".into()]) {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "train.lamda"),
            other => panic!("unexpected {other:?}"),
        }
        match load(None, &["train.steps=\"many\"".into()]) {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "train.steps"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
