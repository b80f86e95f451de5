//! JSON configuration files with dotted-key overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Parses `key=value`. The value is read as JSON when it parses, otherwise as a string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {arg:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets `path` inside `root`. Every segment must already exist, so typos are reported
/// with the offending key. Optional fields that are currently null accept any value.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let here = segments[..=i].join(".");
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key {here:?}")))?;
        let slot = obj
            .get_mut(*seg)
            .ok_or_else(|| Error::Config(format!("unknown config key {here:?}")))?;
        if i + 1 == segments.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split always yields one segment")
}

fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// Defaults, then the file (if any), then overrides, then strict deserialization.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut value, patch, "")?;
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut value, &k, v)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

/// Overrides as a JSON object, for manifests.
pub fn overrides_json(overrides: &[String]) -> Result<Value> {
    let mut m = Map::new();
    for o in overrides {
        let (k, v) = parse_override(o)?;
        m.insert(k, v);
    }
    Ok(Value::Object(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    #[test]
    fn overrides_apply_and_typo_names_key() {
        let cfg: TrainConfig = resolve(None, &["epochs=2".into(), "optimizer.weight_decay=0.1".into(), "text=wires".into()]).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.optimizer.weight_decay, 0.1);
        assert_eq!(cfg.text, "wires");
        let err = resolve::<TrainConfig>(None, &["optimizer.wd=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("optimizer.wd"), "{err}");
    }

    #[test]
    fn file_then_overrides() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.json");
        fs::write(&path, r#"{"epochs": 7, "data": {"root": "/x"}}"#).unwrap();
        let cfg: TrainConfig = resolve(Some(&path), &["epochs=3".into()]).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.data.root.as_deref(), Some(Path::new("/x")));
        fs::write(&path, r#"{"epoch": 7}"#).unwrap();
        assert!(resolve::<TrainConfig>(Some(&path), &[]).unwrap_err().to_string().contains("epoch"));
    }

    #[test]
    fn null_optional_accepts_value() {
        let cfg: TrainConfig = resolve(None, &["max_steps=10".into()]).unwrap();
        assert_eq!(cfg.max_steps, Some(10));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }
}
