//! JSON run configs with dotted-path flag overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// `--a.b value` / `--a.b=value` pairs, in order.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Config(format!("expected --key, found {arg:?}")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Config(format!("override --{key} has no value")))?;
                (key, v.clone())
            }
        };
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(CliError::Config(format!("malformed override key {key:?}")));
        }
        out.push((key.to_string(), parse_scalar(&raw)));
    }
    Ok(out)
}

/// JSON if it parses, otherwise a bare string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `key` (dot-separated; numeric segments index arrays) inside `root`,
/// creating missing sections.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
        cur = match cur {
            Value::Object(map) => {
                let slot = map.entry(seg.to_string()).or_insert(Value::Null);
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Array(items) => {
                let len = items.len();
                let slot = seg
                    .parse::<usize>()
                    .ok()
                    .and_then(|idx| items.get_mut(idx))
                    .ok_or_else(|| {
                        CliError::Config(format!(
                            "{key}: {seg:?} is not an index into a list of {len}"
                        ))
                    })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::Config(format!(
                    "{key}: {} is not a section",
                    segments[..i].join(".")
                )))
            }
        };
    }
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Loads `path` (or an empty object), applies overrides and deserializes,
/// naming the offending key on failure.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = match path {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => Value::Object(Map::new()),
    };
    for (key, v) in parse_overrides(overrides)? {
        set_path(&mut value, &key, v)?;
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let at = e.path().to_string();
        if at == "." {
            CliError::Config(e.inner().to_string())
        } else {
            CliError::Config(format!("{at}: {}", e.inner()))
        }
    })
}

/// Makes a relative path absolute against the working directory so a
/// resolved config stays valid from anywhere.
pub fn absolute(path: &mut PathBuf) -> Result<()> {
    if path.is_relative() {
        *path = std::path::absolute(&*path).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        lr: f64,
        name: String,
    }

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        seed: u64,
        train: Inner,
        stages: Vec<u32>,
    }

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn overrides_parse_values() {
        let o = parse_overrides(&args(&[
            "--train.lr",
            "1e-3",
            "--train.name=abc",
            "--x",
            "true",
        ]))
        .unwrap();
        assert_eq!(o[0], ("train.lr".into(), json!(1e-3)));
        assert_eq!(o[1], ("train.name".into(), json!("abc")));
        assert_eq!(o[2], ("x".into(), json!(true)));
        assert!(parse_overrides(&args(&["--dangling"])).is_err());
        assert!(parse_overrides(&args(&["positional"])).is_err());
        assert!(parse_overrides(&args(&["--a..b", "1"])).is_err());
    }

    #[test]
    fn set_path_walks_objects_and_lists() {
        let mut v = json!({"train": {"lr": 1.0}, "stages": [1, 2]});
        set_path(&mut v, "train.lr", json!(0.5)).unwrap();
        set_path(&mut v, "stages.1", json!(7)).unwrap();
        set_path(&mut v, "new.deep.key", json!("s")).unwrap();
        assert_eq!(
            v,
            json!({"train": {"lr": 0.5}, "stages": [1, 7], "new": {"deep": {"key": "s"}}})
        );
        assert!(set_path(&mut v, "stages.5", json!(1)).is_err());
        assert!(set_path(&mut v, "train.lr.x", json!(1)).is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(
            &p,
            r#"{"seed": 1, "train": {"lr": 1.0, "name": "a"}, "stages": []}"#,
        )
        .unwrap();
        let ok: Outer = load(Some(&p), &args(&["--train.lr", "2"])).unwrap();
        assert_eq!(ok.train.lr, 2.0);
        let err = load::<Outer>(Some(&p), &args(&["--train.lrr", "2"])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train") && msg.contains("lrr"), "{msg}");
        assert_eq!(err.exit_code(), 1);
        let missing = load::<Outer>(Some(&dir.path().join("nope.json")), &[]).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
        assert!(missing.to_string().contains("nope.json"));
    }
}
