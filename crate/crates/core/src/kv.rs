//! `key=value` text blocks used for config files and checkpoint headers.
//!
//! Each line holds one field; values are JSON scalars or arrays. Blank lines
//! and lines starting with `#` are ignored when parsing.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Renders a struct as sorted `key=value` lines.
pub fn to_text<T: Serialize>(value: &T) -> Result<String> {
    let Value::Object(map) = serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))? else {
        return Err(Error::Config("only structs can be written as key=value text".into()));
    };
    let mut out = String::new();
    for (k, v) in &map {
        out.push_str(k);
        out.push('=');
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

/// Parses `key=value` lines into an ordered list of pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Overlays `key=value` text onto `base`. Unknown keys are rejected by the
/// target type's deserializer.
pub fn merge<T: Serialize + DeserializeOwned>(base: &T, text: &str) -> Result<T> {
    let Value::Object(mut map) = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))? else {
        return Err(Error::Config("only structs can be read from key=value text".into()));
    };
    apply(&mut map, parse_pairs(text)?);
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
}

fn apply(map: &mut Map<String, Value>, pairs: Vec<(String, String)>) {
    for (k, v) in pairs {
        let value = serde_json::from_str(&v).unwrap_or(Value::String(v));
        map.insert(k, value);
    }
}
