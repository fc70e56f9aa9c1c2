//! Config resolution: file, then `NFEMBED_` environment overrides. Flags
//! are applied by the caller on the typed result, so they win.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use nfembed::Error;

pub const ENV_PREFIX: &str = "NFEMBED_";

/// Reads `path` (or starts from `{}`), applies overrides and deserializes.
///
/// `NFEMBED_LSTM__MAX_EPOCHS=50` sets `lstm.max_epochs`. Values parse as
/// JSON and fall back to plain strings. The prefix is shared by every
/// subcommand, so a variable is only applied when its first segment names a
/// top-level field of `T` or one of `extra`.
pub fn resolve<T>(path: Option<&Path>, env: &[(String, String)], extra: &[&str]) -> Result<T, Error>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !value.is_object() {
        return Err(Error::Config("a config file must hold a JSON object".into()));
    }
    let known = match serde_json::to_value(T::default())? {
        Value::Object(m) => m.keys().cloned().collect::<Vec<_>>(),
        _ => Vec::new(),
    };
    for (key, raw) in env {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let segments: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
        if segments.iter().any(String::is_empty) {
            continue;
        }
        if !known.contains(&segments[0]) && !extra.contains(&segments[0].as_str()) {
            continue;
        }
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        set_path(&mut value, &segments, parsed);
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        Error::Config(format!("field `{field}`: {}", e.inner()))
    })
}

fn set_path(root: &mut Value, segments: &[String], leaf: Value) {
    let mut node = root;
    for seg in &segments[..segments.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(seg.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !node.is_object() {
        *node = Value::Object(Map::new());
    }
    node.as_object_mut()
        .expect("object")
        .insert(segments[segments.len() - 1].clone(), leaf);
}
