//! Namespaced key=value configuration text.
//!
//! One format serves both the `--config` file and the configuration block
//! embedded in checkpoints: one `namespace.key=value` per line, namespaces
//! `model` and `train`, `#` comments and blank lines ignored.  Merging is
//! last-writer-wins over string maps — defaults, then file, then command-line
//! flags — with unknown keys rejected by the typed parsers afterwards, so a
//! misspelled key can never silently fall back to a default.

use std::collections::BTreeMap;

use pixelvae_core::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

/// Splits namespaced text into per-namespace maps.  Duplicate keys and lines
/// outside the two namespaces are config errors.
pub fn split_namespaced(text: &str) -> Result<(KvMap, KvMap)> {
    let mut model = KvMap::new();
    let mut train = KvMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        let (map, bare) = if let Some(bare) = key.strip_prefix("model.") {
            (&mut model, bare)
        } else if let Some(bare) = key.strip_prefix("train.") {
            (&mut train, bare)
        } else {
            return Err(Error::Config(format!(
                "key '{key}' must start with 'model.' or 'train.'"
            )));
        };
        if map.insert(bare.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key '{key}'")));
        }
    }
    Ok((model, train))
}

/// One key=value per line, in map order.
pub fn join_kv(map: &KvMap) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Bare kv text (as produced by the `to_kv` serializers) into a map.
pub fn kv_to_map(text: &str) -> KvMap {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Overlays `over` onto `base`.
pub fn merge(base: &KvMap, over: &KvMap) -> KvMap {
    let mut out = base.clone();
    for (k, v) in over {
        out.insert(k.clone(), v.clone());
    }
    out
}
