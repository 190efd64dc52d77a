//! Flat `key = value` config files.
//!
//! Keys are dotted paths into a serde structure (`lambda.cap`,
//! `encoder.hidden_size`). A value is parsed according to the type of the
//! field it replaces; pairs like `context_len = 10,18` fill two-element
//! fields. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Ordered `key -> raw value` pairs.
pub type Pairs = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<Pairs> {
    let mut out = Pairs::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", i + 1))?;
        let k = k.trim();
        if k.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            bail!("line {}: duplicate key {k}", i + 1);
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Pairs> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("in {}", path.display()))
}

fn scalar(raw: &str, like: &Value) -> Result<Value> {
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| anyhow!("expected true/false, got {raw:?}"))?),
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            Value::from(raw.parse::<i64>().map_err(|_| anyhow!("expected an integer, got {raw:?}"))?)
        }
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| anyhow!("expected a number, got {raw:?}"))?;
            serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(|| anyhow!("non-finite number {raw:?}"))?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
            if !items.is_empty() && parts.len() != items.len() {
                bail!("expected {} comma-separated values, got {raw:?}", items.len());
            }
            let template = items.first().cloned().unwrap_or(Value::from(0));
            Value::Array(parts.iter().map(|p| scalar(p, &template)).collect::<Result<_>>()?)
        }
        Value::Null => {
            if raw == "none" {
                Value::Null
            } else if raw.contains(',') {
                scalar(raw, &Value::Array(vec![]))?
            } else {
                scalar(raw, &Value::from(0.0))?
            }
        }
        Value::Object(_) => bail!("cannot assign a scalar to a section"),
    })
}

fn slot<'v>(root: &'v mut Value, key: &str) -> Option<&'v mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    Some(cur)
}

/// Applies the pairs whose keys exist in `base`; returns the rest unconsumed.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, pairs: &Pairs) -> Result<(T, Pairs)> {
    let mut v = serde_json::to_value(base)?;
    let mut rest = Pairs::new();
    for (k, raw) in pairs {
        match slot(&mut v, k) {
            Some(dst) => {
                let parsed = scalar(raw, dst).with_context(|| format!("key {k}"))?;
                *dst = parsed;
            }
            None => {
                rest.insert(k.clone(), raw.clone());
            }
        }
    }
    let out = serde_json::from_value(v).context("config values do not form a valid configuration")?;
    Ok((out, rest))
}

pub fn reject_unknown(rest: &Pairs) -> Result<()> {
    if let Some(k) = rest.keys().next() {
        bail!("unknown config key {k:?}");
    }
    Ok(())
}

/// Renders a structure back into `key = value` lines.
pub fn render<T: Serialize>(value: &T) -> Result<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(|i| i.to_string().trim_matches('"').to_string()).collect();
                out.push(format!("{prefix} = {}", parts.join(",")));
            }
            Value::Null => out.push(format!("{prefix} = none")),
            Value::String(s) => out.push(format!("{prefix} = {s}")),
            other => out.push(format!("{prefix} = {other}")),
        }
    }
    let mut lines = Vec::new();
    walk("", &serde_json::to_value(value)?, &mut lines);
    Ok(lines.join("\n") + "\n")
}
