//! Training config resolution: file, then typed flags, then `--set` pairs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use inpaint_core::TrainConfig;
use toml::{Table, Value};

use crate::args::TrainArgs;

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<Table>()
        .with_context(|| format!("parsing config {}", path.display()))
}

/// Overlays `top` onto `base`, merging nested tables key by key.
pub fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Sets a dotted key such as `loss.gamma`, creating tables as needed.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("invalid config key `{key}`");
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for part in path {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("config key `{part}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `KEY=VALUE`; the value is read as a TOML literal and falls back
/// to a bare string (so `mode=det` works unquoted).
pub fn parse_override(pair: &str) -> Result<(String, Value)> {
    let Some((key, raw)) = pair.split_once('=') else {
        bail!("override `{pair}` is not of the form KEY=VALUE");
    };
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Applies the typed train flags, `--seed` and every `--set` to `table`.
pub fn apply_train_flags(table: &mut Table, args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    if let Some(mode) = &args.mode {
        // Rejected here so the message names the mode rather than a serde variant.
        mode.parse::<inpaint_core::Mode>()?;
        table.insert("mode".into(), Value::String(mode.clone()));
    }
    let ints = [
        ("epochs", args.epochs.map(|v| v as i64)),
        ("batch_size", args.batch_size.map(|v| v as i64)),
        ("image_size", args.image_size.map(|v| v as i64)),
        ("checkpoint_interval", args.checkpoint_interval.map(|v| v as i64)),
        ("seed", seed.map(|v| v as i64)),
    ];
    for (key, value) in ints {
        if let Some(v) = value {
            table.insert(key.into(), Value::Integer(v));
        }
    }
    if let Some(lr) = args.learning_rate {
        table.insert("learning_rate".into(), Value::Float(lr));
    }
    for pair in &args.overrides {
        let (key, value) = parse_override(pair)?;
        set_dotted(table, &key, value)?;
    }
    Ok(())
}

/// Deserializes and validates; unknown keys are reported by name.
pub fn to_config(table: &Table) -> Result<TrainConfig> {
    let text = toml::to_string(table).context("serializing config")?;
    Ok(TrainConfig::from_toml_str(&text)?)
}

pub fn config_table(cfg: &TrainConfig) -> Result<Table> {
    Ok(cfg.to_toml_string()?.parse::<Table>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_override_lands_in_nested_table() {
        let mut t = Table::new();
        let (k, v) = parse_override("loss.gamma=1.5").unwrap();
        set_dotted(&mut t, &k, v).unwrap();
        let cfg = to_config(&t).unwrap();
        assert_eq!(cfg.loss.gamma, 1.5);
    }

    #[test]
    fn bare_strings_are_accepted() {
        let (_, v) = parse_override("mode=weight").unwrap();
        assert_eq!(v, Value::String("weight".into()));
        let (_, v) = parse_override("epochs=3").unwrap();
        assert_eq!(v, Value::Integer(3));
    }

    #[test]
    fn unknown_key_is_named() {
        let mut t = Table::new();
        set_dotted(&mut t, "loss.gama", Value::Float(1.0)).unwrap();
        let err = to_config(&t).unwrap_err().to_string();
        assert!(err.contains("gama"), "{err}");
    }

    #[test]
    fn merge_keeps_sibling_keys() {
        let mut base: Table = "a = 1\n[loss]\ngamma = 2.0\nbase_x = 5.0\n".parse().unwrap();
        let top: Table = "[loss]\ngamma = 3.0\n".parse().unwrap();
        merge(&mut base, top);
        assert_eq!(base["loss"]["gamma"].as_float(), Some(3.0));
        assert_eq!(base["loss"]["base_x"].as_float(), Some(5.0));
        assert_eq!(base["a"].as_integer(), Some(1));
    }
}
