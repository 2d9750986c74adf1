//! `--config` files: TOML or JSON tables whose keys are long flag names.
//!
//! Top-level keys are global flags; a table named after a subcommand holds
//! that subcommand's flags. The resulting arguments are spliced in before the
//! user's own, so command-line flags win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};

pub const SUBCOMMANDS: [&str; 5] = ["synth", "match", "refine", "reconstruct", "evaluate"];

pub fn load(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => bail!("config {} must be a table", path.display()),
    }
}

fn push_flag(out: &mut Vec<OsString>, key: &str, value: &Value) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    match value {
        Value::Bool(true) => out.push(flag.into()),
        Value::Bool(false) | Value::Null => {}
        Value::String(s) => {
            out.push(flag.into());
            out.push(s.into());
        }
        Value::Number(n) => {
            out.push(flag.into());
            out.push(n.to_string().into());
        }
        Value::Array(_) | Value::Object(_) => bail!("config key {key:?} must be a scalar"),
    }
    Ok(())
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

/// Rewrites `args` so that flags from the config file precede the user's.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let table = load(Path::new(&path))?;
    let sub_pos = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()));
    let mut global = Vec::new();
    for (key, value) in &table {
        if key == "config" || SUBCOMMANDS.contains(&key.as_str()) {
            continue;
        }
        push_flag(&mut global, key, value)?;
    }
    let mut out = vec![args[0].clone()];
    out.extend(global);
    match sub_pos {
        Some(pos) => {
            out.extend(args[1..=pos].iter().cloned());
            let name = args[pos].to_string_lossy().into_owned();
            if let Some(section) = table.get(&name) {
                let Value::Object(section) = section else {
                    bail!("config section [{name}] must be a table");
                };
                for (key, value) in section {
                    push_flag(&mut out, key, value)?;
                }
            }
            out.extend(args[pos + 1..].iter().cloned());
        }
        None => out.extend(args[1..].iter().cloned()),
    }
    Ok(out)
}
