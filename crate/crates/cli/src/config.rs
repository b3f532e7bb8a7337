//! `key = value` config files merged into the argument list.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
/// Keys use the long flag name with or without the leading `--`, and `_` and
/// `-` are interchangeable.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`", i + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

fn config_path(args: &[String]) -> Option<String> {
    let pos = args.iter().position(|a| a == "--config" || a.starts_with("--config="))?;
    match args[pos].strip_prefix("--config=") {
        Some(p) => Some(p.to_string()),
        None => args.get(pos + 1).cloned(),
    }
}

fn given(args: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    args.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
}

/// Appends `--key value` for every config entry whose flag is absent from
/// `args`, so explicit flags take precedence.
pub fn apply_config_file(mut args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    for (key, value) in parse(&text)? {
        if key == "config" || given(&args, &key) {
            continue;
        }
        args.push(format!("--{key}"));
        args.push(value);
    }
    Ok(args)
}
