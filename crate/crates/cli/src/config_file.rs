//! `--config FILE` support: every `key = value` line becomes a flag placed
//! right after the subcommand, so explicit flags later on the command line
//! win.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::CommandFactory;

use crate::args::Cli;

pub enum SpliceError {
    Config(String),
    Io(String),
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got '{raw}'", i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push((k.replace('_', "-"), v.to_string()));
    }
    Ok(out)
}

pub fn splice(argv: Vec<OsString>) -> Result<Vec<OsString>, SpliceError> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| SpliceError::Io(format!("{}: {e}", path.display())))?;
    let pairs = parse_pairs(&text).map_err(|e| SpliceError::Config(format!("{}: {e}", path.display())))?;

    let root = Cli::command();
    let names: Vec<String> = root.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let Some(pos) = argv.iter().position(|a| names.iter().any(|n| a.to_string_lossy() == n.as_str())) else {
        // no subcommand: let clap report the usage error
        return Ok(argv);
    };
    let sub_name = argv[pos].to_string_lossy().into_owned();
    let sub = root.find_subcommand(&sub_name).expect("listed above");

    let mut injected = Vec::new();
    for (key, value) in pairs {
        if key == "config" {
            return Err(SpliceError::Config("config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| SpliceError::Config(format!("unknown config key '{key}' for {sub_name}")))?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value.as_str() {
                "true" | "on" | "yes" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "off" | "no" => {}
                other => {
                    return Err(SpliceError::Config(format!("'{key}' expects true/false, got '{other}'")));
                }
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
