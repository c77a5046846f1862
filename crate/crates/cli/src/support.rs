use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use polynet::dsl::{parse_network, preset, PRESET_NAMES};
use polynet::NetworkConfig;
use serde::Serialize;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// An error plus the process exit code it maps to.
pub struct Failure {
    pub code: i32,
    pub err: anyhow::Error,
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.err)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure { code: EXIT_INVALID, err }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    fn invalid(self) -> Outcome<T>;
    fn numeric(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(|e| Failure { code: EXIT_INVALID, err: e.into() })
    }

    fn numeric(self) -> Outcome<T> {
        self.map_err(|e| Failure { code: EXIT_NUMERIC, err: e.into() })
    }
}

pub fn invalid(msg: impl fmt::Display) -> Failure {
    Failure { code: EXIT_INVALID, err: anyhow!("{msg}") }
}

/// Reads `key = value` lines; blank lines and `#` comments are skipped.
pub fn read_config_file(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), n + 1))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            return Err(anyhow!("{}:{}: empty key", path.display(), n + 1));
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Splices `--config FILE` entries into argv right after the subcommand, so
/// any flag given on the command line (which comes later) wins.
pub fn inject_config(args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or_else(|| anyhow!("--config needs a file"))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let entries = read_config_file(Path::new(&path))?;
    // argv[0], then global flags, then the subcommand
    let sub = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|i| i + 2).unwrap_or(rest.len());
    let mut injected = Vec::new();
    for (k, v) in entries {
        match v.as_str() {
            "true" => injected.push(format!("--{k}")),
            "false" => {}
            _ => injected.push(format!("--{k}={v}")),
        }
    }
    rest.splice(sub..sub, injected);
    Ok(rest)
}

/// A preset name, `@file` with DSL text, or DSL text itself.
pub fn resolve_network(arg: &str) -> Outcome<NetworkConfig> {
    if PRESET_NAMES.contains(&arg) {
        return preset(arg).invalid();
    }
    if let Some(path) = arg.strip_prefix('@') {
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}")).invalid()?;
        return parse_network(&text).with_context(|| format!("parsing {path}")).invalid();
    }
    parse_network(arg).context("parsing network").invalid()
}

#[derive(Serialize)]
struct Manifest<'a, O: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    options: &'a O,
    argv: &'a [String],
}

pub fn write_manifest<O: Serialize>(out: &Path, command: &str, seed: u64, options: &O, argv: &[String]) -> Outcome {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).invalid()?;
    let m = Manifest { command, version: env!("CARGO_PKG_VERSION"), seed, options, argv };
    write_json(&out.join("manifest.json"), &m)
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Outcome {
    let text = serde_json::to_string_pretty(value).invalid()?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())).invalid()
}
