//! Config plumbing shared by the subcommands: file loading, the output-root
//! resolution order, and the echo-before-run rule.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use tessera_core::{Error, Result};

/// Output root: `--out` flag, else `TESSERA_OUT`, else `./tessera-out`.
pub fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("TESSERA_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("tessera-out"))
}

pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("malformed config {}: {e}", p.display())))
        }
    }
}

/// Write the fully resolved config into the run directory before any work
/// happens, so every run records exactly what produced it.
pub fn echo_config<C: Serialize>(out: &Path, name: &str, cfg: &C) -> Result<PathBuf> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("cannot create output dir {}: {e}", out.display())))?;
    let path = out.join(name);
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(&path, text)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {}", path.display())))
    }
}

/// Parse an enum flag value through serde so the CLI accepts exactly the
/// names the config file does.
pub fn parse_enum<E: DeserializeOwned>(value: &str, what: &str) -> Result<E> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|e| Error::Config(format!("bad {what} '{value}': {e}")))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
