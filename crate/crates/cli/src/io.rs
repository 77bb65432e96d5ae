//! Output headers, config resolution and shared parsers.

use std::fs;
use std::path::{Path, PathBuf};

use scalelab::{Error, Family, Law, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn banner(seed: u64) -> String {
    format!("scalelab {VERSION} seed={seed}")
}

/// Prints the resolved configuration of a subcommand to stderr.
pub fn announce<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<()> {
    eprintln!("{command}: seed={seed} config={}", serde_json::to_string(config)?);
    Ok(())
}

/// Reads a JSON config file, or the defaults when no file is given.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Error::Parse { line: e.line(), msg: format!("{}: {e}", p.display()) }),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Accepts a bare law object or any object with a `law` field, such as the
/// output of `fit`.
pub fn read_law(path: &Path) -> Result<Law> {
    let text = read_text(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), msg: format!("{}: {e}", path.display()) })?;
    let inner = value.get("law").cloned().unwrap_or(value);
    let law: Law = serde_json::from_value(inner).map_err(|e| Error::Parse { line: 0, msg: format!("{}: {e}", path.display()) })?;
    law.validate()?;
    Ok(law)
}

pub struct OutDir {
    root: PathBuf,
    seed: u64,
}

impl OutDir {
    pub fn create(root: &Path, seed: u64) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::Data(format!("cannot create output directory {}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), seed })
    }

    /// Writes `body` after a `#` header line; for csv and jsonl files.
    pub fn write_text(&self, name: &str, body: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut bytes = format!("# {}\n", banner(self.seed)).into_bytes();
        bytes.extend_from_slice(body);
        fs::write(&path, bytes)?;
        println!("{}", path.display());
        Ok(path)
    }

    /// Writes a pretty-printed JSON object whose first key is `comment`.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut obj = Map::new();
        obj.insert("comment".into(), Value::String(banner(self.seed)));
        match serde_json::to_value(value)? {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("data".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(obj))?;
        text.push('\n');
        let path = self.root.join(name);
        fs::write(&path, text)?;
        println!("{}", path.display());
        Ok(path)
    }
}

/// A list-valued flag; the newtype keeps clap from splitting it into repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

/// Comma-separated values, or `lo:hi:n` for `n` log-spaced points including
/// both ends.
pub fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    let values = if let Some((lo, rest)) = s.split_once(':') {
        let (hi, n) = rest.split_once(':').ok_or_else(|| format!("expected lo:hi:n, got `{s}`"))?;
        let lo: f64 = lo.trim().parse().map_err(|e| format!("`{lo}`: {e}"))?;
        let hi: f64 = hi.trim().parse().map_err(|e| format!("`{hi}`: {e}"))?;
        let n: usize = n.trim().parse().map_err(|e| format!("`{n}`: {e}"))?;
        if n == 0 || !(lo > 0.0 && hi >= lo) {
            return Err(format!("log grid needs 0 < lo <= hi and n >= 1, got `{s}`"));
        }
        if n == 1 {
            vec![lo]
        } else {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
        }
    } else {
        s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"))).collect::<std::result::Result<_, _>>()?
    };
    if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(format!("grid values must be positive and finite, got `{s}`"));
    }
    Ok(Grid(values))
}

pub fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}
