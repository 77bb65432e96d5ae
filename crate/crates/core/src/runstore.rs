//! Run records: the canonical data model for one training run, jsonl/csv
//! ingestion, training-compute accounting and Pareto frontiers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model family a run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ar,
    Diffusion,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Ar => f.write_str("ar"),
            Family::Diffusion => f.write_str("diffusion"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ar" | "autoregressive" => Ok(Family::Ar),
            "diffusion" | "mdm" => Ok(Family::Diffusion),
            other => Err(Error::Domain(format!("unknown family `{other}`"))),
        }
    }
}

/// One training run.
///
/// Field order is the canonical jsonl order; `tags` is a sorted map so that
/// serialization is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub family: Family,
    pub n_params: u64,
    pub unique_tokens: u64,
    pub epochs: f64,
    pub tokens_seen: u64,
    pub final_val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_curve: Option<Vec<(u64, f64)>>,
    #[serde(default)]
    pub seed: i64,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

/// `floor(unique_tokens * epochs)`.
pub fn tokens_for(unique_tokens: u64, epochs: f64) -> u64 {
    (unique_tokens as f64 * epochs).floor() as u64
}

impl RunRecord {
    /// Builds a record with `tokens_seen` derived from `unique_tokens` and `epochs`.
    pub fn new(family: Family, n_params: u64, unique_tokens: u64, epochs: f64, final_val_loss: f64) -> Self {
        Self {
            family,
            n_params,
            unique_tokens,
            epochs,
            tokens_seen: tokens_for(unique_tokens, epochs),
            final_val_loss,
            loss_curve: None,
            seed: 0,
            tags: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_params == 0 {
            return Err("n_params must be positive".into());
        }
        if self.unique_tokens == 0 {
            return Err("unique_tokens must be positive".into());
        }
        if !(self.epochs.is_finite() && self.epochs > 0.0) {
            return Err(format!("epochs must be positive, got {}", self.epochs));
        }
        let expected = tokens_for(self.unique_tokens, self.epochs);
        if self.tokens_seen.abs_diff(expected) > 1 {
            return Err(format!(
                "tokens_seen {} disagrees with floor(unique_tokens * epochs) = {}",
                self.tokens_seen, expected
            ));
        }
        if !(self.final_val_loss.is_finite() && self.final_val_loss > 0.0) {
            return Err(format!("final_val_loss must be positive, got {}", self.final_val_loss));
        }
        if let Some(curve) = &self.loss_curve {
            for (i, &(tokens, loss)) in curve.iter().enumerate() {
                if !(loss.is_finite() && loss > 0.0) {
                    return Err(format!("loss_curve[{i}] has non-positive loss {loss}"));
                }
                if i > 0 && tokens <= curve[i - 1].0 {
                    return Err(format!("loss_curve[{i}] tokens_seen not strictly increasing"));
                }
            }
        }
        Ok(())
    }

    /// Training compute under the 6ND accounting.
    pub fn flops(&self) -> Result<f64> {
        compute_flops(self.n_params as f64, self.tokens_seen as f64)
    }
}

/// Input file format for [`ingest_runs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guesses the format from a file extension, defaulting to jsonl.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    family: Option<String>,
    n_params: Option<u64>,
    unique_tokens: Option<u64>,
    epochs: Option<f64>,
    tokens_seen: Option<u64>,
    final_val_loss: Option<f64>,
    loss_curve: Option<Vec<(u64, f64)>>,
    seed: Option<i64>,
    #[serde(default)]
    tags: Option<BTreeMap<String, String>>,
}

impl RawRecord {
    fn into_record(self, line: usize) -> Result<RunRecord> {
        fn need<T>(v: Option<T>, field: &str, line: usize) -> Result<T> {
            v.ok_or_else(|| Error::Parse { line, msg: format!("missing field `{field}`") })
        }
        let family: Family = need(self.family, "family", line)?
            .parse()
            .map_err(|e: Error| Error::Parse { line, msg: e.to_string() })?;
        let n_params = need(self.n_params, "n_params", line)?;
        let unique_tokens = need(self.unique_tokens, "unique_tokens", line)?;
        let epochs = need(self.epochs, "epochs", line)?;
        let final_val_loss = need(self.final_val_loss, "final_val_loss", line)?;
        let rec = RunRecord {
            family,
            n_params,
            unique_tokens,
            epochs,
            tokens_seen: self.tokens_seen.unwrap_or_else(|| tokens_for(unique_tokens, epochs)),
            final_val_loss,
            loss_curve: self.loss_curve,
            seed: self.seed.unwrap_or(0),
            tags: self.tags.unwrap_or_default(),
        };
        rec.validate().map_err(|msg| Error::Validation { line, msg })?;
        Ok(rec)
    }
}

/// Reads and validates run records from `path`.
pub fn ingest_runs(path: &Path, format: Format) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path)?;
    let runs = match format {
        Format::Jsonl => read_jsonl(file)?,
        Format::Csv => read_csv(file)?,
    };
    if runs.is_empty() {
        log::warn!("{}: no run records found", path.display());
    }
    Ok(runs)
}

/// Parses jsonl records. Blank lines and lines starting with `#` are skipped;
/// diagnostics carry 1-based line numbers.
pub fn read_jsonl<R: Read>(reader: R) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(trimmed)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        out.push(raw.into_record(line_no)?);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct RawCsv {
    family: Option<String>,
    n_params: Option<u64>,
    unique_tokens: Option<u64>,
    epochs: Option<f64>,
    tokens_seen: Option<u64>,
    final_val_loss: Option<f64>,
    seed: Option<i64>,
}

/// Parses csv records with a header row. Loss curves and tags are not
/// representable in csv.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (idx, row) in rdr.deserialize::<RawCsv>().enumerate() {
        // header is line 1
        let line_no = idx + 2;
        let row = row.map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let raw = RawRecord {
            family: row.family,
            n_params: row.n_params,
            unique_tokens: row.unique_tokens,
            epochs: row.epochs,
            tokens_seen: row.tokens_seen,
            final_val_loss: row.final_val_loss,
            loss_curve: None,
            seed: row.seed,
            tags: None,
        };
        out.push(raw.into_record(line_no)?);
    }
    Ok(out)
}

/// Writes records in the canonical jsonl form, one per line.
pub fn write_jsonl<W: Write>(mut w: W, runs: &[RunRecord]) -> Result<()> {
    for run in runs {
        serde_json::to_writer(&mut w, run)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl_string(runs: &[RunRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, runs)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

/// Training compute `6 * n_params * tokens_seen`, the same for both families.
pub fn compute_flops(n_params: f64, tokens_seen: f64) -> Result<f64> {
    if !(n_params > 0.0 && tokens_seen > 0.0) || !n_params.is_finite() || !tokens_seen.is_finite() {
        return Err(Error::Domain(format!(
            "flops need positive n_params and tokens_seen, got ({n_params}, {tokens_seen})"
        )));
    }
    Ok(6.0 * n_params * tokens_seen)
}

/// One point on a compute/loss Pareto frontier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub flops: f64,
    pub best_loss: f64,
    /// Index of the winning run in the input slice.
    pub run_index: usize,
}

/// Which losses feed a frontier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrontierSource {
    /// One point per run at its final compute.
    #[default]
    FinalLoss,
    /// Every logged `(tokens_seen, val_loss)` point of every run, falling back
    /// to the final loss for runs without a curve.
    LossCurve,
}

/// Best loss achieved at or below each compute level, for one family.
pub fn pareto_frontier(runs: &[RunRecord], family: Family) -> Result<Vec<ParetoPoint>> {
    pareto_frontier_from(runs, family, FrontierSource::FinalLoss)
}

pub fn pareto_frontier_from(runs: &[RunRecord], family: Family, source: FrontierSource) -> Result<Vec<ParetoPoint>> {
    let mut candidates = Vec::new();
    for (idx, run) in runs.iter().enumerate().filter(|(_, r)| r.family == family) {
        match (&run.loss_curve, source) {
            (Some(curve), FrontierSource::LossCurve) if !curve.is_empty() => {
                for &(tokens, loss) in curve {
                    if tokens > 0 {
                        candidates.push((compute_flops(run.n_params as f64, tokens as f64)?, loss, idx));
                    }
                }
            }
            _ => candidates.push((run.flops()?, run.final_val_loss, idx)),
        }
    }
    if candidates.is_empty() {
        return Err(Error::EmptyFrontier(family.to_string()));
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut frontier: Vec<ParetoPoint> = Vec::new();
    for (flops, loss, run_index) in candidates {
        match frontier.last() {
            // same compute level: sorted ascending by loss, so the first one wins
            Some(last) if last.flops == flops => continue,
            Some(last) if loss >= last.best_loss => continue,
            _ => frontier.push(ParetoPoint { flops, best_loss: loss, run_index }),
        }
    }
    Ok(frontier)
}
