//! Transformer parameter accounting for the architecture table.
//!
//! `P = 4 l h^2 + 3 l h h_f + 6 l h + V h`, evaluated in `u128` so no count
//! up to `1e13` can overflow.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// GPT-2 BPE vocabulary size.
pub const GPT2_VOCAB: u64 = 50_257;

/// Relative error above which [`table_check`] flags a row.
pub const TABLE_TOLERANCE: f64 = 5e-3;

/// `floor(8 h / (3 * 64)) * 64`.
pub fn ffn_hidden(d_model: u64) -> Result<u64> {
    let h_f = (8 * u128::from(d_model) / 192 * 64) as u64;
    if h_f == 0 {
        return Err(Error::Domain(format!("d_model = {d_model} rounds to an empty feed-forward layer")));
    }
    Ok(h_f)
}

pub fn param_count(n_layers: u64, d_model: u64, ffw_size: u64, vocab: u64) -> Result<u128> {
    let (l, h, hf, v) = (u128::from(n_layers), u128::from(d_model), u128::from(ffw_size), u128::from(vocab));
    let terms = [
        4u128.checked_mul(l).and_then(|x| x.checked_mul(h)).and_then(|x| x.checked_mul(h)),
        3u128.checked_mul(l).and_then(|x| x.checked_mul(h)).and_then(|x| x.checked_mul(hf)),
        6u128.checked_mul(l).and_then(|x| x.checked_mul(h)),
        v.checked_mul(h),
    ];
    terms
        .iter()
        .try_fold(0u128, |acc, t| t.and_then(|t| acc.checked_add(t)))
        .ok_or_else(|| Error::Numeric(format!("parameter count overflows for l={n_layers} h={d_model} h_f={ffw_size} V={vocab}")))
}

/// One row of the architecture table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub d_model: u64,
    pub n_layers: u64,
    pub ffw_size: u64,
    pub n_heads: u64,
    pub kv_size: u64,
    pub vocab: u64,
}

impl ArchConfig {
    /// `ffw_size` a multiple of 64 and `d_model` a multiple of `n_heads`.
    pub fn validate(&self) -> Result<()> {
        if !self.ffw_size.is_multiple_of(64) {
            return Err(Error::Validation { line: 0, msg: format!("{}: ffw_size {} not divisible by 64", self.name, self.ffw_size) });
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Validation {
                line: 0,
                msg: format!("{}: d_model {} not divisible by n_heads {}", self.name, self.d_model, self.n_heads),
            });
        }
        Ok(())
    }

    pub fn params(&self) -> Result<u128> {
        param_count(self.n_layers, self.d_model, self.ffw_size, self.vocab)
    }
}

/// Architecture row with its published size in millions of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub arch: ArchConfig,
    pub reported_millions: f64,
    /// Published pre-rounding feed-forward width, kept for reference.
    pub origin_ffw_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCheck {
    pub name: String,
    pub computed: u128,
    pub reported_millions: f64,
    pub rel_error: f64,
    pub ffw_matches: bool,
    pub flagged: bool,
    /// Structural invariant the row breaks, if any.
    pub violation: Option<String>,
}

/// Recomputes every row with [`GPT2_VOCAB`], flagging size errors above
/// [`TABLE_TOLERANCE`] and feed-forward widths that disagree with
/// [`ffn_hidden`].
pub fn table_check(rows: &[TableRow]) -> Result<Vec<TableCheck>> {
    rows.iter()
        .map(|row| {
            let a = &row.arch;
            let computed = param_count(a.n_layers, a.d_model, a.ffw_size, GPT2_VOCAB)?;
            let reported = row.reported_millions * 1e6;
            let rel_error = (computed as f64 - reported).abs() / reported;
            let ffw_matches = ffn_hidden(a.d_model).map(|h| h == a.ffw_size).unwrap_or(false);
            Ok(TableCheck {
                name: a.name.clone(),
                computed,
                reported_millions: row.reported_millions,
                rel_error,
                ffw_matches,
                flagged: !(rel_error <= TABLE_TOLERANCE) || !ffw_matches,
                violation: a.validate().err().map(|e| e.to_string()),
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct CsvRow {
    name: String,
    param_m: f64,
    d_model: u64,
    origin_ffw_size: u64,
    ffw_size: u64,
    kv_size: u64,
    n_heads: u64,
    n_layers: u64,
}

/// Reads the table with columns
/// `name,param_m,d_model,origin_ffw_size,ffw_size,kv_size,n_heads,n_layers`.
pub fn read_table<R: Read>(reader: R) -> Result<Vec<TableRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<CsvRow>()
        .enumerate()
        .map(|(i, rec)| {
            let r = rec.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
            Ok(TableRow {
                arch: ArchConfig {
                    name: r.name,
                    d_model: r.d_model,
                    n_layers: r.n_layers,
                    ffw_size: r.ffw_size,
                    n_heads: r.n_heads,
                    kv_size: r.kv_size,
                    vocab: GPT2_VOCAB,
                },
                reported_millions: r.param_m,
                origin_ffw_size: r.origin_ffw_size,
            })
        })
        .collect()
}

pub fn read_table_file(path: &Path) -> Result<Vec<TableRow>> {
    read_table(std::fs::File::open(path)?)
}

/// The published architecture table bundled with the crate.
pub fn bundled_table() -> Vec<TableRow> {
    read_table(include_str!("../fixtures/table3_architectures.csv").as_bytes()).expect("bundled table parses")
}
