//! CSV ingestion and persistence of chains and fit summaries.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ColumnScaling, Dataset, ModelSpec, ParamState, PriorHyper};
use crate::samplers::{BlockRate, ChainOutput, McmcConfig, SupportSummary};

pub const CHAIN_FORMAT: &str = "tbs-chain";
pub const CHAIN_VERSION: u32 = 1;
pub const SUMMARY_VERSION: u32 = 1;

/// A dataset read from CSV and the data records that were dropped for missing values.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub data: Dataset,
    /// 1-based data record numbers (the header is not counted).
    pub dropped_rows: Vec<usize>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "N/A" | "NaN" | "nan" | ".")
}

pub fn ingest_csv(path: &Path, response: &str, standardize: &[String]) -> Result<Ingested> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_reader(file, response, standardize)
}

/// Reads a header-first CSV. Every column other than `response` becomes a
/// covariate, in header order. Rows with a missing cell are dropped; the
/// listed columns are then centred and scaled to unit sample SD.
pub fn ingest_reader<R: Read>(reader: R, response: &str, standardize: &[String]) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let resp_col = header
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| Error::Invalid(format!("response column `{response}` not in header")))?;
    if header.len() < 2 {
        return Err(Error::Invalid("need a response and at least one covariate column".into()));
    }
    for s in standardize {
        if !header.contains(s) {
            return Err(Error::Invalid(format!("standardize column `{s}` not in header")));
        }
    }

    let width = header.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); width];
    let mut records = Vec::new();
    let mut dropped_rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        if rec.iter().any(is_missing) {
            dropped_rows.push(row);
            continue;
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: header[j].clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: header[j].clone(),
                    message: format!("`{cell}` is not finite"),
                });
            }
            cols[j].push(v);
        }
        records.push(row);
    }
    if records.len() < 2 {
        return Err(Error::Invalid(format!("only {} complete rows", records.len())));
    }

    let mut scaling = Vec::new();
    for (j, name) in header.iter().enumerate() {
        if !standardize.contains(name) {
            continue;
        }
        let c = &mut cols[j];
        let m = c.len() as f64;
        let mean = c.iter().sum::<f64>() / m;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Invalid(format!("column `{name}` is constant and cannot be standardized")));
        }
        for v in c.iter_mut() {
            *v = (*v - mean) / sd;
        }
        scaling.push(ColumnScaling { column: name.clone(), mean, scale: sd });
    }

    let y = std::mem::take(&mut cols[resp_col]);
    if let Some(i) = y.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroResponse { index: records[i] });
    }
    let cov: Vec<usize> = (0..width).filter(|&j| j != resp_col).collect();
    let n = y.len();
    let mut x = Vec::with_capacity(n * cov.len());
    for i in 0..n {
        x.extend(cov.iter().map(|&j| cols[j][i]));
    }
    let mut data = Dataset::from_row_major(n, cov.len(), x, y)?;
    data.covariate_names = cov.iter().map(|&j| header[j].clone()).collect();
    data.response_name = Some(response.to_string());
    data.scaling = scaling;
    Ok(Ingested { data, dropped_rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChainHeader {
    format: String,
    version: u32,
    spec: ModelSpec,
    hyper: PriorHyper,
    config: McmcConfig,
    acceptance: std::collections::BTreeMap<String, BlockRate>,
    draws: usize,
}

/// One header line (format, version, config echo, acceptance) then one draw per line.
pub fn write_chain_jsonl<W: Write>(chain: &ChainOutput, mut out: W) -> Result<()> {
    let header = ChainHeader {
        format: CHAIN_FORMAT.into(),
        version: CHAIN_VERSION,
        spec: chain.spec,
        hyper: chain.hyper.clone(),
        config: chain.config.clone(),
        acceptance: chain.acceptance.clone(),
        draws: chain.draws.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for d in &chain.draws {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_chain_jsonl<R: BufRead>(input: R) -> Result<ChainOutput> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Invalid("empty chain file".into()))??;
    let header: ChainHeader = serde_json::from_str(&first)?;
    if header.format != CHAIN_FORMAT || header.version != CHAIN_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported chain format {} v{}",
            header.format, header.version
        )));
    }
    let mut draws = Vec::with_capacity(header.draws);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let d: ParamState = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("draw {}: {e}", i + 1)))?;
        draws.push(d);
    }
    if draws.len() != header.draws {
        return Err(Error::Invalid(format!(
            "header announces {} draws, file has {}",
            header.draws,
            draws.len()
        )));
    }
    Ok(ChainOutput {
        spec: header.spec,
        hyper: header.hyper,
        config: header.config,
        draws,
        acceptance: header.acceptance,
        wall_time: Default::default(),
    })
}

/// Everything a fit reports besides the chain itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub version: u32,
    pub model: ModelSpec,
    pub n: usize,
    pub p: usize,
    pub covariate_names: Vec<String>,
    pub draws: usize,
    pub seed: u64,
    pub support: SupportSummary,
    pub ppl: f64,
    pub acceptance: std::collections::BTreeMap<String, BlockRate>,
}

pub fn write_json<T: Serialize, W: Write>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
