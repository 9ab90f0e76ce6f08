use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(user, item, timestamp[, rating])` row of a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    Tab,
    Comma,
    /// `::`, as in the MovieLens `.dat` files.
    DoubleColon,
}

impl Delimiter {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Tab => line.split('\t').collect(),
            Delimiter::Comma => line.split(',').collect(),
            Delimiter::DoubleColon => line.split("::").collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    /// Rows rated below this are dropped (rows without a rating are kept).
    pub min_rating: Option<f64>,
    /// Users with fewer remaining rows are dropped.
    pub min_user_len: usize,
    /// Items with fewer remaining rows are dropped. With both thresholds
    /// above one the filters alternate until neither removes a row (k-core).
    pub min_item_len: usize,
    pub delimiter: Delimiter,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_rating: None,
            min_user_len: 1,
            min_item_len: 1,
            delimiter: Delimiter::Tab,
        }
    }
}

/// Row counts before and after each filter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub raw_rows: usize,
    pub raw_users: usize,
    pub raw_items: usize,
    pub after_rating_rows: usize,
    pub rows: usize,
    pub users: usize,
    pub items: usize,
}

impl IngestReport {
    pub fn avg_length(&self) -> f64 {
        self.rows as f64 / self.users.max(1) as f64
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.rows as f64 / (self.users.max(1) as f64 * self.items.max(1) as f64)
    }
}

fn open(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn parse_line(fields: &[&str], line: usize) -> Result<InteractionRecord> {
    let err = |m: String| Error::Parse { line, message: m };
    if fields.len() < 3 || fields.len() > 4 {
        return Err(err(format!("expected 3 or 4 fields, found {}", fields.len())));
    }
    let user_id = fields[0].trim();
    let item_id = fields[1].trim();
    if user_id.is_empty() || item_id.is_empty() {
        return Err(err("empty user or item id".into()));
    }
    let timestamp: i64 = fields[2]
        .trim()
        .parse()
        .map_err(|_| err(format!("bad timestamp {:?}", fields[2])))?;
    if timestamp < 0 {
        return Err(err(format!("negative timestamp {timestamp}")));
    }
    let rating = match fields.get(3) {
        Some(r) => Some(r.trim().parse::<f64>().map_err(|_| err(format!("bad rating {r:?}")))?),
        None => None,
    };
    Ok(InteractionRecord {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        timestamp,
        rating,
    })
}

fn count_distinct<'a>(it: impl Iterator<Item = &'a str>) -> usize {
    it.collect::<std::collections::HashSet<_>>().len()
}

/// Reads, filters and sorts a log. Output is ordered by user id, then
/// timestamp, then input order.
pub fn ingest_with(path: &Path, opts: &IngestOptions) -> Result<(Vec<InteractionRecord>, IngestReport)> {
    let reader = open(path)?;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&opts.delimiter.split(trimmed), i + 1)?);
    }
    let mut report = IngestReport {
        raw_rows: records.len(),
        raw_users: count_distinct(records.iter().map(|r| r.user_id.as_str())),
        raw_items: count_distinct(records.iter().map(|r| r.item_id.as_str())),
        ..Default::default()
    };
    if let Some(min) = opts.min_rating {
        records.retain(|r| r.rating.is_none_or(|x| x >= min));
    }
    report.after_rating_rows = records.len();

    records.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
    let mut kept = records;
    loop {
        let before = kept.len();
        if opts.min_item_len > 1 {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for r in &kept {
                *counts.entry(r.item_id.as_str()).or_default() += 1;
            }
            let keep: Vec<bool> = kept
                .iter()
                .map(|r| counts[r.item_id.as_str()] >= opts.min_item_len)
                .collect();
            let mut flags = keep.into_iter();
            kept.retain(|_| flags.next().unwrap());
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &kept {
            *counts.entry(r.user_id.as_str()).or_default() += 1;
        }
        let keep: Vec<bool> = kept
            .iter()
            .map(|r| counts[r.user_id.as_str()] >= opts.min_user_len)
            .collect();
        let mut flags = keep.into_iter();
        kept.retain(|_| flags.next().unwrap());
        if kept.len() == before || opts.min_item_len <= 1 {
            break;
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    report.rows = kept.len();
    report.users = count_distinct(kept.iter().map(|r| r.user_id.as_str()));
    report.items = count_distinct(kept.iter().map(|r| r.item_id.as_str()));
    Ok((kept, report))
}

/// Tab-separated ingest with the given filters.
pub fn ingest_interactions(
    path: &Path,
    min_rating: Option<f64>,
    min_user_len: usize,
) -> Result<Vec<InteractionRecord>> {
    let opts = IngestOptions {
        min_rating,
        min_user_len,
        delimiter: Delimiter::Tab,
        ..Default::default()
    };
    ingest_with(path, &opts).map(|(r, _)| r)
}
