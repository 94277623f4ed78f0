//! Interaction-log ingestion: parsing, dense id maps, time binning and the
//! two evaluation protocols (chronological split and leave-one-out).

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate};
use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {malformed} of {total} lines malformed, e.g. {samples:?}", path.display())]
    Format {
        path: PathBuf,
        malformed: usize,
        total: usize,
        samples: Vec<String>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("unknown id {0:?}")]
    UnknownId(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One observed (user, item, value, timestamp) event.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub value: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedLog {
    pub records: Vec<InteractionRecord>,
    pub malformed: usize,
    /// First few malformed lines, prefixed by their 1-based line number.
    pub malformed_samples: Vec<String>,
}

/// Fraction of malformed lines tolerated before a parse fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;
const SAMPLE_LIMIT: usize = 5;

fn parse_fields(user: &str, item: &str, value: &str, ts: &str) -> Option<InteractionRecord> {
    let (user, item) = (user.trim(), item.trim());
    if user.is_empty() || item.is_empty() || !valid_raw_id(user) || !valid_raw_id(item) {
        return None;
    }
    let value: f64 = value.trim().parse().ok()?;
    let timestamp: i64 = ts.trim().parse().ok()?;
    if !value.is_finite() || timestamp < 0 {
        return None;
    }
    Some(InteractionRecord {
        user: user.to_string(),
        item: item.to_string(),
        value,
        timestamp,
    })
}

/// Raw ids are written into tab- and comma-separated files.
fn valid_raw_id(s: &str) -> bool {
    !s.contains(['\t', '\n', '\r', ','])
}

impl ParsedLog {
    fn push_line(&mut self, line_no: usize, line: &str, rec: Option<InteractionRecord>) {
        match rec {
            Some(r) => self.records.push(r),
            None => {
                self.malformed += 1;
                if self.malformed_samples.len() < SAMPLE_LIMIT {
                    self.malformed_samples.push(format!("{line_no}: {line}"));
                }
            }
        }
    }

    fn finish(self, path: &Path) -> Result<Self> {
        let total = self.records.len() + self.malformed;
        if total > 0 && self.malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                malformed: self.malformed,
                total,
                samples: self.malformed_samples,
            });
        }
        Ok(self)
    }
}

/// Parses `user::item::rating::timestamp` lines. Blank lines are skipped.
pub fn parse_movielens_reader(reader: impl BufRead, path: &Path) -> Result<ParsedLog> {
    let mut log = ParsedLog::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        let rec = match fields.as_slice() {
            [u, it, v, t] => parse_fields(u, it, v, t),
            _ => None,
        };
        log.push_line(i + 1, &line, rec);
    }
    log.finish(path)
}

pub fn parse_movielens(path: &Path) -> Result<ParsedLog> {
    let file = open(path)?;
    parse_movielens_reader(BufReader::new(file), path)
}

/// Parses CSV with a `user,item,value,timestamp` header.
pub fn parse_csv_reader(reader: impl Read, path: &Path) -> Result<ParsedLog> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::InvalidArgument(format!("{}: {e}", path.display())))?
        .clone();
    let want = ["user", "item", "value", "timestamp"];
    let cols: Vec<usize> = want
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(w))
                .ok_or_else(|| DataError::Format {
                    path: path.to_path_buf(),
                    malformed: 1,
                    total: 1,
                    samples: vec![format!("header lacks column {w:?}")],
                })
        })
        .collect::<Result<_>>()?;
    let mut log = ParsedLog::default();
    for (i, row) in rdr.records().enumerate() {
        let line_no = i + 2;
        match row {
            Ok(row) => {
                let get = |k: usize| row.get(cols[k]);
                let rec = match (get(0), get(1), get(2), get(3)) {
                    (Some(u), Some(it), Some(v), Some(t)) => parse_fields(u, it, v, t),
                    _ => None,
                };
                let text = row.iter().collect::<Vec<_>>().join(",");
                log.push_line(line_no, &text, rec);
            }
            Err(e) => log.push_line(line_no, &e.to_string(), None),
        }
    }
    log.finish(path)
}

pub fn parse_csv(path: &Path) -> Result<ParsedLog> {
    parse_csv_reader(open(path)?, path)
}

/// Dispatches on extension: `.csv` is CSV, anything else is `::`-delimited.
pub fn read_interactions(path: &Path) -> Result<ParsedLog> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => parse_csv(path),
        _ => parse_movielens(path),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Bijection between raw string ids and dense indices `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the dense id, assigning the next one on first sight.
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len();
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), i);
        i
    }

    pub fn from_raw(raw: Vec<String>) -> Result<Self> {
        let mut m = Self::new();
        for r in &raw {
            if !valid_raw_id(r) || r.is_empty() {
                return Err(DataError::InvalidArgument(format!("raw id {r:?} is not storable")));
            }
            if m.index.contains_key(r) {
                return Err(DataError::InvalidArgument(format!("duplicate raw id {r:?}")));
            }
            m.intern(r);
        }
        Ok(m)
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        self.raw.get(dense).map(String::as_str)
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Order for raw ids: numeric when both parse as integers, else lexicographic.
pub fn compare_raw_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// Tab-separated `kind raw dense` lines for both maps.
pub fn id_maps_tsv(users: &IdMap, items: &IdMap) -> String {
    let mut out = String::from("kind\traw\tdense\n");
    for (kind, map) in [("user", users), ("item", items)] {
        for (i, r) in map.raw_ids().iter().enumerate() {
            let _ = writeln!(out, "{kind}\t{r}\t{i}");
        }
    }
    out
}

pub fn parse_id_maps_tsv(text: &str) -> Result<(IdMap, IdMap)> {
    let mut users = Vec::new();
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let [kind, raw, dense] = f.as_slice() else {
            return Err(DataError::InvalidArgument(format!("id map line {}: {line:?}", n + 1)));
        };
        let target = match *kind {
            "user" => &mut users,
            "item" => &mut items,
            _ => return Err(DataError::InvalidArgument(format!("id map line {}: kind {kind:?}", n + 1))),
        };
        if dense.parse::<usize>().ok() != Some(target.len()) {
            return Err(DataError::InvalidArgument(format!("id map line {}: dense ids out of order", n + 1)));
        }
        target.push(raw.to_string());
    }
    Ok((IdMap::from_raw(users)?, IdMap::from_raw(items)?))
}

/// Hex SHA-256 over both id maps; ties manifests to checkpoints.
pub fn id_maps_fingerprint(users: &IdMap, items: &IdMap) -> String {
    hex::encode(Sha256::digest(id_maps_tsv(users, items).as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinScheme {
    EqualWidth,
    EqualCount,
    CalendarMonth,
}

impl BinScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            BinScheme::EqualWidth => "equal_width",
            BinScheme::EqualCount => "equal_count",
            BinScheme::CalendarMonth => "calendar_month",
        }
    }
}

impl FromStr for BinScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "equal_width" => Ok(BinScheme::EqualWidth),
            "equal_count" => Ok(BinScheme::EqualCount),
            "calendar_month" => Ok(BinScheme::CalendarMonth),
            other => Err(format!(
                "unknown time scheme {other:?} (equal_width, equal_count, calendar_month)"
            )),
        }
    }
}

/// Bin `k` (1-based) covers `[starts[k-1], starts[k])`; the last bin is
/// open-ended and timestamps before `starts[0]` fall in bin 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeBins {
    pub scheme: BinScheme,
    starts: Vec<i64>,
}

impl TimeBins {
    pub fn from_starts(scheme: BinScheme, starts: Vec<i64>) -> Result<Self> {
        if starts.is_empty() || starts.windows(2).any(|w| w[0] > w[1]) {
            return Err(DataError::InvalidArgument(format!("bin starts {starts:?} must be non-empty and sorted")));
        }
        Ok(Self { scheme, starts })
    }

    pub fn n_bins(&self) -> usize {
        self.starts.len()
    }

    pub fn starts(&self) -> &[i64] {
        &self.starts
    }

    pub fn bin_of(&self, ts: i64) -> usize {
        self.starts.partition_point(|&s| s <= ts).max(1)
    }
}

fn month_start(ts: i64) -> (i32, u32) {
    let dt = DateTime::from_timestamp(ts, 0).expect("timestamp in chrono range");
    (dt.year(), dt.month())
}

fn month_ts(year: i32, month: u32) -> i64 {
    NaiveDate::from_ymd_opt(year, month, 1)
        .expect("valid month")
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc()
        .timestamp()
}

/// Computes bin boundaries over the given timestamps. `n_bins` is ignored
/// by the calendar scheme, which derives one bin per UTC month.
pub fn compute_bins(timestamps: &[i64], n_bins: usize, scheme: BinScheme) -> Result<TimeBins> {
    if timestamps.is_empty() {
        return Err(DataError::InvalidArgument("cannot bin an empty record set".into()));
    }
    if n_bins == 0 && scheme != BinScheme::CalendarMonth {
        return Err(DataError::InvalidArgument("need at least one time bin".into()));
    }
    let min = *timestamps.iter().min().expect("non-empty");
    let max = *timestamps.iter().max().expect("non-empty");
    let starts = match scheme {
        BinScheme::EqualWidth => {
            let range = (max - min) as i128;
            let t = n_bins as i128;
            // ts lands in bin k+1 iff (ts - min) * T >= k * range
            (0..n_bins as i128)
                .map(|k| min + ((k * range + t - 1) / t) as i64)
                .collect()
        }
        BinScheme::EqualCount => {
            let mut sorted = timestamps.to_vec();
            sorted.sort_unstable();
            let mut distinct = sorted.clone();
            distinct.dedup();
            let d = distinct.len();
            if n_bins > d {
                return Err(DataError::Range(format!(
                    "{n_bins} equal-count bins requested but only {d} distinct timestamps"
                )));
            }
            let n = sorted.len();
            // quantile edges snapped onto distinct timestamps so no bin is empty
            let mut starts = Vec::with_capacity(n_bins);
            let mut prev: Option<usize> = None;
            for k in 0..n_bins {
                let q = sorted[k * n / n_bins];
                let mut p = distinct.partition_point(|&x| x < q);
                if let Some(pp) = prev {
                    p = p.max(pp + 1);
                }
                p = p.min(d - (n_bins - k));
                starts.push(distinct[p]);
                prev = Some(p);
            }
            starts
        }
        BinScheme::CalendarMonth => {
            let (mut y, mut m) = month_start(min);
            let end = month_start(max);
            let mut starts = Vec::new();
            loop {
                starts.push(month_ts(y, m));
                if (y, m) == end {
                    break;
                }
                m += 1;
                if m == 13 {
                    m = 1;
                    y += 1;
                }
            }
            starts
        }
    };
    TimeBins::from_starts(scheme, starts)
}

/// Record with dense ids and its 1-based time bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinnedRecord {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub timestamp: i64,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDataset {
    pub users: IdMap,
    pub items: IdMap,
    /// Same order as the parsed input.
    pub records: Vec<BinnedRecord>,
    pub bins: TimeBins,
}

impl BinnedDataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_bins(&self) -> usize {
        self.bins.n_bins()
    }

    /// Distinct items each user interacted with anywhere in the log.
    pub fn user_histories(&self) -> Vec<HashSet<usize>> {
        let mut h = vec![HashSet::new(); self.n_users()];
        for r in &self.records {
            h[r.user].insert(r.item);
        }
        h
    }

    pub fn fingerprint(&self) -> String {
        id_maps_fingerprint(&self.users, &self.items)
    }
}

/// Indexes ids in order of first appearance and bins every record.
pub fn bin_timestamps(records: &[InteractionRecord], n_bins: usize, scheme: BinScheme) -> Result<BinnedDataset> {
    let ts: Vec<i64> = records.iter().map(|r| r.timestamp).collect();
    let bins = compute_bins(&ts, n_bins, scheme)?;
    Ok(index_with_bins(records, bins))
}

/// Indexes and bins records against boundaries fixed elsewhere.
pub fn index_with_bins(records: &[InteractionRecord], bins: TimeBins) -> BinnedDataset {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let out = records
        .iter()
        .map(|r| BinnedRecord {
            user: users.intern(&r.user),
            item: items.intern(&r.item),
            value: r.value,
            timestamp: r.timestamp,
            bin: bins.bin_of(r.timestamp),
        })
        .collect();
    BinnedDataset {
        users,
        items,
        records: out,
        bins,
    }
}

/// Chronological train/test split as record indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChronoSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stable sort by timestamp; the first `floor(fraction * N)` go to train.
pub fn chrono_split(records: &[BinnedRecord], train_fraction: f64) -> Result<ChronoSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| records[i].timestamp);
    let n_train = (train_fraction * records.len() as f64).floor() as usize;
    if n_train == 0 || n_train == records.len() {
        return Err(DataError::InvalidArgument(format!(
            "fraction {train_fraction} of {} records leaves one side empty",
            records.len()
        )));
    }
    let test = order.split_off(n_train);
    Ok(ChronoSplit { train: order, test })
}

/// One held-out interaction with its sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LooCase {
    pub user: usize,
    pub record: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LooSplit {
    pub train: Vec<usize>,
    pub cases: Vec<LooCase>,
    /// Users with fewer than two interactions; none of their records are used.
    pub excluded_users: Vec<usize>,
    /// Users whose negative pool was smaller than requested.
    pub shrunk_users: Vec<usize>,
}

/// Per user: the latest interaction is held out and `n_negatives` distinct
/// never-interacted items are drawn uniformly. Ties on the latest timestamp
/// go to the highest raw item id.
pub fn leave_one_out(ds: &BinnedDataset, n_negatives: usize, rng: &mut impl Rng) -> Result<LooSplit> {
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); ds.n_users()];
    for (i, r) in ds.records.iter().enumerate() {
        per_user[r.user].push(i);
    }
    let histories = ds.user_histories();
    let n_items = ds.n_items();
    let mut held_out = vec![false; ds.records.len()];
    let mut excluded = vec![false; ds.n_users()];
    let mut split = LooSplit {
        train: Vec::new(),
        cases: Vec::new(),
        excluded_users: Vec::new(),
        shrunk_users: Vec::new(),
    };
    for (user, recs) in per_user.iter().enumerate() {
        if recs.len() < 2 {
            excluded[user] = true;
            split.excluded_users.push(user);
            continue;
        }
        let latest = *recs
            .iter()
            .max_by(|&&a, &&b| {
                let (ra, rb) = (&ds.records[a], &ds.records[b]);
                ra.timestamp
                    .cmp(&rb.timestamp)
                    .then_with(|| {
                        compare_raw_ids(
                            ds.items.raw(ra.item).unwrap_or_default(),
                            ds.items.raw(rb.item).unwrap_or_default(),
                        )
                    })
                    .then(a.cmp(&b))
            })
            .expect("non-empty");
        held_out[latest] = true;
        let (negatives, shrunk) = sample_excluding(&histories[user], n_items, n_negatives, rng);
        if shrunk {
            split.shrunk_users.push(user);
        }
        split.cases.push(LooCase {
            user,
            record: latest,
            negatives,
        });
    }
    split.train = (0..ds.records.len())
        .filter(|&i| !held_out[i] && !excluded[ds.records[i].user])
        .collect();
    Ok(split)
}

/// Draws up to `k` distinct ids from `0..n` outside `exclude`. Returns every
/// eligible id, ascending, with the flag set when fewer than `k` exist.
pub fn sample_excluding(exclude: &HashSet<usize>, n: usize, k: usize, rng: &mut impl Rng) -> (Vec<usize>, bool) {
    let eligible = n - exclude.iter().filter(|&&i| i < n).count();
    if eligible <= k {
        let all: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
        return (all, eligible < k);
    }
    if eligible < 2 * k {
        // dense pool: partial Fisher-Yates over the eligible list
        let mut pool: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
        for j in 0..k {
            let r = rng.random_range(j..pool.len());
            pool.swap(j, r);
        }
        pool.truncate(k);
        return (pool, false);
    }
    let mut chosen = Vec::with_capacity(k);
    let mut seen = HashSet::with_capacity(k);
    while chosen.len() < k {
        let c = rng.random_range(0..n);
        if !exclude.contains(&c) && seen.insert(c) {
            chosen.push(c);
        }
    }
    (chosen, false)
}

/// Which split protocol a manifest records.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitKind {
    Chrono(ChronoSplit),
    LeaveOneOut(LooSplit),
}

/// Persisted split: everything needed to rebuild train and test sides from
/// the same input file.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub fingerprint: String,
    pub n_records: usize,
    pub seed: u64,
    pub split: SplitKind,
}

const MANIFEST_MAGIC: &str = "dverec-split\t1";

impl SplitManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MANIFEST_MAGIC}");
        let protocol = match &self.split {
            SplitKind::Chrono(_) => "chrono",
            SplitKind::LeaveOneOut(_) => "leave_one_out",
        };
        let _ = writeln!(out, "protocol\t{protocol}");
        let _ = writeln!(out, "fingerprint\t{}", self.fingerprint);
        let _ = writeln!(out, "records\t{}", self.n_records);
        let _ = writeln!(out, "seed\t{}", self.seed);
        match &self.split {
            SplitKind::Chrono(s) => {
                for i in &s.train {
                    let _ = writeln!(out, "train\t{i}");
                }
                for i in &s.test {
                    let _ = writeln!(out, "test\t{i}");
                }
            }
            SplitKind::LeaveOneOut(s) => {
                for i in &s.train {
                    let _ = writeln!(out, "train\t{i}");
                }
                for c in &s.cases {
                    let negs: Vec<String> = c.negatives.iter().map(usize::to_string).collect();
                    let _ = writeln!(out, "case\t{}\t{}\t{}", c.user, c.record, negs.join(","));
                }
                for u in &s.excluded_users {
                    let _ = writeln!(out, "excluded\t{u}");
                }
                for u in &s.shrunk_users {
                    let _ = writeln!(out, "shrunk\t{u}");
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |n: usize, line: &str| DataError::InvalidArgument(format!("split manifest line {n}: {line:?}"));
        let num = |s: &str, n: usize, line: &str| s.parse::<usize>().map_err(|_| bad(n, line));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, MANIFEST_MAGIC)) => {}
            other => return Err(bad(1, other.map_or("", |o| o.1))),
        }
        let mut protocol = None;
        let mut fingerprint = None;
        let mut n_records = None;
        let mut seed = None;
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut cases = Vec::new();
        let mut excluded = Vec::new();
        let mut shrunk = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["protocol", p] => protocol = Some(p.to_string()),
                ["fingerprint", h] => fingerprint = Some(h.to_string()),
                ["records", r] => n_records = Some(num(r, n, line)?),
                ["seed", s] => seed = Some(s.parse::<u64>().map_err(|_| bad(n, line))?),
                ["train", i] => train.push(num(i, n, line)?),
                ["test", i] => test.push(num(i, n, line)?),
                ["case", u, r, negs] => cases.push(LooCase {
                    user: num(u, n, line)?,
                    record: num(r, n, line)?,
                    negatives: if negs.is_empty() {
                        Vec::new()
                    } else {
                        negs.split(',').map(|x| num(x, n, line)).collect::<Result<_>>()?
                    },
                }),
                ["excluded", u] => excluded.push(num(u, n, line)?),
                ["shrunk", u] => shrunk.push(num(u, n, line)?),
                _ => return Err(bad(n, line)),
            }
        }
        let missing = |k: &str| DataError::InvalidArgument(format!("split manifest lacks {k}"));
        let split = match protocol.as_deref() {
            Some("chrono") => SplitKind::Chrono(ChronoSplit { train, test }),
            Some("leave_one_out") => SplitKind::LeaveOneOut(LooSplit {
                train,
                cases,
                excluded_users: excluded,
                shrunk_users: shrunk,
            }),
            _ => return Err(missing("a known protocol")),
        };
        Ok(Self {
            fingerprint: fingerprint.ok_or_else(|| missing("fingerprint"))?,
            n_records: n_records.ok_or_else(|| missing("records"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            split,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    Day,
    Month,
    Year,
}

impl FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "day" => Ok(Granularity::Day),
            "month" => Ok(Granularity::Month),
            "year" => Ok(Granularity::Year),
            other => Err(format!("unknown granularity {other:?} (day, month, year)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupBy {
    User,
    Item,
}

impl FromStr for GroupBy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "user" => Ok(GroupBy::User),
            "item" => Ok(GroupBy::Item),
            other => Err(format!("unknown group {other:?} (user, item)")),
        }
    }
}

fn period_key(ts: i64, g: Granularity) -> NaiveDate {
    let d = DateTime::from_timestamp(ts, 0).expect("timestamp in chrono range").date_naive();
    match g {
        Granularity::Day => d,
        Granularity::Month => NaiveDate::from_ymd_opt(d.year(), d.month(), 1).expect("valid"),
        Granularity::Year => NaiveDate::from_ymd_opt(d.year(), 1, 1).expect("valid"),
    }
}

fn next_period(d: NaiveDate, g: Granularity) -> NaiveDate {
    match g {
        Granularity::Day => d.succ_opt().expect("in range"),
        Granularity::Month => {
            let (y, m) = if d.month() == 12 { (d.year() + 1, 1) } else { (d.year(), d.month() + 1) };
            NaiveDate::from_ymd_opt(y, m, 1).expect("valid")
        }
        Granularity::Year => NaiveDate::from_ymd_opt(d.year() + 1, 1, 1).expect("valid"),
    }
}

fn period_label(d: NaiveDate, g: Granularity) -> String {
    match g {
        Granularity::Day => d.format("%Y-%m-%d").to_string(),
        Granularity::Month => d.format("%Y-%m").to_string(),
        Granularity::Year => d.format("%Y").to_string(),
    }
}

/// Interaction counts per period for one user or item (or every record when
/// `filter` is `None`). Periods run contiguously from the first to the last
/// matching event, zero-filled.
pub fn interaction_counts(
    records: &[InteractionRecord],
    filter: Option<(GroupBy, &str)>,
    granularity: Granularity,
) -> Result<Vec<(String, usize)>> {
    let mut counts: HashMap<NaiveDate, usize> = HashMap::new();
    for r in records {
        let keep = match filter {
            None => true,
            Some((GroupBy::User, id)) => r.user == id,
            Some((GroupBy::Item, id)) => r.item == id,
        };
        if keep {
            *counts.entry(period_key(r.timestamp, granularity)).or_default() += 1;
        }
    }
    let (Some(&first), Some(&last)) = (counts.keys().min(), counts.keys().max()) else {
        return Err(DataError::UnknownId(filter.map_or(String::new(), |f| f.1.to_string())));
    };
    let mut out = Vec::new();
    let mut d = first;
    while d <= last {
        out.push((period_label(d, granularity), counts.get(&d).copied().unwrap_or(0)));
        d = next_period(d, granularity);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(u: &str, i: &str, v: f64, t: i64) -> InteractionRecord {
        InteractionRecord {
            user: u.into(),
            item: i.into(),
            value: v,
            timestamp: t,
        }
    }

    #[test]
    fn parses_movielens_line() {
        let log = parse_movielens_reader("1::1193::5::978300760\n".as_bytes(), Path::new("x")).unwrap();
        assert_eq!(log.records, vec![rec("1", "1193", 5.0, 978300760)]);
        assert_eq!(log.malformed, 0);
    }

    #[test]
    fn empty_input_is_vacuous() {
        let log = parse_movielens_reader("".as_bytes(), Path::new("x")).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(log.malformed, 0);
    }

    #[test]
    fn malformed_lines_counted_and_bounded() {
        let mut text = String::new();
        for k in 0..200 {
            let _ = writeln!(text, "{k}::{k}::3::{k}");
        }
        text.push_str("garbage\n");
        let log = parse_movielens_reader(text.as_bytes(), Path::new("x")).unwrap();
        assert_eq!(log.records.len(), 200);
        assert_eq!(log.malformed, 1);
        assert_eq!(log.malformed_samples, vec!["201: garbage".to_string()]);

        text.push_str("1::2::x::3\n1::2\n");
        let err = parse_movielens_reader(text.as_bytes(), Path::new("x")).unwrap_err();
        assert!(matches!(err, DataError::Format { malformed: 3, total: 203, .. }));
    }

    #[test]
    fn parses_csv_with_header() {
        let text = "user,item,value,timestamp\nu1,i9,1,50\nu2,i9,4.5,60\n";
        let log = parse_csv_reader(text.as_bytes(), Path::new("x.csv")).unwrap();
        assert_eq!(log.records, vec![rec("u1", "i9", 1.0, 50), rec("u2", "i9", 4.5, 60)]);
        let err = parse_csv_reader("a,b\n1,2\n".as_bytes(), Path::new("x.csv")).unwrap_err();
        assert!(matches!(err, DataError::Format { .. }));
    }

    #[test]
    fn missing_file_is_io_error_with_path() {
        let err = parse_movielens(Path::new("/nonexistent/ratings.dat")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/ratings.dat"));
    }

    #[test]
    fn single_bin_and_equal_width() {
        let rs: Vec<_> = [0, 10, 20, 30].iter().map(|&t| rec("u", "i", 1.0, t)).collect();
        let one = bin_timestamps(&rs, 1, BinScheme::EqualWidth).unwrap();
        assert!(one.records.iter().all(|r| r.bin == 1));
        let two = bin_timestamps(&rs, 2, BinScheme::EqualWidth).unwrap();
        let bins: Vec<usize> = two.records.iter().map(|r| r.bin).collect();
        assert_eq!(bins, vec![1, 1, 2, 2]);
    }

    #[test]
    fn equal_count_needs_distinct_timestamps() {
        let rs: Vec<_> = [5, 5, 5, 7].iter().map(|&t| rec("u", "i", 1.0, t)).collect();
        assert!(matches!(bin_timestamps(&rs, 3, BinScheme::EqualCount), Err(DataError::Range(_))));
        let ds = bin_timestamps(&rs, 2, BinScheme::EqualCount).unwrap();
        let bins: Vec<usize> = ds.records.iter().map(|r| r.bin).collect();
        assert_eq!(bins, vec![1, 1, 1, 2]);
    }

    #[test]
    fn calendar_months_span_range() {
        // 2000-04-25 and 2003-02-28 (ml-1m's span)
        let rs = vec![rec("u", "i", 1.0, 956_620_800), rec("u", "j", 1.0, 1_046_390_400)];
        let ds = bin_timestamps(&rs, 0, BinScheme::CalendarMonth).unwrap();
        assert_eq!(ds.n_bins(), 35);
        assert_eq!(ds.records[0].bin, 1);
        assert_eq!(ds.records[1].bin, 35);
        assert_eq!(ds.bins.starts()[0], month_ts(2000, 4));
    }

    #[test]
    fn chrono_split_forced_and_stable() {
        let rs: Vec<_> = [3, 1, 4, 2].iter().map(|&t| rec("u", &t.to_string(), 1.0, t)).collect();
        let ds = bin_timestamps(&rs, 1, BinScheme::EqualWidth).unwrap();
        let s = chrono_split(&ds.records, 0.75).unwrap();
        assert_eq!(s.train, vec![1, 3, 0]);
        assert_eq!(s.test, vec![2]);

        let ties: Vec<_> = (0..4).map(|k| rec("u", &k.to_string(), 1.0, 7)).collect();
        let ds = bin_timestamps(&ties, 1, BinScheme::EqualWidth).unwrap();
        let s = chrono_split(&ds.records, 0.5).unwrap();
        assert_eq!(s.train, vec![0, 1]);
        assert_eq!(s.test, vec![2, 3]);

        assert!(chrono_split(&ds.records, 0.1).is_err());
        assert!(chrono_split(&ds.records, 1.0).is_err());
    }

    #[test]
    fn leave_one_out_holds_latest() {
        let rs = vec![
            rec("a", "x", 1.0, 5),
            rec("a", "y", 1.0, 9),
            rec("b", "x", 1.0, 1),
            rec("c", "x", 1.0, 3),
            rec("c", "10", 1.0, 3),
            rec("c", "9", 1.0, 3),
            rec("d", "z", 1.0, 2),
            rec("d", "w", 1.0, 2),
        ];
        let ds = bin_timestamps(&rs, 1, BinScheme::EqualWidth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = leave_one_out(&ds, 2, &mut rng).unwrap();
        assert_eq!(s.cases[0].record, 1);
        assert!(s.train.contains(&0));
        assert_eq!(s.excluded_users, vec![1]);
        // numeric raw ids compare numerically: "10" beats "9" and "x" is not numeric
        assert_eq!(ds.items.raw(ds.records[s.cases[1].record].item), Some("x"));
        // "z" > "w" lexicographically
        assert_eq!(ds.items.raw(ds.records[s.cases[2].record].item), Some("z"));
        let histories = ds.user_histories();
        for c in &s.cases {
            assert!(c.negatives.iter().all(|n| !histories[c.user].contains(n)));
        }
        assert_eq!(s.train.len() + s.cases.len() + 1, rs.len());
    }

    #[test]
    fn sample_excluding_degenerate_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex: HashSet<usize> = [0, 1, 2].into_iter().collect();
        let (got, short) = sample_excluding(&ex, 5, 2, &mut rng);
        assert_eq!(got, vec![3, 4]);
        assert!(!short);
        let all: HashSet<usize> = (0..5).collect();
        let (got, short) = sample_excluding(&all, 5, 2, &mut rng);
        assert!(got.is_empty() && short);
    }

    #[test]
    fn id_map_tsv_round_trip() {
        let mut u = IdMap::new();
        let mut i = IdMap::new();
        for r in ["7", "3", "x"] {
            u.intern(r);
        }
        i.intern("1193");
        let text = id_maps_tsv(&u, &i);
        let (u2, i2) = parse_id_maps_tsv(&text).unwrap();
        assert_eq!((u2, i2), (u.clone(), i.clone()));
        assert_eq!(id_maps_fingerprint(&u, &i).len(), 64);
    }

    #[test]
    fn manifest_round_trip() {
        let m = SplitManifest {
            fingerprint: "ab".into(),
            n_records: 9,
            seed: 3,
            split: SplitKind::LeaveOneOut(LooSplit {
                train: vec![0, 2],
                cases: vec![LooCase {
                    user: 1,
                    record: 4,
                    negatives: vec![3, 1],
                }],
                excluded_users: vec![5],
                shrunk_users: vec![],
            }),
        };
        assert_eq!(SplitManifest::parse(&m.to_text()).unwrap(), m);
        assert!(SplitManifest::parse("nope\n").is_err());
    }

    #[test]
    fn monthly_counts_zero_filled() {
        let jan = month_ts(2001, 1) + 100;
        let mar = month_ts(2001, 3) + 100;
        let rs = vec![rec("1", "a", 1.0, jan), rec("1", "a", 2.0, jan + 5), rec("1", "b", 2.0, mar), rec("2", "a", 1.0, mar)];
        let c = interaction_counts(&rs, Some((GroupBy::Item, "a")), Granularity::Month).unwrap();
        assert_eq!(c, vec![("2001-01".into(), 2), ("2001-02".into(), 0), ("2001-03".into(), 1)]);
        let all = interaction_counts(&rs, None, Granularity::Month).unwrap();
        assert_eq!(all.iter().map(|c| c.1).sum::<usize>(), 4);
        assert!(matches!(
            interaction_counts(&rs, Some((GroupBy::User, "99")), Granularity::Month),
            Err(DataError::UnknownId(_))
        ));
    }
}
