//! Interaction datasets annotated with user-identity and product-image groups.
//!
//! A [`Dataset`] is immutable once built. Users and items are interned to dense
//! indices starting at 0; group labels are interned into a [`GroupVocab`] per
//! axis. A user whose identity is unknown carries `None` as its group and is
//! kept for rating signal but excluded from every segment-level statistic.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label rendered for users without a known identity group.
pub const UNKNOWN_LABEL: &str = "UNKNOWN";

const CACHE_MAGIC: &[u8; 4] = b"FRDS";
const CACHE_VERSION: u32 = 1;

/// Fraction of malformed data rows above which a load is aborted.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing required column {0:?}")]
    MissingColumn(String),
    #[error("{} malformed rows out of {total} (first: line {}: {})", rows.len(), rows[0].line, rows[0].reason)]
    Malformed { rows: Vec<MalformedRow>, total: usize },
    #[error("no usable interactions in input")]
    Empty,
    #[error("no known groups on the {0} axis")]
    NoGroups(String),
    #[error("index out of range: {what} {index} (size {size})")]
    IndexOutOfRange { what: &'static str, index: usize, size: usize },
    #[error("no interactions left after dropping unknown identities")]
    EmptyAfterFiltering,
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("unsupported cache file: {0}")]
    BadCache(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encode(#[from] bincode::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Ordered group labels of one attribute axis (e.g. body shape, gender).
///
/// The unknown label is reserved and never stored in `labels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupVocab {
    pub axis_name: String,
    labels: Vec<String>,
}

impl GroupVocab {
    pub fn new(axis_name: impl Into<String>) -> Self {
        Self { axis_name: axis_name.into(), labels: Vec::new() }
    }

    pub fn with_labels<S: Into<String>>(
        axis_name: impl Into<String>,
        labels: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let mut vocab = Self::new(axis_name);
        for label in labels {
            let label = label.into();
            if label.is_empty() || label == UNKNOWN_LABEL || vocab.index_of(&label).is_some() {
                return Err(DataError::Invalid(format!("bad or duplicate group label {label:?}")));
            }
            vocab.labels.push(label);
        }
        Ok(vocab)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Number of real groups (unknown excluded).
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, group: Option<usize>) -> &str {
        match group {
            Some(g) => &self.labels[g],
            None => UNKNOWN_LABEL,
        }
    }

    fn intern(&mut self, label: &str) -> usize {
        match self.index_of(label) {
            Some(idx) => idx,
            None => {
                self.labels.push(label.to_string());
                self.labels.len() - 1
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitLabel {
    JustRight,
    Other,
}

impl FitLabel {
    pub fn parse(raw: &str) -> Option<Self> {
        let raw = raw.trim();
        if raw.is_empty() {
            None
        } else if raw.eq_ignore_ascii_case("just right") {
            Some(FitLabel::JustRight)
        } else {
            Some(FitLabel::Other)
        }
    }

    pub fn as_outcome(self) -> f64 {
        match self {
            FitLabel::JustRight => 1.0,
            FitLabel::Other => 0.0,
        }
    }
}

/// One rating event, with user and item already interned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: i64,
    pub fit: Option<FitLabel>,
}

/// A consumer-product market segment: user group `m` crossed with item group `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentKey {
    pub m: usize,
    pub n: usize,
}

impl SegmentKey {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }

    /// Row-major cell index in an `M x N` grid with `n_cols = N`.
    pub fn flat(self, n_cols: usize) -> usize {
        self.m * n_cols + self.n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetRecord {
    interactions: Vec<Interaction>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_group: Vec<Option<usize>>,
    item_group: Vec<usize>,
    vocab_user: GroupVocab,
    vocab_item: GroupVocab,
    has_fit: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    record: DatasetRecord,
    user_lookup: HashMap<String, usize>,
    item_lookup: HashMap<String, usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.record == other.record
    }
}

impl Dataset {
    fn from_record(record: DatasetRecord) -> Result<Self> {
        let n_users = record.user_ids.len();
        let n_items = record.item_ids.len();
        if record.user_group.len() != n_users || record.item_group.len() != n_items {
            return Err(DataError::Invalid("group maps do not match id tables".into()));
        }
        if record.interactions.is_empty() {
            return Err(DataError::Empty);
        }
        if record.vocab_user.is_empty() {
            return Err(DataError::NoGroups(record.vocab_user.axis_name.clone()));
        }
        if record.vocab_item.is_empty() {
            return Err(DataError::NoGroups(record.vocab_item.axis_name.clone()));
        }
        let m = record.vocab_user.len();
        let n = record.vocab_item.len();
        if record.user_group.iter().flatten().any(|&g| g >= m) || record.item_group.iter().any(|&g| g >= n) {
            return Err(DataError::Invalid("group index outside vocabulary".into()));
        }
        for x in &record.interactions {
            if x.user >= n_users || x.item >= n_items {
                return Err(DataError::Invalid("interaction references unknown id".into()));
            }
            if !x.rating.is_finite() || x.timestamp < 0 {
                return Err(DataError::Invalid("non-finite rating or negative timestamp".into()));
            }
        }
        let user_lookup = record.user_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let item_lookup = record.item_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self { record, user_lookup, item_lookup })
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.record.interactions
    }

    pub fn len(&self) -> usize {
        self.record.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record.interactions.is_empty()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn n_users(&self) -> usize {
        self.record.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.record.item_ids.len()
    }

    pub fn vocab_user(&self) -> &GroupVocab {
        &self.record.vocab_user
    }

    pub fn vocab_item(&self) -> &GroupVocab {
        &self.record.vocab_item
    }

    /// Number of user-identity groups `M`.
    pub fn n_user_groups(&self) -> usize {
        self.record.vocab_user.len()
    }

    /// Number of product-image groups `N`.
    pub fn n_item_groups(&self) -> usize {
        self.record.vocab_item.len()
    }

    pub fn has_fit(&self) -> bool {
        self.record.has_fit
    }

    pub fn user_id(&self, u: usize) -> &str {
        &self.record.user_ids[u]
    }

    pub fn item_id(&self, i: usize) -> &str {
        &self.record.item_ids[i]
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_lookup.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_lookup.get(id).copied()
    }

    pub fn user_group(&self, u: usize) -> Option<usize> {
        self.record.user_group[u]
    }

    pub fn item_group(&self, i: usize) -> usize {
        self.record.item_group[i]
    }

    /// Market segment of the pair `(u, i)`; `Ok(None)` when the user's identity is unknown.
    pub fn segment_of(&self, u: usize, i: usize) -> Result<Option<SegmentKey>> {
        if u >= self.n_users() {
            return Err(DataError::IndexOutOfRange { what: "user", index: u, size: self.n_users() });
        }
        if i >= self.n_items() {
            return Err(DataError::IndexOutOfRange { what: "item", index: i, size: self.n_items() });
        }
        Ok(self.record.user_group[u].map(|m| SegmentKey::new(m, self.record.item_group[i])))
    }

    /// Segment of the interaction at position `idx`.
    pub fn segment_of_interaction(&self, idx: usize) -> Option<SegmentKey> {
        let x = &self.record.interactions[idx];
        self.record.user_group[x.user].map(|m| SegmentKey::new(m, self.record.item_group[x.item]))
    }

    /// Calendar year (UTC) of an interaction's timestamp.
    pub fn year_of(&self, idx: usize) -> i32 {
        DateTime::from_timestamp(self.record.interactions[idx].timestamp, 0)
            .map(|t| t.year())
            .unwrap_or(1970)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        bincode::serialize_into(&mut w, &self.record)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(DataError::BadCache("wrong magic".into()));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        let version = u32::from_le_bytes(version);
        if version != CACHE_VERSION {
            return Err(DataError::BadCache(format!("version {version}, expected {CACHE_VERSION}")));
        }
        let record: DatasetRecord = bincode::deserialize_from(r)?;
        Self::from_record(record)
    }

    /// Writes the dataset in the canonical CSV layout read by [`load_interactions`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["user_id", "item_id", "rating", "timestamp", "user_attr", "model_attr"];
        if self.has_fit() {
            header.push("fit");
        }
        w.write_record(&header)?;
        for x in self.interactions() {
            let user_attr = self.user_group(x.user).map(|g| self.vocab_user().labels()[g].as_str()).unwrap_or("");
            let mut row = vec![
                self.user_id(x.user).to_string(),
                self.item_id(x.item).to_string(),
                format_rating(x.rating),
                x.timestamp.to_string(),
                user_attr.to_string(),
                self.vocab_item().labels()[self.item_group(x.item)].clone(),
            ];
            if self.has_fit() {
                row.push(match x.fit {
                    Some(FitLabel::JustRight) => "Just Right".into(),
                    Some(FitLabel::Other) => "Other".into(),
                    None => String::new(),
                });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

// Shortest representation that parses back to the same f64.
fn format_rating(r: f64) -> String {
    format!("{r:?}")
}

/// Incremental constructor used by the CSV loader and the synthetic generator.
#[derive(Debug, Clone)]
pub struct DatasetBuilder {
    record: DatasetRecord,
    user_lookup: HashMap<String, usize>,
    item_lookup: HashMap<String, usize>,
    conflicting_labels: usize,
}

impl DatasetBuilder {
    pub fn new(vocab_user: GroupVocab, vocab_item: GroupVocab) -> Self {
        Self {
            record: DatasetRecord {
                interactions: Vec::new(),
                user_ids: Vec::new(),
                item_ids: Vec::new(),
                user_group: Vec::new(),
                item_group: Vec::new(),
                vocab_user,
                vocab_item,
                has_fit: false,
            },
            user_lookup: HashMap::new(),
            item_lookup: HashMap::new(),
            conflicting_labels: 0,
        }
    }

    pub fn set_has_fit(&mut self, has_fit: bool) {
        self.record.has_fit = has_fit;
    }

    /// Rows whose group label disagreed with the label first seen for that id.
    pub fn conflicting_labels(&self) -> usize {
        self.conflicting_labels
    }

    /// Adds one interaction. An empty `user_label` means unknown identity; the
    /// first non-empty label seen for an id is kept.
    pub fn push(
        &mut self,
        user_id: &str,
        item_id: &str,
        rating: f64,
        timestamp: i64,
        user_label: &str,
        item_label: &str,
        fit: Option<FitLabel>,
    ) {
        let rec = &mut self.record;
        let user_group = (!user_label.is_empty()).then(|| rec.vocab_user.intern(user_label));
        let item_group = rec.vocab_item.intern(item_label);

        let user = match self.user_lookup.get(user_id) {
            Some(&u) => {
                match (rec.user_group[u], user_group) {
                    (None, Some(g)) => rec.user_group[u] = Some(g),
                    (Some(a), Some(b)) if a != b => self.conflicting_labels += 1,
                    _ => {}
                }
                u
            }
            None => {
                rec.user_ids.push(user_id.to_string());
                rec.user_group.push(user_group);
                self.user_lookup.insert(user_id.to_string(), rec.user_ids.len() - 1);
                rec.user_ids.len() - 1
            }
        };
        let item = match self.item_lookup.get(item_id) {
            Some(&i) => {
                if rec.item_group[i] != item_group {
                    self.conflicting_labels += 1;
                }
                i
            }
            None => {
                rec.item_ids.push(item_id.to_string());
                rec.item_group.push(item_group);
                self.item_lookup.insert(item_id.to_string(), rec.item_ids.len() - 1);
                rec.item_ids.len() - 1
            }
        };
        rec.interactions.push(Interaction { user, item, rating, timestamp, fit });
    }

    pub fn build(self) -> Result<Dataset> {
        Dataset::from_record(self.record)
    }
}

/// Column names of the input CSV; defaults are the canonical layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub user_id: String,
    pub item_id: String,
    pub rating: String,
    pub timestamp: String,
    pub user_attr: String,
    pub model_attr: String,
    /// Optional fit-feedback column; ignored when absent from the header.
    pub fit: String,
    pub user_axis: String,
    pub item_axis: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            user_id: "user_id".into(),
            item_id: "item_id".into(),
            rating: "rating".into(),
            timestamp: "timestamp".into(),
            user_attr: "user_attr".into(),
            model_attr: "model_attr".into(),
            fit: "fit".into(),
            user_axis: "user identity".into(),
            item_axis: "product image".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedRow {
    /// 1-based line number in the file (header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rejected_no_image: usize,
    pub unknown_identity_rows: usize,
    pub conflicting_labels: usize,
    pub malformed: Vec<MalformedRow>,
}

/// Parses an integer epoch-seconds timestamp or an ISO-8601 date/datetime.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(t) = raw.parse::<i64>() {
        return Some(t);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.timestamp());
    }
    if let Ok(t) = DateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S%:z") {
        return Some(t.timestamp());
    }
    if let Ok(t) = NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S") {
        return Some(t.and_utc().timestamp());
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc().timestamp())
}

/// Loads a CSV of interactions.
///
/// Rows with an empty product-image label are rejected and counted. Rows with
/// an empty user label load with unknown identity. Malformed rows are skipped
/// and reported unless they exceed [`MAX_MALFORMED_FRACTION`] of all rows.
pub fn load_interactions(path: &Path, schema: &ColumnSchema) -> Result<(Dataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let c_user = col(&schema.user_id)?;
    let c_item = col(&schema.item_id)?;
    let c_rating = col(&schema.rating)?;
    let c_ts = col(&schema.timestamp)?;
    let c_uattr = col(&schema.user_attr)?;
    let c_mattr = col(&schema.model_attr)?;
    let c_fit = headers.iter().position(|h| h.trim() == schema.fit);

    let mut builder = DatasetBuilder::new(
        GroupVocab::new(schema.user_axis.clone()),
        GroupVocab::new(schema.item_axis.clone()),
    );
    builder.set_has_fit(c_fit.is_some());
    let mut report = LoadReport::default();

    for (row_no, row) in reader.records().enumerate() {
        report.rows_read += 1;
        let line = row_no as u64 + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.malformed.push(MalformedRow { line, reason: e.to_string() });
                continue;
            }
        };
        let field = |c: usize| row.get(c).map(str::trim);
        let parsed = (|| -> std::result::Result<_, String> {
            let user = field(c_user).filter(|s| !s.is_empty()).ok_or("empty user id")?;
            let item = field(c_item).filter(|s| !s.is_empty()).ok_or("empty item id")?;
            let rating_raw = field(c_rating).ok_or("missing rating")?;
            let rating: f64 = rating_raw.parse().map_err(|_| format!("bad rating {rating_raw:?}"))?;
            if !rating.is_finite() || !(1.0..=5.0).contains(&rating) {
                return Err(format!("rating {rating} outside [1, 5]"));
            }
            let ts_raw = field(c_ts).ok_or("missing timestamp")?;
            let ts = parse_timestamp(ts_raw).ok_or_else(|| format!("bad timestamp {ts_raw:?}"))?;
            if ts < 0 {
                return Err(format!("negative timestamp {ts}"));
            }
            let uattr = field(c_uattr).ok_or("missing user_attr")?;
            let mattr = field(c_mattr).ok_or("missing model_attr")?;
            let fit = c_fit.and_then(|c| field(c)).and_then(FitLabel::parse);
            Ok((user, item, rating, ts, uattr, mattr, fit))
        })();
        match parsed {
            Ok((_, _, _, _, _, "", _)) => report.rejected_no_image += 1,
            Ok((user, item, rating, ts, uattr, mattr, fit)) => {
                let uattr = if uattr == UNKNOWN_LABEL { "" } else { uattr };
                if uattr.is_empty() {
                    report.unknown_identity_rows += 1;
                }
                builder.push(user, item, rating, ts, uattr, mattr, fit);
            }
            Err(reason) => report.malformed.push(MalformedRow { line, reason }),
        }
    }

    if !report.malformed.is_empty()
        && report.malformed.len() as f64 > MAX_MALFORMED_FRACTION * report.rows_read as f64
    {
        return Err(DataError::Malformed { rows: report.malformed, total: report.rows_read });
    }
    report.conflicting_labels = builder.conflicting_labels();
    Ok((builder.build()?, report))
}

/// Per-user chronological split into train / validation / test positions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Leave-latest split: a user's latest interaction goes to test when they have
/// at least two, the second-latest to validation when they have at least three.
/// Equal timestamps are ordered by input position, later rows being more recent.
pub fn split_leave_latest(ds: &Dataset) -> DataSplit {
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); ds.n_users()];
    for (idx, x) in ds.interactions().iter().enumerate() {
        per_user[x.user].push(idx);
    }
    let mut split = DataSplit::default();
    for mut idxs in per_user {
        // stable sort keeps input order among ties
        idxs.sort_by_key(|&idx| ds.interactions()[idx].timestamp);
        let n = idxs.len();
        if n >= 2 {
            split.test.push(idxs[n - 1]);
        }
        if n >= 3 {
            split.validation.push(idxs[n - 2]);
        }
        let n_train = match n {
            0 | 1 => n,
            2 => 1,
            _ => n - 2,
        };
        split.train.extend_from_slice(&idxs[..n_train]);
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Interaction counts per market segment, rows = user groups, columns = item groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub dropped_unknown: usize,
}

impl ContingencyTable {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        Self { counts, dropped_unknown: 0 }
    }

    pub fn n_rows(&self) -> usize {
        self.counts.len()
    }

    pub fn n_cols(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_totals(&self) -> Vec<u64> {
        (0..self.n_cols()).map(|c| self.counts.iter().map(|r| r[c]).sum()).collect()
    }

    pub fn grand_total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn as_f64(&self) -> Vec<Vec<f64>> {
        self.counts.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect()
    }
}

/// Counts the known-identity interactions of `subset` per segment.
pub fn contingency_table(ds: &Dataset, subset: &[usize]) -> Result<ContingencyTable> {
    let mut counts = vec![vec![0u64; ds.n_item_groups()]; ds.n_user_groups()];
    let mut dropped_unknown = 0;
    for &idx in subset {
        if idx >= ds.len() {
            return Err(DataError::IndexOutOfRange { what: "interaction", index: idx, size: ds.len() });
        }
        match ds.segment_of_interaction(idx) {
            Some(key) => counts[key.m][key.n] += 1,
            None => dropped_unknown += 1,
        }
    }
    if dropped_unknown == subset.len() {
        return Err(DataError::EmptyAfterFiltering);
    }
    Ok(ContingencyTable { counts, dropped_unknown })
}
