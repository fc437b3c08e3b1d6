//! Person records, CSV ingestion, the synthetic generator and the
//! corruption model used to inject group-dependent data errors.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{self, StreamRng};
use crate::{Error, GroupId, Result};

const GIVEN_NAMES: &str = include_str!("../data/given_names.txt");
const SURNAMES: &str = include_str!("../data/surnames.txt");
const SUBURBS: &str = include_str!("../data/suburbs.txt");

pub const ENTITY_ID_COLUMN: &str = "entity_id";

/// Column layout of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    /// Quasi-identifier columns, in encoding order.
    pub qids: Vec<String>,
    /// Name of the protected-feature column.
    pub protected: String,
    /// Label of group `g` is `group_labels[g - 1]`.
    pub group_labels: Vec<String>,
}

impl Schema {
    pub fn new(qids: Vec<String>, protected: impl Into<String>, group_labels: Vec<String>) -> Result<Self> {
        let schema = Schema { qids, protected: protected.into(), group_labels };
        schema.validate()?;
        Ok(schema)
    }

    /// Layout produced by [`generate_synthetic`]: four name/address QIDs and
    /// a `gender` column.
    pub fn synthetic(groups: usize) -> Self {
        let group_labels = if groups == 2 {
            vec!["m".to_string(), "f".to_string()]
        } else {
            (1..=groups).map(|g| format!("g{g}")).collect()
        };
        Schema {
            qids: ["given_name", "surname", "suburb", "postcode"].iter().map(|s| s.to_string()).collect(),
            protected: "gender".to_string(),
            group_labels,
        }
    }

    pub fn group_count(&self) -> usize {
        self.group_labels.len()
    }

    pub fn group_of(&self, label: &str) -> Option<GroupId> {
        self.group_labels.iter().position(|l| l == label).map(GroupId::from_index)
    }

    pub fn label_of(&self, group: GroupId) -> Option<&str> {
        self.group_labels.get(group.index()).map(String::as_str)
    }

    fn validate(&self) -> Result<()> {
        if self.qids.is_empty() {
            return Err(Error::Schema("at least one QID column is required".into()));
        }
        if self.group_labels.is_empty() {
            return Err(Error::Schema("at least one group label is required".into()));
        }
        let labels: HashSet<_> = self.group_labels.iter().collect();
        if labels.len() != self.group_labels.len() {
            return Err(Error::Schema("group labels must be distinct".into()));
        }
        let mut cols: HashSet<&str> = HashSet::new();
        for c in std::iter::once(ENTITY_ID_COLUMN).chain(self.qids.iter().map(String::as_str)).chain([self.protected.as_str()]) {
            if !cols.insert(c) {
                return Err(Error::Schema(format!("column {c:?} listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub entity_id: String,
    /// `(name, value)` pairs in schema order.
    pub attributes: Vec<(String, String)>,
    pub group: GroupId,
}

impl Record {
    pub fn new(entity_id: impl Into<String>, attributes: Vec<(String, String)>, group: GroupId) -> Self {
        Record { entity_id: entity_id.into(), attributes, group }
    }

    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub schema: Schema,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Checks id uniqueness and group range before wrapping.
    pub fn new(schema: Schema, records: Vec<Record>) -> Result<Self> {
        schema.validate()?;
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.entity_id.is_empty() {
                return Err(Error::Integrity("record with empty entity_id".into()));
            }
            if !seen.insert(r.entity_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate entity_id {:?}", r.entity_id)));
            }
            if r.group.0 == 0 || r.group.index() >= schema.group_count() {
                return Err(Error::Schema(format!(
                    "record {:?} has group {} outside 1..={}",
                    r.entity_id,
                    r.group,
                    schema.group_count()
                )));
            }
        }
        Ok(Dataset { schema, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.schema.group_count()];
        for r in &self.records {
            sizes[r.group.index()] += 1;
        }
        sizes
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.entity_id.as_str()).collect()
    }
}

/// One-to-one set of true matches between party A and party B.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pairs: Vec<(String, String)>,
    a_to_b: HashMap<String, String>,
}

impl GroundTruth {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut a_to_b = HashMap::with_capacity(pairs.len());
        let mut b_seen = HashSet::with_capacity(pairs.len());
        for (a, b) in &pairs {
            if a_to_b.insert(a.clone(), b.clone()).is_some() {
                return Err(Error::Integrity(format!("id {a:?} appears in more than one match")));
            }
            if !b_seen.insert(b.clone()) {
                return Err(Error::Integrity(format!("id {b:?} appears in more than one match")));
            }
        }
        Ok(GroundTruth { pairs, a_to_b })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn is_match(&self, id_a: &str, id_b: &str) -> bool {
        self.a_to_b.get(id_a).is_some_and(|b| b == id_b)
    }

    pub fn partner_of(&self, id_a: &str) -> Option<&str> {
        self.a_to_b.get(id_a).map(String::as_str)
    }
}

/// Reads a header-first UTF-8 CSV laid out as `entity_id, QIDs..., protected`.
/// Extra columns are ignored.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name:?}", path.display())))
    };
    let id_col = column(ENTITY_ID_COLUMN)?;
    let qid_cols = schema.qids.iter().map(|q| column(q)).collect::<Result<Vec<_>>>()?;
    let group_col = column(&schema.protected)?;

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let label = row.get(group_col).unwrap_or("").trim();
        let group = schema
            .group_of(label)
            .ok_or_else(|| Error::Schema(format!("unknown group label {label:?} in {}", path.display())))?;
        let attributes = schema
            .qids
            .iter()
            .zip(&qid_cols)
            .map(|(name, &c)| (name.clone(), row.get(c).unwrap_or("").to_string()))
            .collect();
        records.push(Record::new(row.get(id_col).unwrap_or("").trim(), attributes, group));
    }
    Dataset::new(schema.clone(), records)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![ENTITY_ID_COLUMN.to_string()];
    header.extend(dataset.schema.qids.iter().cloned());
    header.push(dataset.schema.protected.clone());
    w.write_record(&header)?;
    for r in &dataset.records {
        let mut row = vec![r.entity_id.clone()];
        for q in &dataset.schema.qids {
            row.push(r.attribute(q).unwrap_or("").to_string());
        }
        row.push(dataset.schema.label_of(r.group).unwrap_or("").to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut pairs = Vec::new();
    for row in reader.records() {
        let row = row?;
        match (row.get(0), row.get(1)) {
            (Some(a), Some(b)) => pairs.push((a.trim().to_string(), b.trim().to_string())),
            _ => {
                return Err(Error::Format { path: path.to_path_buf(), detail: "expected two columns id_a,id_b".into() });
            }
        }
    }
    GroundTruth::new(pairs)
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id_a", "id_b"])?;
    for (a, b) in truth.pairs() {
        w.write_record([a, b])?;
    }
    w.flush()?;
    Ok(())
}

fn word_list(raw: &'static str) -> Vec<&'static str> {
    raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// Built-in attribute pools: given names, surnames and suburbs.
pub fn attribute_pools() -> (Vec<&'static str>, Vec<&'static str>, Vec<&'static str>) {
    (word_list(GIVEN_NAMES), word_list(SURNAMES), word_list(SUBURBS))
}

/// Splits `n` into per-group counts proportional to `proportions`
/// (largest-remainder rounding, so each count is within one of `n * p`).
pub fn apportion(n: usize, proportions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (raw[i] - raw[i].floor(), raw[j] - raw[j].floor());
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn random_person(rng: &mut StreamRng, pools: &(Vec<&'static str>, Vec<&'static str>, Vec<&'static str>)) -> Vec<String> {
    let (given, surnames, suburbs) = pools;
    vec![
        given[rng.random_range(0..given.len())].to_string(),
        surnames[rng.random_range(0..surnames.len())].to_string(),
        suburbs[rng.random_range(0..suburbs.len())].to_string(),
        format!("{}", rng.random_range(2000..4000)),
    ]
}

/// Builds two parties' datasets of `n` records each that share
/// `round(overlap * n)` entities. Party A ids are `A…`, party B ids are `B…`;
/// shared entities carry identical attributes (apply [`corrupt_dataset`]
/// afterwards to introduce errors).
pub fn generate_synthetic(
    n: usize,
    overlap: f64,
    group_proportions: &[f64],
    seed: u64,
) -> Result<(Dataset, Dataset, GroundTruth)> {
    if n == 0 {
        return Err(Error::EmptyInput("synthetic record count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0,1]")));
    }
    if group_proportions.is_empty() || group_proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config("group proportions must lie in [0,1]".into()));
    }
    let total: f64 = group_proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("group proportions sum to {total}, expected 1")));
    }

    let pools = attribute_pools();
    let schema = Schema::synthetic(group_proportions.len());
    let shared = (overlap * n as f64).round() as usize;
    let counts = apportion(n, group_proportions);

    // Party A: exact group counts in shuffled order.
    let mut rng = rng::stream(seed, "synthetic/groups", &[]);
    let mut groups_a: Vec<GroupId> =
        counts.iter().enumerate().flat_map(|(g, &c)| std::iter::repeat_n(GroupId::from_index(g), c)).collect();
    groups_a.shuffle(&mut rng);

    // Party B: the shared entities keep their A group, the rest complete B's counts.
    let mut remaining = counts.clone();
    for g in &groups_a[..shared] {
        remaining[g.index()] -= 1;
    }
    let mut groups_b_only: Vec<GroupId> =
        remaining.iter().enumerate().flat_map(|(g, &c)| std::iter::repeat_n(GroupId::from_index(g), c)).collect();
    groups_b_only.shuffle(&mut rng);

    let mut attr_rng = rng::stream(seed, "synthetic/attributes", &[]);
    let named = |values: Vec<String>| -> Vec<(String, String)> { schema.qids.iter().cloned().zip(values).collect() };

    let mut a_records = Vec::with_capacity(n);
    for (i, &g) in groups_a.iter().enumerate() {
        a_records.push(Record::new(format!("A{i:06}"), named(random_person(&mut attr_rng, &pools)), g));
    }
    let mut b_records: Vec<Record> = Vec::with_capacity(n);
    for a in &a_records[..shared] {
        b_records.push(Record::new(String::new(), a.attributes.clone(), a.group));
    }
    for &g in &groups_b_only {
        b_records.push(Record::new(String::new(), named(random_person(&mut attr_rng, &pools)), g));
    }
    // Hide the shared prefix by shuffling B before assigning its ids.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut truth = Vec::with_capacity(shared);
    let mut b_shuffled = Vec::with_capacity(n);
    for (new_pos, &old_pos) in order.iter().enumerate() {
        let mut r = b_records[old_pos].clone();
        r.entity_id = format!("B{new_pos:06}");
        if old_pos < shared {
            truth.push((a_records[old_pos].entity_id.clone(), r.entity_id.clone()));
        }
        b_shuffled.push(r);
    }
    truth.sort();

    Ok((
        Dataset::new(schema.clone(), a_records)?,
        Dataset::new(schema, b_shuffled)?,
        GroundTruth::new(truth)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EditOp {
    Insert,
    Delete,
    Substitute,
    Transpose,
    /// OCR / phonetic confusion from a small fixed table.
    Confusion,
}

impl std::str::FromStr for EditOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "insert" => Ok(EditOp::Insert),
            "delete" => Ok(EditOp::Delete),
            "substitute" => Ok(EditOp::Substitute),
            "transpose" => Ok(EditOp::Transpose),
            "confusion" | "ocr" => Ok(EditOp::Confusion),
            other => Err(Error::Config(format!("unknown edit operation {other:?}"))),
        }
    }
}

/// Pairs substituted in either direction by [`EditOp::Confusion`].
const CONFUSIONS: &[(&str, &str)] = &[
    ("ph", "f"),
    ("ck", "k"),
    ("rn", "m"),
    ("o", "0"),
    ("l", "1"),
    ("s", "5"),
    ("b", "8"),
    ("c", "k"),
    ("ie", "y"),
    ("z", "s"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    /// Probability that a record is selected for corruption.
    pub rate: f64,
    /// Optional per-group override of `rate`, indexed by group - 1.
    pub group_rates: Option<Vec<f64>>,
    pub edit_ops: Vec<EditOp>,
    pub ops_per_record: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            rate: 0.5,
            group_rates: None,
            edit_ops: vec![EditOp::Insert, EditOp::Delete, EditOp::Substitute, EditOp::Transpose],
            ops_per_record: 1,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = std::iter::once(&self.rate).chain(self.group_rates.iter().flatten());
        for r in rates {
            if !(0.0..=1.0).contains(r) {
                return Err(Error::Config(format!("corruption rate {r} outside [0,1]")));
            }
        }
        if self.ops_per_record == 0 {
            return Err(Error::Config("ops_per_record must be at least 1".into()));
        }
        if self.edit_ops.is_empty() {
            return Err(Error::Config("no edit operations enabled".into()));
        }
        Ok(())
    }

    pub fn rate_for(&self, group: GroupId) -> f64 {
        self.group_rates.as_ref().and_then(|r| r.get(group.index()).copied()).unwrap_or(self.rate)
    }
}

fn random_letter_like(rng: &mut StreamRng, like: char) -> char {
    if like.is_ascii_digit() {
        char::from(b'0' + rng.random_range(0..10u8))
    } else {
        char::from(b'a' + rng.random_range(0..26u8))
    }
}

fn substitute(chars: &mut [char], rng: &mut StreamRng) {
    let pos = rng.random_range(0..chars.len());
    let old = chars[pos];
    let mut c = random_letter_like(rng, old);
    while c == old {
        c = random_letter_like(rng, old);
    }
    chars[pos] = c;
}

fn apply_op(value: &str, op: EditOp, rng: &mut StreamRng) -> String {
    let mut chars: Vec<char> = value.chars().collect();
    match op {
        EditOp::Insert => {
            let pos = rng.random_range(0..=chars.len());
            let like = chars.get(pos.min(chars.len().saturating_sub(1))).copied().unwrap_or('a');
            chars.insert(pos, random_letter_like(rng, like));
        }
        EditOp::Delete if chars.len() >= 2 => {
            chars.remove(rng.random_range(0..chars.len()));
        }
        EditOp::Transpose => {
            let candidates: Vec<usize> = (0..chars.len().saturating_sub(1)).filter(|&i| chars[i] != chars[i + 1]).collect();
            if candidates.is_empty() {
                substitute(&mut chars, rng);
            } else {
                let i = candidates[rng.random_range(0..candidates.len())];
                chars.swap(i, i + 1);
            }
        }
        EditOp::Confusion => {
            let lower = value.to_lowercase();
            let hits: Vec<(usize, &str, &str)> = CONFUSIONS
                .iter()
                .flat_map(|&(x, y)| [(x, y), (y, x)])
                .flat_map(|(from, to)| lower.match_indices(from).map(move |(i, _)| (i, from, to)))
                .collect();
            if hits.is_empty() {
                substitute(&mut chars, rng);
            } else {
                let (i, from, to) = hits[rng.random_range(0..hits.len())];
                return format!("{}{}{}", &lower[..i], to, &lower[i + from.len()..]);
            }
        }
        // Deleting the only character would blank the attribute.
        EditOp::Delete | EditOp::Substitute => substitute(&mut chars, rng),
    }
    chars.into_iter().collect()
}

/// Applies `ops_per_record` random edits to the record's attribute values if
/// the record is selected at its group's corruption rate. The entity id and
/// group are never touched.
pub fn corrupt_record(record: &Record, config: &CorruptionConfig, seed: u64) -> Result<Record> {
    config.validate()?;
    let editable: Vec<usize> =
        record.attributes.iter().enumerate().filter(|(_, (_, v))| !v.is_empty()).map(|(i, _)| i).collect();
    if editable.is_empty() {
        return Err(Error::EmptyInput(format!("record {:?} has no non-empty attribute", record.entity_id)));
    }
    let mut rng = rng::stream(seed, "corrupt", &[]);
    let mut out = record.clone();
    if rng.random::<f64>() >= config.rate_for(record.group) {
        return Ok(out);
    }
    for _ in 0..config.ops_per_record {
        let attr = editable[rng.random_range(0..editable.len())];
        let op = config.edit_ops[rng.random_range(0..config.edit_ops.len())];
        let edited = apply_op(&out.attributes[attr].1, op, &mut rng);
        out.attributes[attr].1 = edited;
    }
    Ok(out)
}

/// Corrupts every record of `dataset` with an independent per-record stream.
pub fn corrupt_dataset(dataset: &Dataset, config: &CorruptionConfig, seed: u64) -> Result<Dataset> {
    let records = dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| corrupt_record(r, config, rng::derive_seed(seed, "corrupt/record", &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset.schema.clone(), records)
}
