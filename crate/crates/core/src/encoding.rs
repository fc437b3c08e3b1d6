//! Record-level Bloom filter (CLK) encoding, Dice similarity and bin labels.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::records::Record;
use crate::{rng, Error, GroupId, Result};

/// Fixed-length bit vector. Bit `i` lives in word `i / 64` at position `i % 64`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bits {
    words: Vec<u64>,
    len: usize,
}

impl Bits {
    pub fn zeros(len: usize) -> Self {
        Bits { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut b = Bits::zeros(bits.len());
        for (i, &v) in bits.iter().enumerate() {
            b.set(i, v);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Popcount of `self AND other`; lengths must agree.
    pub fn and_count(&self, other: &Bits) -> usize {
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }

    pub fn hamming(&self, other: &Bits) -> usize {
        self.words.iter().zip(&other.words).map(|(a, b)| (a ^ b).count_ones() as usize).sum()
    }

    pub fn complement(&self) -> Bits {
        let mut out = Bits::zeros(self.len);
        for i in 0..self.len {
            out.set(i, !self.get(i));
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// Hex digits, most significant bit first, zero-padded to a multiple of 4 bits.
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.len.div_ceil(4));
        for chunk in 0..self.len.div_ceil(4) {
            let mut nibble = 0u32;
            for j in 0..4 {
                let i = chunk * 4 + j;
                nibble = nibble << 1 | u32::from(i < self.len && self.get(i));
            }
            s.push(char::from_digit(nibble, 16).unwrap());
        }
        s
    }

    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        if hex.len() != len.div_ceil(4) {
            return Err(Error::Dimension { expected: len, found: hex.len() * 4 });
        }
        let mut b = Bits::zeros(len);
        for (chunk, c) in hex.chars().enumerate() {
            let nibble = c.to_digit(16).ok_or_else(|| Error::Domain(format!("invalid hex digit {c:?}")))?;
            for j in 0..4 {
                let i = chunk * 4 + j;
                let bit = nibble >> (3 - j) & 1 == 1;
                if i < len {
                    b.set(i, bit);
                } else if bit {
                    return Err(Error::Domain("non-zero padding bits in hex vector".into()));
                }
            }
        }
        Ok(b)
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bits({}:{})", self.len, self.to_hex())
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Parameters shared by both parties.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodingConfig {
    /// Filter length in bits.
    pub n_l: usize,
    /// Hash functions per q-gram.
    pub k: usize,
    pub q: usize,
    /// Bit positions projected into a bin label, in order.
    pub label_positions: Vec<usize>,
    pub hash_seed: u64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig::new(300, 30, 2, 30, 0x5eed).expect("default encoding config is valid")
    }
}

impl EncodingConfig {
    /// Label positions default to the first `n_b` entries of a permutation of
    /// `0..n_l` keyed by `hash_seed`.
    pub fn new(n_l: usize, k: usize, q: usize, n_b: usize, hash_seed: u64) -> Result<Self> {
        if n_b > n_l {
            return Err(Error::Config(format!("label length {n_b} exceeds filter length {n_l}")));
        }
        let mut perm: Vec<usize> = (0..n_l).collect();
        perm.shuffle(&mut rng::stream(hash_seed, "encoding/label-positions", &[n_l as u64]));
        perm.truncate(n_b);
        let cfg = EncodingConfig { n_l, k, q, label_positions: perm, hash_seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_label_positions(mut self, positions: Vec<usize>) -> Result<Self> {
        self.label_positions = positions;
        self.validate()?;
        Ok(self)
    }

    pub fn n_b(&self) -> usize {
        self.label_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_l == 0 {
            return Err(Error::Config("filter length must be positive".into()));
        }
        if self.k == 0 || self.k > self.n_l {
            return Err(Error::Config(format!("k = {} must lie in 1..={}", self.k, self.n_l)));
        }
        if self.q == 0 {
            return Err(Error::Config("q must be at least 1".into()));
        }
        let mut seen = vec![false; self.n_l];
        for &p in &self.label_positions {
            if p >= self.n_l {
                return Err(Error::Config(format!("label position {p} out of range for n_l = {}", self.n_l)));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("label position {p} repeated")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    pub bits: Bits,
    pub is_dummy: bool,
    pub group: GroupId,
    /// Present for originals; cleared for dummies.
    pub source_entity_id: Option<String>,
}

impl BloomFilter {
    pub fn original(bits: Bits, group: GroupId, entity_id: impl Into<String>) -> Self {
        BloomFilter { bits, is_dummy: false, group, source_entity_id: Some(entity_id.into()) }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.count_ones()
    }
}

/// Projection of a filter onto the label positions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BinLabel(pub Bits);

impl BinLabel {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bools = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Domain(format!("invalid bin label character {c:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BinLabel(Bits::from_bools(&bools)))
    }

    /// Stable bytes for keying generator streams.
    pub fn key_bytes(&self) -> Vec<u8> {
        self.0.to_string().into_bytes()
    }
}

impl fmt::Display for BinLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodeWarning {
    /// No attribute produced a q-gram; the filter is all zeros.
    EmptyEncoding { entity_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub filter: BloomFilter,
    pub warning: Option<EncodeWarning>,
}

/// Contiguous q-grams of the trimmed, lowercased string. No padding.
pub fn qgrams(s: &str, q: usize) -> Vec<String> {
    assert!(q >= 1, "q must be at least 1");
    let chars: Vec<char> = s.trim().to_lowercase().chars().collect();
    if chars.len() < q {
        return Vec::new();
    }
    chars.windows(q).map(|w| w.iter().collect()).collect()
}

/// The `k` positions set by one q-gram: `h1 + i*h2 mod n_l` with `h1`, `h2`
/// taken from a SHA-256 digest keyed by the hash seed.
pub fn hash_positions(token: &str, cfg: &EncodingConfig) -> impl Iterator<Item = usize> {
    let mut h = Sha256::new();
    h.update(cfg.hash_seed.to_le_bytes());
    h.update(token.as_bytes());
    let d = h.finalize();
    let h1 = u64::from_le_bytes(d[..8].try_into().unwrap()) as u128;
    let h2 = u64::from_le_bytes(d[8..16].try_into().unwrap()) as u128;
    let n = cfg.n_l as u128;
    (0..cfg.k as u128).map(move |i| ((h1 + i * h2) % n) as usize)
}

pub fn encode_record(record: &Record, cfg: &EncodingConfig) -> Encoded {
    let mut bits = Bits::zeros(cfg.n_l);
    let mut tokens = 0usize;
    for (_, value) in &record.attributes {
        for gram in qgrams(value, cfg.q) {
            tokens += 1;
            for pos in hash_positions(&gram, cfg) {
                bits.set(pos, true);
            }
        }
    }
    let warning = (tokens == 0).then(|| {
        log::warn!("record {:?} produced an empty encoding", record.entity_id);
        EncodeWarning::EmptyEncoding { entity_id: record.entity_id.clone() }
    });
    Encoded { filter: BloomFilter::original(bits, record.group, record.entity_id.clone()), warning }
}

/// Dice coefficient `2c / (x1 + x2)`; two all-zero filters score 0.
pub fn dice(a: &BloomFilter, b: &BloomFilter) -> Result<f64> {
    dice_bits(&a.bits, &b.bits)
}

pub fn dice_bits(a: &Bits, b: &Bits) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), found: b.len() });
    }
    let total = a.count_ones() + b.count_ones();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * a.and_count(b) as f64 / total as f64)
}

pub fn bin_label(bf: &BloomFilter, cfg: &EncodingConfig) -> BinLabel {
    let bools: Vec<bool> = cfg.label_positions.iter().map(|&p| bf.bits.get(p)).collect();
    BinLabel(Bits::from_bools(&bools))
}

/// Mean fraction of set bits, for feeding a measured fill rate to the analytics.
pub fn mean_fill_rate<'a>(filters: impl IntoIterator<Item = &'a BloomFilter>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in filters {
        sum += f.popcount() as f64 / f.len() as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub const FILTER_FILE_VERSION: &str = "pprl-bloom v1";

/// Writes an owner-side filter file:
///
/// ```text
/// #pprl-bloom v1 n_l=<bits>
/// record_id,group,is_dummy,bits
/// <id>,<g>,<0|1>,<hex>
/// ```
///
/// The hex vector lists bit 0 as the most significant bit of the first digit.
pub fn write_filters(path: &Path, filters: &[BloomFilter], n_l: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "#{FILTER_FILE_VERSION} n_l={n_l}")?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["record_id", "group", "is_dummy", "bits"])?;
    for (i, f) in filters.iter().enumerate() {
        if f.len() != n_l {
            return Err(Error::Dimension { expected: n_l, found: f.len() });
        }
        let id = f.source_entity_id.clone().unwrap_or_else(|| format!("dummy{i}"));
        csv.write_record([id, f.group.to_string(), u8::from(f.is_dummy).to_string(), f.bits.to_hex()])?;
    }
    csv.flush()?;
    Ok(())
}

/// Parses the `#pprl-bloom v1 key=value ...` header line.
pub(crate) fn parse_header(path: &Path, line: &str) -> Result<Vec<(String, String)>> {
    let body = line
        .trim()
        .strip_prefix('#')
        .and_then(|l| l.strip_prefix(FILTER_FILE_VERSION))
        .ok_or_else(|| Error::Format { path: path.to_path_buf(), detail: format!("expected #{FILTER_FILE_VERSION} header") })?;
    Ok(body
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect())
}

pub(crate) fn header_value(path: &Path, header: &[(String, String)], key: &str) -> Result<usize> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::Format { path: path.to_path_buf(), detail: format!("header lacks {key}=") })
}

pub fn read_filters(path: &Path) -> Result<Vec<BloomFilter>> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header = parse_header(path, &first)?;
    let n_l = header_value(path, &header, "n_l")?;
    let mut csv = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in csv.records() {
        let row = row?;
        let bad = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.to_string() };
        let id = row.get(0).ok_or_else(|| bad("missing record_id"))?;
        let group: u16 = row.get(1).and_then(|g| g.parse().ok()).ok_or_else(|| bad("bad group"))?;
        let is_dummy = match row.get(2) {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(bad("bad is_dummy flag")),
        };
        let bits = Bits::from_hex(row.get(3).ok_or_else(|| bad("missing bits"))?, n_l)?;
        out.push(BloomFilter {
            bits,
            is_dummy,
            group: GroupId(group),
            source_entity_id: (!is_dummy).then(|| id.to_string()),
        });
    }
    Ok(out)
}
