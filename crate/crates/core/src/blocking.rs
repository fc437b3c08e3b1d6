//! Label-based binning and feature-level DP dummy injection.
//!
//! Records are binned by the projection of their filter onto the shared
//! label positions. For every bin and protected group a Laplace dummy count
//! is drawn from that group's budget, clamped to `[0, N_{b,g}]`, and that
//! many group members are copied with each bit flipped at the group's flip
//! probability. Dummies stay in their progenitor's bin and originals are
//! never removed.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::dp::{self, PrivacyBudget};
use crate::encoding::{self, bin_label, BinLabel, Bits, BloomFilter, EncodingConfig};
use crate::{rng, Error, GroupId, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bin {
    pub label: BinLabel,
    members: BTreeMap<GroupId, Vec<BloomFilter>>,
}

impl Bin {
    pub fn new(label: BinLabel) -> Self {
        Bin { label, members: BTreeMap::new() }
    }

    pub fn push(&mut self, filter: BloomFilter) {
        self.members.entry(filter.group).or_default().push(filter);
    }

    pub fn members(&self, group: GroupId) -> &[BloomFilter] {
        self.members.get(&group).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn groups(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.members.keys().copied()
    }

    /// All members, grouped by ascending group id.
    pub fn iter(&self) -> impl Iterator<Item = &BloomFilter> {
        self.members.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.members.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn original_count(&self, group: GroupId) -> usize {
        self.members(group).iter().filter(|f| !f.is_dummy).count()
    }

    pub fn dummy_count(&self, group: GroupId) -> usize {
        self.members(group).iter().filter(|f| f.is_dummy).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinnedDataset {
    pub n_l: usize,
    bins: BTreeMap<BinLabel, Bin>,
}

impl BinnedDataset {
    pub fn empty(n_l: usize) -> Self {
        BinnedDataset { n_l, bins: BTreeMap::new() }
    }

    pub fn bins(&self) -> impl Iterator<Item = &Bin> {
        self.bins.values()
    }

    pub fn bin(&self, label: &BinLabel) -> Option<&Bin> {
        self.bins.get(label)
    }

    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn len(&self) -> usize {
        self.bins.values().map(Bin::len).sum()
    }

    /// `N_{b,g}`: originals of `group` in the bin labelled `label`.
    pub fn group_count(&self, label: &BinLabel, group: GroupId) -> usize {
        self.bins.get(label).map_or(0, |b| b.original_count(group))
    }

    /// `N_{.,g}`: originals of `group` over all bins.
    pub fn group_total(&self, group: GroupId) -> usize {
        self.bins.values().map(|b| b.original_count(group)).sum()
    }

    pub fn dummy_total(&self) -> usize {
        self.bins.values().flat_map(|b| b.iter()).filter(|f| f.is_dummy).count()
    }

    pub fn max_group(&self) -> Option<GroupId> {
        self.bins.values().flat_map(|b| b.groups()).max()
    }

    pub fn filters(&self) -> impl Iterator<Item = &BloomFilter> {
        self.bins.values().flat_map(|b| b.iter())
    }

    fn insert(&mut self, label: BinLabel, filter: BloomFilter) {
        self.bins.entry(label.clone()).or_insert_with(|| Bin::new(label)).push(filter);
    }
}

/// Disjoint binning of filters by their label.
pub fn block_dataset(encoded: &[BloomFilter], cfg: &EncodingConfig) -> Result<BinnedDataset> {
    let mut out = BinnedDataset::empty(cfg.n_l);
    for f in encoded {
        if f.len() != cfg.n_l {
            return Err(Error::Dimension { expected: cfg.n_l, found: f.len() });
        }
        out.insert(bin_label(f, cfg), f.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Scenario {
    /// No noise.
    Baseline1,
    /// Feature-level DP with equal budgets and equal flips.
    Baseline2,
    /// Equal budgets, flips chosen to minimise the fairness loss.
    MethodA,
    /// Equal flips, budgets chosen to minimise the fairness loss under a fixed overall budget.
    MethodB,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Baseline1, Scenario::Baseline2, Scenario::MethodA, Scenario::MethodB];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Baseline1 => "baseline1",
            Scenario::Baseline2 => "baseline2",
            Scenario::MethodA => "method-a",
            Scenario::MethodB => "method-b",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "baseline1" | "baseline-1" => Ok(Scenario::Baseline1),
            "baseline2" | "baseline-2" => Ok(Scenario::Baseline2),
            "method-a" | "methoda" | "a" => Ok(Scenario::MethodA),
            "method-b" | "methodb" | "b" => Ok(Scenario::MethodB),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Per-run noise parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub per_group_eps: Vec<f64>,
    pub per_group_flip: Vec<f64>,
    pub overall_eps: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_group_eps.len() != self.per_group_flip.len() {
            return Err(Error::Config("per-group budget and flip lists differ in length".into()));
        }
        if let Some(f) = self.per_group_flip.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::Config(format!("flip probability {f} outside [0,1]")));
        }
        let all_equal = |v: &[f64]| v.windows(2).all(|w| w[0] == w[1]);
        match self.scenario {
            Scenario::Baseline1 => {}
            Scenario::Baseline2 => {
                if !all_equal(&self.per_group_eps) || !all_equal(&self.per_group_flip) {
                    return Err(Error::Config("baseline2 requires equal budgets and equal flips".into()));
                }
            }
            Scenario::MethodA => {
                if !all_equal(&self.per_group_eps) {
                    return Err(Error::Config("method-a requires equal per-group budgets".into()));
                }
            }
            Scenario::MethodB => {
                if !all_equal(&self.per_group_flip) {
                    return Err(Error::Config("method-b requires equal flips".into()));
                }
                let composed = dp::compose_budget(&self.per_group_eps)?;
                if (composed - self.overall_eps).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "method-b budgets compose to {composed}, expected {}",
                        self.overall_eps
                    )));
                }
            }
        }
        if self.scenario != Scenario::Baseline1 {
            dp::compose_budget(&self.per_group_eps)?;
        }
        Ok(())
    }

    pub fn budget(&self, sensitivity: f64) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.per_group_eps.clone(), sensitivity)
    }
}

/// Copy of `progenitor` with every bit inverted independently with
/// probability `flip`.
pub fn make_dummy<R: Rng + ?Sized>(progenitor: &BloomFilter, flip: f64, rng: &mut R) -> BloomFilter {
    let mut bits: Bits = progenitor.bits.clone();
    for i in 0..bits.len() {
        if rng.random::<f64>() < flip {
            bits.flip(i);
        }
    }
    BloomFilter { bits, is_dummy: true, group: progenitor.group, source_entity_id: None }
}

/// Generator used for the dummy count of one (bin, group).
pub fn count_stream(seed: u64, label: &BinLabel, group: GroupId) -> rng::StreamRng {
    rng::stream_with_bytes(seed, "blocking/count", &[u64::from(group.0)], &label.key_bytes())
}

fn dummy_stream(seed: u64, label: &BinLabel, group: GroupId) -> rng::StreamRng {
    rng::stream_with_bytes(seed, "blocking/dummies", &[u64::from(group.0)], &label.key_bytes())
}

/// Number of group-`g` dummies a bin with `originals` members receives.
pub fn clamped_dummy_count(seed: u64, label: &BinLabel, group: GroupId, originals: usize, eps: f64, delta_b: f64) -> Result<usize> {
    let drawn = dp::dummy_count_draw(eps, delta_b, &mut count_stream(seed, label, group))?;
    Ok((drawn as usize).min(originals))
}

fn perturb_bin(bin: &Bin, scenario: &ScenarioConfig, budget: &PrivacyBudget, seed: u64) -> Result<Bin> {
    let mut out = bin.clone();
    for group in bin.groups() {
        let originals: Vec<&BloomFilter> = bin.members(group).iter().filter(|f| !f.is_dummy).collect();
        let gi = group.index();
        let n = clamped_dummy_count(seed, &bin.label, group, originals.len(), budget.eps(gi), budget.sensitivity())?;
        if n == 0 {
            continue;
        }
        let flip = scenario.per_group_flip[gi];
        let mut rng = dummy_stream(seed, &bin.label, group);
        let chosen = rand::seq::index::sample(&mut rng, originals.len(), n);
        for idx in chosen.iter() {
            let dummy = make_dummy(originals[idx], flip, &mut rng);
            out.push(dummy);
        }
    }
    Ok(out)
}

/// Feature-level DP blocking of one party's bins. `seed` should be specific
/// to the party; both parties perturb independently.
pub fn apply_feature_level_dp(
    binned: &BinnedDataset,
    scenario: &ScenarioConfig,
    budget: &PrivacyBudget,
    seed: u64,
) -> Result<BinnedDataset> {
    scenario.validate()?;
    if scenario.scenario == Scenario::Baseline1 {
        return Ok(binned.clone());
    }
    if scenario.per_group_flip.len() != budget.groups() {
        return Err(Error::Config("flip list and budget cover different group counts".into()));
    }
    if let Some(g) = binned.max_group() {
        if g.index() >= budget.groups() {
            return Err(Error::Config(format!("group {g} has no budget (only {} groups configured)", budget.groups())));
        }
    }
    let perturbed = binned
        .bins
        .par_iter()
        .map(|(label, bin)| perturb_bin(bin, scenario, budget, seed).map(|b| (label.clone(), b)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BinnedDataset { n_l: binned.n_l, bins: perturbed.into_iter().collect() })
}

/// Writes the view released to the linkage unit plus a private sidecar.
///
/// Released file:
///
/// ```text
/// #pprl-bloom v1 n_l=<bits> n_b=<label bits> view=released
/// record_id,group,bin_label,bits
/// ```
///
/// Sidecar (`record_id,is_dummy,entity_id`) is for evaluation only. Record
/// ids are positions after a seeded shuffle within each bin, so the released
/// order does not reveal which members are dummies.
pub fn write_released(path: &Path, sidecar: &Path, binned: &BinnedDataset, shuffle_seed: u64) -> Result<()> {
    let n_b = binned.bins().next().map_or(0, |b| b.label.len());
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "#{} n_l={} n_b={n_b} view=released", encoding::FILTER_FILE_VERSION, binned.n_l)?;
    let mut released = csv::Writer::from_writer(w);
    released.write_record(["record_id", "group", "bin_label", "bits"])?;
    let mut private = csv::Writer::from_path(sidecar)?;
    private.write_record(["record_id", "is_dummy", "entity_id"])?;
    let mut next_id = 0usize;
    for bin in binned.bins() {
        let mut members: Vec<&BloomFilter> = bin.iter().collect();
        members.shuffle(&mut rng::stream_with_bytes(shuffle_seed, "blocking/release-order", &[], &bin.label.key_bytes()));
        let label = bin.label.to_string();
        for f in members {
            let id = next_id.to_string();
            next_id += 1;
            released.write_record([id.as_str(), &f.group.to_string(), &label, &f.bits.to_hex()])?;
            private.write_record([
                id.as_str(),
                if f.is_dummy { "1" } else { "0" },
                f.source_entity_id.as_deref().unwrap_or(""),
            ])?;
        }
    }
    released.flush()?;
    private.flush()?;
    Ok(())
}

/// Reads a released view back, restoring provenance from the sidecar.
pub fn read_released(path: &Path, sidecar: &Path) -> Result<BinnedDataset> {
    let bad = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    let mut provenance = std::collections::HashMap::new();
    for row in csv::Reader::from_path(sidecar)?.records() {
        let row = row?;
        let id = row.get(0).unwrap_or("").to_string();
        let is_dummy = row.get(1) == Some("1");
        let entity = row.get(2).filter(|e| !e.is_empty()).map(str::to_string);
        provenance.insert(id, (is_dummy, entity));
    }

    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header = encoding::parse_header(path, &first)?;
    let n_l = encoding::header_value(path, &header, "n_l")?;
    let mut out = BinnedDataset::empty(n_l);
    for row in csv::Reader::from_reader(reader).records() {
        let row = row?;
        let id = row.get(0).ok_or_else(|| bad("missing record_id".into()))?;
        let group: u16 = row.get(1).and_then(|g| g.parse().ok()).ok_or_else(|| bad(format!("bad group for {id}")))?;
        let label = BinLabel::parse(row.get(2).unwrap_or(""))?;
        let bits = Bits::from_hex(row.get(3).unwrap_or(""), n_l)?;
        let (is_dummy, entity) =
            provenance.get(id).cloned().ok_or_else(|| bad(format!("record {id} missing from sidecar")))?;
        out.insert(label, BloomFilter { bits, is_dummy, group: GroupId(group), source_entity_id: entity });
    }
    Ok(out)
}
