//! Privacy-preserving record linkage over Bloom-filter encodings.
//!
//! The pipeline is: person records ([`records`]) are encoded into
//! cryptographic long-term keys ([`encoding`]), grouped into bins by a
//! projection of their bits ([`blocking`]), padded with per-group dummy
//! records drawn from Laplace noise ([`dp`]), then compared and classified
//! by a linkage unit ([`linkage`]). The closed-form models in
//! [`analytics`] drive the fairness- and cost-aware parameter searches in
//! [`optimize`], and [`experiment`] ties everything into reproducible
//! sweeps.

pub mod analytics;
pub mod blocking;
pub mod dp;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod linkage;
pub mod optimize;
pub mod records;
pub mod rng;

pub use error::{Error, Result};

/// Protected-feature group, numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u16);

impl GroupId {
    /// Zero-based position of this group in per-group vectors.
    pub fn index(self) -> usize {
        usize::from(self.0) - 1
    }

    pub fn from_index(index: usize) -> Self {
        GroupId(u16::try_from(index + 1).expect("group index overflow"))
    }

    /// Iterator over groups `1..=count`.
    pub fn all(count: usize) -> impl Iterator<Item = GroupId> {
        (0..count).map(GroupId::from_index)
    }
}

impl std::fmt::Display for GroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
