use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Category a matrix product is booked under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FlopKind {
    Encoder,
    Attention,
    Ffn,
    Gate,
    Expert,
    Head,
    Other,
}

impl FlopKind {
    pub const ALL: [FlopKind; 7] = [
        FlopKind::Encoder,
        FlopKind::Attention,
        FlopKind::Ffn,
        FlopKind::Gate,
        FlopKind::Expert,
        FlopKind::Head,
        FlopKind::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopKind::Encoder => "encoder",
            FlopKind::Attention => "attention",
            FlopKind::Ffn => "ffn",
            FlopKind::Gate => "gate",
            FlopKind::Expert => "expert",
            FlopKind::Head => "head",
            FlopKind::Other => "other",
        }
    }
}

/// Exact forward FLOP counts of matrix products (`2*m*n*k` each), per kind.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    counters: BTreeMap<FlopKind, u64>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, kind: FlopKind, flops: u64) {
        if flops == 0 {
            return;
        }
        *self.counters.entry(kind).or_insert(0) += flops;
    }

    pub fn record_matmul(&mut self, kind: FlopKind, m: usize, k: usize, n: usize) {
        self.record(kind, 2 * (m as u64) * (k as u64) * (n as u64));
    }

    pub fn get(&self, kind: FlopKind) -> u64 {
        self.counters.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counters.values().sum()
    }

    pub fn merge(&mut self, other: &FlopLedger) {
        for (&k, &v) in &other.counters {
            self.record(k, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (FlopKind, u64)> + '_ {
        self.counters.iter().map(|(&k, &v)| (k, v))
    }
}

impl fmt::Display for FlopLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.iter() {
            write!(f, "{}={} ", k.name(), v)?;
        }
        write!(f, "total={}", self.total())
    }
}
