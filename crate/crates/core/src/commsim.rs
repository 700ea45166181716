//! Token-copy accounting for the expert-parallel all-to-all.
//!
//! A conventional dispatch sends one copy of a token per selected expert.
//! Deduplicated dispatch sends one copy per distinct destination device and
//! replicates it locally. The fraction of copies saved is the redundancy
//! `r`; multiplied by the share `p` of runtime spent in the all-to-all it
//! gives the estimated end-to-end speedup.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::{self, PlacementMap, PlacementScore, PlacementStrategy};
use crate::profiler::CollaborationMatrix;
use crate::routing::RoutingDecision;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DispatchAccount {
    pub tokens: u64,
    /// One copy per selected expert.
    pub naive_copies: u64,
    /// One copy per distinct device holding a selected expert.
    pub dedup_copies: u64,
    /// Deduplicated copies received by each device.
    pub per_device_recv: Vec<u64>,
    /// Deduplicated copies sent from each device, with tokens homed round-robin.
    pub per_device_sent: Vec<u64>,
    /// Tokens whose experts all live on one device.
    pub single_device_tokens: u64,
}

impl DispatchAccount {
    pub fn empty(ep: usize) -> Self {
        DispatchAccount {
            per_device_recv: vec![0; ep],
            per_device_sent: vec![0; ep],
            ..Default::default()
        }
    }

    /// Sum of two accounts over the same device count.
    pub fn combine(&self, other: &DispatchAccount) -> Result<DispatchAccount> {
        if self.per_device_recv.len() != other.per_device_recv.len() {
            return Err(Error::config("cannot combine accounts with different EP"));
        }
        let add = |a: &[u64], b: &[u64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Ok(DispatchAccount {
            tokens: self.tokens + other.tokens,
            naive_copies: self.naive_copies + other.naive_copies,
            dedup_copies: self.dedup_copies + other.dedup_copies,
            per_device_recv: add(&self.per_device_recv, &other.per_device_recv),
            per_device_sent: add(&self.per_device_sent, &other.per_device_sent),
            single_device_tokens: self.single_device_tokens + other.single_device_tokens,
        })
    }

    /// Dispatch plus the mirrored combine, assumed to move the same copies back.
    pub fn round_trip_naive_copies(&self) -> u64 {
        2 * self.naive_copies
    }

    pub fn round_trip_dedup_copies(&self) -> u64 {
        2 * self.dedup_copies
    }
}

pub fn account_dispatch(decisions: &[RoutingDecision], placement: &PlacementMap) -> Result<DispatchAccount> {
    let ep = placement.ep();
    let n = placement.num_experts();
    let mut acc = DispatchAccount::empty(ep);
    let mut hit = vec![false; ep];
    for (t, d) in decisions.iter().enumerate() {
        hit.fill(false);
        let mut devices = 0u64;
        for e in d.experts() {
            if e >= n {
                return Err(Error::config(format!(
                    "token {t} selects expert {e}, placement covers {n}"
                )));
            }
            let dev = placement.device_of(e);
            if !hit[dev] {
                hit[dev] = true;
                devices += 1;
                acc.per_device_recv[dev] += 1;
            }
        }
        acc.tokens += 1;
        acc.naive_copies += d.k() as u64;
        acc.dedup_copies += devices;
        acc.per_device_sent[t % ep] += devices;
        if devices == 1 {
            acc.single_device_tokens += 1;
        }
    }
    Ok(acc)
}

/// `1 - dedup / naive`.
pub fn redundancy_ratio(account: &DispatchAccount) -> Result<f64> {
    if account.naive_copies == 0 {
        return Err(Error::config("redundancy is undefined for an empty dispatch account"));
    }
    Ok(1.0 - account.dedup_copies as f64 / account.naive_copies as f64)
}

/// `r * p`, both in `[0, 1]`.
pub fn estimate_speedup(redundancy: f64, comm_fraction: f64) -> Result<f64> {
    for (name, v) in [("redundancy", redundancy), ("comm fraction", comm_fraction)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!("{name} {v} is outside [0, 1]")));
        }
    }
    Ok(redundancy * comm_fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupModel {
    pub ep: usize,
    pub comm_fraction: f64,
    pub redundancy: f64,
    pub estimated_speedup: f64,
}

impl SpeedupModel {
    pub fn new(ep: usize, redundancy: f64, comm_fraction: f64) -> Result<Self> {
        Ok(SpeedupModel {
            ep,
            comm_fraction,
            redundancy,
            estimated_speedup: estimate_speedup(redundancy, comm_fraction)?,
        })
    }
}

/// One measured point of the EP scaling study: token redundancy under
/// deduplicated dispatch, all-to-all share of runtime, and the reported
/// speedup estimate, all as fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpScalingPoint {
    pub ep: usize,
    pub redundancy: f64,
    pub comm_fraction: f64,
    pub reported_speedup: f64,
}

/// Reference EP scaling measurements for a 60-expert, top-4 model.
pub const REFERENCE_EP_SCALING: [EpScalingPoint; 5] = [
    EpScalingPoint { ep: 2, redundancy: 0.583, comm_fraction: 0.301, reported_speedup: 0.176 },
    EpScalingPoint { ep: 3, redundancy: 0.476, comm_fraction: 0.407, reported_speedup: 0.194 },
    EpScalingPoint { ep: 4, redundancy: 0.402, comm_fraction: 0.619, reported_speedup: 0.249 },
    EpScalingPoint { ep: 5, redundancy: 0.384, comm_fraction: 0.763, reported_speedup: 0.293 },
    EpScalingPoint { ep: 6, redundancy: 0.329, comm_fraction: 0.772, reported_speedup: 0.254 },
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FractionSource {
    PaperDefault,
    MeasuredExternal,
}

impl fmt::Display for FractionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FractionSource::PaperDefault => "paper-default",
            FractionSource::MeasuredExternal => "measured-external",
        })
    }
}

/// All-to-all share of runtime per EP degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommFractionTable {
    fractions: BTreeMap<usize, f64>,
    source: FractionSource,
}

impl CommFractionTable {
    pub fn new(fractions: BTreeMap<usize, f64>, source: FractionSource) -> Result<Self> {
        for (&ep, &p) in &fractions {
            if ep == 0 || !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("invalid comm fraction {p} for EP {ep}")));
            }
        }
        Ok(CommFractionTable { fractions, source })
    }

    /// The built-in fractions from [`REFERENCE_EP_SCALING`].
    pub fn paper_default() -> Self {
        CommFractionTable {
            fractions: REFERENCE_EP_SCALING.iter().map(|r| (r.ep, r.comm_fraction)).collect(),
            source: FractionSource::PaperDefault,
        }
    }

    pub fn get(&self, ep: usize) -> Option<f64> {
        self.fractions.get(&ep).copied()
    }

    pub fn source(&self) -> &FractionSource {
        &self.source
    }

    /// One `ep,fraction` pair per line; commas, tabs or spaces separate the
    /// fields. Blank lines, `#` comments and an `ep,...` header are skipped.
    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut fractions = BTreeMap::new();
        for (idx, line) in input.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("ep") {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            let [ep, p] = fields[..] else {
                return Err(Error::parse(lineno, "expected `ep,fraction`"));
            };
            let ep: usize = ep
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad EP value `{ep}`")))?;
            let p: f64 = p
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad fraction `{p}`")))?;
            if fractions.insert(ep, p).is_some() {
                return Err(Error::parse(lineno, format!("EP {ep} listed twice")));
            }
        }
        CommFractionTable::new(fractions, FractionSource::MeasuredExternal)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        CommFractionTable::read_from(BufReader::new(file))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ep: usize,
    pub placement: PlacementMap,
    pub score: PlacementScore,
    pub account: DispatchAccount,
    pub redundancy: f64,
    /// `None` when the fraction table has no entry for this EP.
    pub speedup: Option<SpeedupModel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ascending by EP.
    pub rows: Vec<SweepRow>,
    /// EP values that could not be evaluated, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Places, accounts and scores the same decisions at each EP degree.
pub fn sweep_ep(
    decisions: &[RoutingDecision],
    matrix: &CollaborationMatrix,
    ep_values: &[usize],
    fractions: &CommFractionTable,
    strategy: PlacementStrategy,
) -> Result<SweepResult> {
    let mut eps = ep_values.to_vec();
    eps.sort_unstable();
    eps.dedup();
    let mut result = SweepResult::default();
    for ep in eps {
        let placement = match placement::place(strategy, matrix, ep) {
            Ok(p) => p,
            Err(Error::Config(msg)) => {
                result.skipped.push((ep, msg));
                continue;
            }
            Err(e) => return Err(e),
        };
        let account = account_dispatch(decisions, &placement)?;
        let redundancy = redundancy_ratio(&account)?;
        let speedup = fractions
            .get(ep)
            .map(|p| SpeedupModel::new(ep, redundancy, p))
            .transpose()?;
        result.rows.push(SweepRow {
            ep,
            score: placement::score(matrix, &placement)?,
            placement,
            account,
            redundancy,
            speedup,
        });
    }
    Ok(result)
}
