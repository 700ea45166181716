//! Expert co-activation statistics.
//!
//! A [`CollaborationMatrix`] counts, per layer, how often each unordered pair
//! of experts is selected for the same token. From it we derive the
//! row-normalized collaboration frequencies, the entropy of each row (the
//! expert's collaboration degree, natural log), and the per-expert list of
//! most frequent partners used by constrained routing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::RoutingDecision;

/// Symmetric `N x N` co-activation counts with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollaborationMatrix {
    n: usize,
    layer_id: usize,
    tokens_seen: u64,
    counts: Vec<u64>,
}

impl CollaborationMatrix {
    pub fn new(num_experts: usize, layer_id: usize) -> Self {
        CollaborationMatrix {
            n: num_experts,
            layer_id,
            tokens_seen: 0,
            counts: vec![0; num_experts * num_experts],
        }
    }

    /// Builds a matrix from explicit counts, checking symmetry and the diagonal.
    pub fn from_counts(counts: Vec<Vec<u64>>, layer_id: usize, tokens_seen: u64) -> Result<Self> {
        let n = counts.len();
        let mut flat = Vec::with_capacity(n * n);
        for (i, row) in counts.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            flat.extend_from_slice(row);
        }
        let m = CollaborationMatrix {
            n,
            layer_id,
            tokens_seen,
            counts: flat,
        };
        for i in 0..n {
            if m.get(i, i) != 0 {
                return Err(Error::config(format!("diagonal entry ({i}, {i}) must be zero")));
            }
            for j in i + 1..n {
                if m.get(i, j) != m.get(j, i) {
                    return Err(Error::config(format!("counts are not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(m)
    }

    pub fn num_experts(&self) -> usize {
        self.n
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.n..(i + 1) * self.n]
    }

    /// Sum over `i < j`; each co-activated pair contributes once.
    pub fn upper_triangle_sum(&self) -> u64 {
        (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum()
    }

    /// Records one routed token.
    pub fn accumulate(&mut self, decision: &RoutingDecision) -> Result<()> {
        let sel = decision.selected();
        if let Some(&(bad, _)) = sel.iter().find(|(e, _)| *e >= self.n) {
            return Err(Error::internal(format!(
                "expert id {bad} out of range for {} experts",
                self.n
            )));
        }
        for a in 0..sel.len() {
            for b in a + 1..sel.len() {
                let (i, j) = (sel[a].0, sel[b].0);
                if i == j {
                    return Err(Error::internal(format!("expert {i} selected twice")));
                }
                self.counts[i * self.n + j] += 1;
                self.counts[j * self.n + i] += 1;
            }
        }
        self.tokens_seen += 1;
        Ok(())
    }

    pub fn accumulate_all<'a>(&mut self, decisions: impl IntoIterator<Item = &'a RoutingDecision>) -> Result<()> {
        decisions.into_iter().try_for_each(|d| self.accumulate(d))
    }

    /// Elementwise sum of two shards of the same layer.
    pub fn merge(&self, other: &CollaborationMatrix) -> Result<CollaborationMatrix> {
        if self.n != other.n || self.layer_id != other.layer_id {
            return Err(Error::config(format!(
                "cannot merge layer {} ({} experts) with layer {} ({} experts)",
                self.layer_id, self.n, other.layer_id, other.n
            )));
        }
        Ok(CollaborationMatrix {
            n: self.n,
            layer_id: self.layer_id,
            tokens_seen: self.tokens_seen + other.tokens_seen,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn profile(&self) -> CollaborationProfile {
        profile(self)
    }

    pub fn extract_top_t(&self, t: usize) -> Result<TopTTable> {
        extract_top_t(self, t)
    }

    /// Writes the grid as CSV (`layer,i,j,count`, row-major) preceded by one
    /// `#` metadata line carrying the layer, expert count and tokens seen.
    pub fn write_heatmap<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "# layer={} experts={} tokens_seen={}",
            self.layer_id, self.n, self.tokens_seen
        )?;
        writeln!(out, "layer,i,j,count")?;
        for i in 0..self.n {
            for j in 0..self.n {
                writeln!(out, "{},{},{},{}", self.layer_id, i, j, self.get(i, j))?;
            }
        }
        Ok(())
    }

    pub fn export_heatmap(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_heatmap(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Collaboration frequencies and entropy-based degrees for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollaborationProfile {
    pub layer_id: usize,
    /// Row-normalized counts; rows of experts never co-activated are all zero.
    pub frequencies: Vec<Vec<f64>>,
    /// Entropy of each row, `None` when the expert was never co-activated.
    pub degrees: Vec<Option<f64>>,
    /// Mean of the defined degrees, `None` if no expert was ever co-activated.
    pub layer_degree: Option<f64>,
}

impl CollaborationProfile {
    pub fn never_coactivated(&self) -> impl Iterator<Item = usize> + '_ {
        self.degrees
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_none())
            .map(|(i, _)| i)
    }
}

pub fn profile(matrix: &CollaborationMatrix) -> CollaborationProfile {
    let n = matrix.num_experts();
    let mut frequencies = Vec::with_capacity(n);
    let mut degrees = Vec::with_capacity(n);
    for i in 0..n {
        let row = matrix.row(i);
        let total: u64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, c)| c).sum();
        if total == 0 {
            frequencies.push(vec![0.0; n]);
            degrees.push(None);
            continue;
        }
        let freq: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &c)| if j == i { 0.0 } else { c as f64 / total as f64 })
            .collect();
        let entropy = freq
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum::<f64>();
        frequencies.push(freq);
        // a single partner is exactly zero, not -0.0
        degrees.push(Some(entropy.max(0.0)));
    }
    let defined: Vec<f64> = degrees.iter().flatten().copied().collect();
    let layer_degree = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    CollaborationProfile {
        layer_id: matrix.layer_id(),
        frequencies,
        degrees,
        layer_degree,
    }
}

/// For every expert, its `t` most frequent collaborators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopTTable {
    t: usize,
    rows: Vec<Vec<usize>>,
}

impl TopTTable {
    /// Validates that every row has the same length `t` in `[1, N-1]`, holds
    /// distinct in-range ids, and never lists its own expert.
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if n < 2 || t == 0 || t > n - 1 {
            return Err(Error::config(format!(
                "collaborator rows must hold between 1 and N-1 entries (N = {n}, T = {t})"
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::config(format!("row {i} has {} entries, expected {t}", row.len())));
            }
            let mut seen = vec![false; n];
            for &j in row {
                if j >= n || j == i || seen[j] {
                    return Err(Error::config(format!("row {i} has invalid or repeated collaborator {j}")));
                }
                seen[j] = true;
            }
        }
        Ok(TopTTable { t, rows })
    }

    /// Every row lists all other experts in index order.
    pub fn full(num_experts: usize) -> Result<Self> {
        TopTTable::from_rows(
            (0..num_experts)
                .map(|i| (0..num_experts).filter(|&j| j != i).collect())
                .collect(),
        )
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn num_experts(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, expert: usize) -> &[usize] {
        &self.rows[expert]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }
}

pub fn extract_top_t(matrix: &CollaborationMatrix, t: usize) -> Result<TopTTable> {
    let n = matrix.num_experts();
    if t == 0 || t + 1 > n {
        return Err(Error::config(format!("T must lie in [1, {}], got {t}", n.saturating_sub(1))));
    }
    let rows = (0..n)
        .map(|i| {
            let row = matrix.row(i);
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
            others.truncate(t);
            others
        })
        .collect();
    Ok(TopTTable { t, rows })
}

/// A table of `t` distinct random collaborators per expert, never itself.
/// Row `i` of layer `l` depends only on `(seed, l)`.
pub fn random_top_t(num_experts: usize, t: usize, seed: u64, layer: usize) -> Result<TopTTable> {
    if t == 0 || t + 1 > num_experts {
        return Err(Error::config(format!(
            "T must lie in [1, {}], got {t}",
            num_experts.saturating_sub(1)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    let rows = (0..num_experts)
        .map(|i| {
            let mut others: Vec<usize> = (0..num_experts).filter(|&j| j != i).collect();
            others.shuffle(&mut rng);
            others.truncate(t);
            others
        })
        .collect();
    TopTTable::from_rows(rows)
}

pub fn merge(a: &CollaborationMatrix, b: &CollaborationMatrix) -> Result<CollaborationMatrix> {
    a.merge(b)
}
