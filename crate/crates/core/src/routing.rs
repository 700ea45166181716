//! Gate scoring and expert selection.
//!
//! Two routers share one selection rule: candidates are ranked by logit,
//! descending, with ties going to the lower expert index, and the chosen
//! logits are turned into weights by a max-shifted softmax over the chosen
//! set only.
//!
//! * [`route_topk`] picks the `k` best experts overall.
//! * [`route_c2r`] picks the best expert overall, then fills the remaining
//!   `k - 1` slots from that expert's row of a [`TopTTable`].
//!
//! When every table row lists all other experts the two routers agree bit
//! for bit, since both rank and normalize in exactly the same order.

use std::cmp::Ordering;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::TopTTable;

/// Model shape shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl MoEConfig {
    pub fn new(num_experts: usize, top_k: usize, hidden_dim: usize, num_layers: usize) -> Result<Self> {
        let cfg = MoEConfig {
            num_experts,
            top_k,
            hidden_dim,
            num_layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::config("number of experts must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(format!(
                "top-k must lie in [1, {}], got {}",
                self.num_experts, self.top_k
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden dimension must be positive"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("number of layers must be positive"));
        }
        Ok(())
    }
}

fn ensure_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::config(format!("{what} contains a non-finite value")))
    }
}

/// Gate projection of shape `d x N` (hidden dim by experts).
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights(Array2<f64>);

impl GateWeights {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        ensure_finite("gate weights", weights.iter())?;
        Ok(GateWeights(weights))
    }

    pub fn hidden_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding(Array1<f64>);

impl TokenEmbedding {
    pub fn new(values: impl Into<Array1<f64>>) -> Result<Self> {
        let values = values.into();
        ensure_finite("token embedding", values.iter())?;
        Ok(TokenEmbedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }
}

/// One score per expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterLogits(Vec<f64>);

impl RouterLogits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("router logits must not be empty"));
        }
        ensure_finite("router logits", values.iter())?;
        Ok(RouterLogits(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest logit, lower index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate().skip(1) {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// The experts chosen for one token, in descending logit order, with their
/// combine weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    selected: Vec<(usize, f64)>,
}

impl RoutingDecision {
    /// Builds a decision from externally produced `(expert, weight)` pairs,
    /// checking ids against `num_experts` and that the weights form a
    /// distribution.
    pub fn from_parts(selected: Vec<(usize, f64)>, num_experts: usize) -> Result<Self> {
        if selected.is_empty() {
            return Err(Error::config("routing decision selects no experts"));
        }
        let mut seen = vec![false; num_experts];
        for &(e, w) in &selected {
            if e >= num_experts {
                return Err(Error::config(format!(
                    "expert id {e} out of range for {num_experts} experts"
                )));
            }
            if seen[e] {
                return Err(Error::config(format!("expert id {e} selected twice")));
            }
            seen[e] = true;
            if !(w.is_finite() && w > 0.0 && w <= 1.0) {
                return Err(Error::config(format!("weight {w} for expert {e} is outside (0, 1]")));
            }
        }
        let total: f64 = selected.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("decision weights sum to {total}, expected 1")));
        }
        Ok(RoutingDecision { selected })
    }

    pub fn selected(&self) -> &[(usize, f64)] {
        &self.selected
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }

    pub fn experts(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().map(|(e, _)| *e)
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.selected.iter().map(|(_, w)| *w)
    }

    /// The highest-scoring selected expert.
    pub fn primary(&self) -> usize {
        self.selected[0].0
    }
}

/// `x . W_g`, one logit per expert.
pub fn gate_scores(x: &TokenEmbedding, w: &GateWeights) -> Result<RouterLogits> {
    if x.dim() != w.hidden_dim() {
        return Err(Error::config(format!(
            "embedding has dimension {} but gate expects {}",
            x.dim(),
            w.hidden_dim()
        )));
    }
    RouterLogits::new(x.as_array().dot(w.as_array()).to_vec())
}

fn by_logit_desc(logits: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| {
        logits[*b]
            .partial_cmp(&logits[*a])
            .expect("logits are finite")
            .then(a.cmp(b))
    }
}

/// Softmax over the logits of `chosen`, shifted by their maximum.
fn decision_from(logits: &[f64], chosen: &[usize]) -> RoutingDecision {
    let max = chosen
        .iter()
        .map(|&e| logits[e])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = chosen.iter().map(|&e| (logits[e] - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    RoutingDecision {
        selected: chosen
            .iter()
            .zip(exps)
            .map(|(&e, x)| (e, x / total))
            .collect(),
    }
}

/// Conventional top-K gating.
pub fn route_topk(logits: &RouterLogits, k: usize) -> Result<RoutingDecision> {
    let n = logits.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("top-k must lie in [1, {n}], got {k}")));
    }
    let scores = logits.as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    let cmp = by_logit_desc(scores);
    if k < n {
        order.select_nth_unstable_by(k - 1, &cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(&cmp);
    Ok(decision_from(scores, &order))
}

/// Collaboration-constrained routing: the global top-1 expert, then the
/// `k - 1` best-scoring experts drawn from its collaborator row.
pub fn route_c2r(logits: &RouterLogits, k: usize, table: &TopTTable) -> Result<RoutingDecision> {
    let n = logits.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("top-k must lie in [1, {n}], got {k}")));
    }
    if table.num_experts() != n {
        return Err(Error::config(format!(
            "collaborator table covers {} experts but logits have {n}",
            table.num_experts()
        )));
    }
    if table.t() < k - 1 {
        return Err(Error::config(format!(
            "collaborator rows hold {} experts, need at least k - 1 = {}",
            table.t(),
            k - 1
        )));
    }
    let scores = logits.as_slice();
    let top = logits.argmax();
    let mut rest = table.row(top).to_vec();
    rest.sort_unstable_by(by_logit_desc(scores));
    rest.truncate(k - 1);

    let mut chosen = Vec::with_capacity(k);
    chosen.push(top);
    chosen.extend(rest);
    Ok(decision_from(scores, &chosen))
}
