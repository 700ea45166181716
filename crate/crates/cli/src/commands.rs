//! The five subcommands. Each returns its results in memory and writes
//! them as reports under the configured output directory.

use std::fs;

use c2r_core::workload::{self, TracePayload, TraceRecord};
use c2r_core::{
    account_dispatch, estimate_speedup, extract_top_t, random_top_t, redundancy_ratio, route_c2r, route_topk,
    score, sweep_ep, CollaborationMatrix, CollaborationProfile, DispatchAccount, Error, Result,
    RoutingDecision, SpeedupModel, SweepRow, TopTTable, REFERENCE_EP_SCALING,
};

use crate::config::{check_top_t, load_layers, LayerInput, LayerTokens, PlacementChoice, RoutingStrategy, RunConfig};
use crate::report::{Cell, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedLayer {
    pub layer_id: usize,
    pub decisions: Vec<RoutingDecision>,
    /// The collaborator table used, for the c2r strategies.
    pub table: Option<TopTTable>,
}

/// Routes one layer. `c2r` derives its table from a top-K pass over the
/// same tokens; `random-c2r` draws one from the seed.
pub fn route_layer(
    cfg: &RunConfig,
    input: &LayerInput,
    strategy: RoutingStrategy,
    top_t: Option<usize>,
) -> Result<RoutedLayer> {
    let k = cfg.moe.top_k;
    let logits = match &input.tokens {
        LayerTokens::Routed(decisions) => {
            if strategy != RoutingStrategy::Topk {
                return Err(Error::config(format!(
                    "trace layer {} holds routed decisions; strategy {} needs logits",
                    input.layer_id,
                    strategy.label()
                )));
            }
            return Ok(RoutedLayer {
                layer_id: input.layer_id,
                decisions: decisions.clone(),
                table: None,
            });
        }
        LayerTokens::Logits(logits) => logits,
    };
    let topk = || logits.iter().map(|l| route_topk(l, k)).collect::<Result<Vec<_>>>();
    let table = match strategy {
        RoutingStrategy::Topk => None,
        RoutingStrategy::C2r | RoutingStrategy::RandomC2r => {
            let t = top_t.ok_or_else(|| Error::config(format!("strategy {} needs --top-t", strategy.label())))?;
            check_top_t(t, &cfg.moe)?;
            Some(if strategy == RoutingStrategy::C2r {
                let mut m = CollaborationMatrix::new(cfg.moe.num_experts, input.layer_id);
                m.accumulate_all(&topk()?)?;
                extract_top_t(&m, t)?
            } else {
                random_top_t(cfg.moe.num_experts, t, cfg.seed, input.layer_id)?
            })
        }
    };
    let decisions = match &table {
        None => topk()?,
        Some(table) => logits.iter().map(|l| route_c2r(l, k, table)).collect::<Result<Vec<_>>>()?,
    };
    Ok(RoutedLayer {
        layer_id: input.layer_id,
        decisions,
        table,
    })
}

fn layer_matrix(num_experts: usize, layer: &RoutedLayer) -> Result<CollaborationMatrix> {
    let mut m = CollaborationMatrix::new(num_experts, layer.layer_id);
    m.accumulate_all(&layer.decisions)?;
    Ok(m)
}

/// Places, accounts and scores one layer at every configured EP.
fn evaluate_layer(cfg: &RunConfig, decisions: &[RoutingDecision], matrix: &CollaborationMatrix) -> Result<Vec<SweepRow>> {
    match &cfg.placement {
        PlacementChoice::Strategy(s) => {
            let sweep = sweep_ep(decisions, matrix, &cfg.eps, &cfg.fractions, *s)?;
            if let Some((ep, why)) = sweep.skipped.first() {
                return Err(Error::config(format!("EP {ep}: {why}")));
            }
            Ok(sweep.rows)
        }
        PlacementChoice::Fixed(p) => {
            let account = account_dispatch(decisions, p)?;
            let redundancy = redundancy_ratio(&account)?;
            Ok(vec![SweepRow {
                ep: p.ep(),
                placement: p.clone(),
                score: score(matrix, p)?,
                speedup: cfg
                    .fractions
                    .get(p.ep())
                    .map(|f| SpeedupModel::new(p.ep(), redundancy, f))
                    .transpose()?,
                account,
                redundancy,
            }])
        }
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

pub struct ProfileOutput {
    pub layers: Vec<(CollaborationMatrix, CollaborationProfile)>,
    pub experts: Table,
    pub summary: Table,
}

/// Top-K routing, then per-layer matrices, degrees and heatmaps.
pub fn cmd_profile(cfg: &RunConfig) -> Result<ProfileOutput> {
    let inputs = load_layers(cfg)?;
    prepare_out(cfg)?;
    let n = cfg.moe.num_experts;
    let mut experts = Table::new(["layer", "expert", "degree", "never_coactivated"]);
    let mut summary = Table::new(["layer", "tokens_seen", "pair_total", "layer_degree", "max_degree"]);
    let mut layers = Vec::new();
    for input in &inputs {
        let routed = route_layer(cfg, input, cfg.strategy, cfg.top_t)?;
        let m = layer_matrix(n, &routed)?;
        let p = m.profile();
        m.export_heatmap(&cfg.out.join(format!("heatmap_layer{}.csv", input.layer_id)))?;
        for (e, d) in p.degrees.iter().enumerate() {
            experts.push(vec![input.layer_id.into(), e.into(), (*d).into(), (d.is_none() as usize).into()]);
        }
        summary.push(vec![
            input.layer_id.into(),
            m.tokens_seen().into(),
            m.upper_triangle_sum().into(),
            p.layer_degree.into(),
            ((n as f64 - 1.0).ln()).into(),
        ]);
        layers.push((m, p));
    }
    experts.write_all(&cfg.out, "profile_experts")?;
    summary.write_all(&cfg.out, "profile")?;
    Ok(ProfileOutput { layers, experts, summary })
}

pub struct RouteOutput {
    pub layers: Vec<RoutedLayer>,
    pub tables: Table,
}

/// Writes `decisions.tsv` (a routed trace) and the collaborator tables.
pub fn cmd_route(cfg: &RunConfig) -> Result<RouteOutput> {
    let inputs = load_layers(cfg)?;
    prepare_out(cfg)?;
    let layers = inputs
        .iter()
        .map(|i| route_layer(cfg, i, cfg.strategy, cfg.top_t))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<TraceRecord> = layers
        .iter()
        .flat_map(|l| {
            l.decisions.iter().map(|d| TraceRecord {
                layer_id: l.layer_id,
                payload: TracePayload::Decision(d.clone()),
            })
        })
        .collect();
    workload::save_trace(&records, &cfg.out.join("decisions.tsv"))?;
    let mut tables = Table::new(["layer", "expert", "rank", "collaborator"]);
    for l in &layers {
        for (e, row) in l.table.iter().flat_map(|t| t.rows().iter().enumerate()) {
            for (rank, &c) in row.iter().enumerate() {
                tables.push(vec![l.layer_id.into(), e.into(), rank.into(), c.into()]);
            }
        }
    }
    tables.write_all(&cfg.out, "top_t")?;
    Ok(RouteOutput { layers, tables })
}

/// One EP degree aggregated over all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EpSummary {
    pub ep: usize,
    pub account: DispatchAccount,
    pub intra_mass: u64,
    pub total_mass: u64,
    pub redundancy: f64,
    pub speedup: Option<f64>,
}

impl EpSummary {
    pub fn locality(&self) -> f64 {
        if self.total_mass == 0 {
            1.0
        } else {
            self.intra_mass as f64 / self.total_mass as f64
        }
    }
}

fn summarize(cfg: &RunConfig, per_layer: &[Vec<SweepRow>]) -> Result<Vec<EpSummary>> {
    let Some(first) = per_layer.first() else {
        return Ok(Vec::new());
    };
    first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut account = DispatchAccount::empty(row.ep);
            let (mut intra, mut total) = (0, 0);
            for layer in per_layer {
                account = account.combine(&layer[i].account)?;
                intra += layer[i].score.intra_mass;
                total += layer[i].score.total_mass;
            }
            let redundancy = redundancy_ratio(&account)?;
            let speedup = cfg.fractions.get(row.ep).map(|p| estimate_speedup(redundancy, p)).transpose()?;
            Ok(EpSummary {
                ep: row.ep,
                account,
                intra_mass: intra,
                total_mass: total,
                redundancy,
                speedup,
            })
        })
        .collect()
}

const SIMULATE_COLUMNS: [&str; 11] = [
    "ep",
    "naive_copies",
    "dedup_copies",
    "redundancy",
    "comm_fraction",
    "comm_fraction_source",
    "estimated_speedup",
    "round_trip_naive_copies",
    "round_trip_dedup_copies",
    "single_device_tokens",
    "locality",
];

fn simulate_cells(
    cfg: &RunConfig,
    ep: usize,
    acc: &DispatchAccount,
    redundancy: f64,
    speedup: Option<f64>,
    locality: f64,
) -> Vec<Cell> {
    let fraction = cfg.fractions.get(ep);
    vec![
        ep.into(),
        acc.naive_copies.into(),
        acc.dedup_copies.into(),
        redundancy.into(),
        fraction.into(),
        fraction.map(|_| cfg.fractions.source().to_string()).into(),
        speedup.into(),
        acc.round_trip_naive_copies().into(),
        acc.round_trip_dedup_copies().into(),
        acc.single_device_tokens.into(),
        locality.into(),
    ]
}

pub struct SimulateOutput {
    pub routed: Vec<RoutedLayer>,
    /// Per layer, one row per EP.
    pub per_layer: Vec<Vec<SweepRow>>,
    pub summary: Vec<EpSummary>,
    pub report: Table,
    pub layer_report: Table,
}

/// Routing, placement and dispatch accounting at every configured EP.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutput> {
    let inputs = load_layers(cfg)?;
    prepare_out(cfg)?;
    let mut routed = Vec::new();
    let mut per_layer = Vec::new();
    let mut layer_report = Table::new(std::iter::once("layer").chain(SIMULATE_COLUMNS));
    for input in &inputs {
        let layer = route_layer(cfg, input, cfg.strategy, cfg.top_t)?;
        let m = layer_matrix(cfg.moe.num_experts, &layer)?;
        let rows = evaluate_layer(cfg, &layer.decisions, &m)?;
        for r in &rows {
            let path = cfg.out.join(format!("placement_layer{}_ep{}.csv", layer.layer_id, r.ep));
            r.placement.save(&path)?;
            let mut cells = vec![layer.layer_id.into()];
            cells.extend(simulate_cells(
                cfg,
                r.ep,
                &r.account,
                r.redundancy,
                r.speedup.map(|s| s.estimated_speedup),
                r.score.locality,
            ));
            layer_report.push(cells);
        }
        per_layer.push(rows);
        routed.push(layer);
    }
    let summary = summarize(cfg, &per_layer)?;
    let mut report = Table::new(SIMULATE_COLUMNS);
    for s in &summary {
        report.push(simulate_cells(cfg, s.ep, &s.account, s.redundancy, s.speedup, s.locality()));
    }
    report.write_all(&cfg.out, "simulate")?;
    layer_report.write_all(&cfg.out, "simulate_layers")?;
    Ok(SimulateOutput {
        routed,
        per_layer,
        summary,
        report,
        layer_report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTRow {
    /// `None` for the top-K baseline.
    pub t: Option<usize>,
    pub layer_degrees: Vec<Option<f64>>,
    pub mean_degree: Option<f64>,
    /// One per configured EP, aggregated over layers.
    pub redundancy: Vec<f64>,
}

pub struct SweepTOutput {
    pub rows: Vec<SweepTRow>,
    pub report: Table,
}

/// A top-K baseline row, then one row per T from `max(1, K-1)` to `N-1`.
/// Uses `random-c2r` tables when that strategy is configured, else `c2r`.
pub fn cmd_sweep_t(cfg: &RunConfig) -> Result<SweepTOutput> {
    let inputs = load_layers(cfg)?;
    prepare_out(cfg)?;
    let (n, k) = (cfg.moe.num_experts, cfg.moe.top_k);
    let strategy = match cfg.strategy {
        RoutingStrategy::RandomC2r => RoutingStrategy::RandomC2r,
        _ => RoutingStrategy::C2r,
    };
    let runs = std::iter::once((RoutingStrategy::Topk, None)).chain((k.saturating_sub(1).max(1)..n).map(|t| (strategy, Some(t))));
    let mut rows = Vec::new();
    for (s, t) in runs {
        let mut layer_degrees = Vec::new();
        let mut per_layer = Vec::new();
        for input in &inputs {
            let layer = route_layer(cfg, input, s, t)?;
            let m = layer_matrix(n, &layer)?;
            layer_degrees.push(m.profile().layer_degree);
            per_layer.push(evaluate_layer(cfg, &layer.decisions, &m)?);
        }
        let defined: Vec<f64> = layer_degrees.iter().flatten().copied().collect();
        let mean_degree = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        rows.push(SweepTRow {
            t,
            layer_degrees,
            mean_degree,
            redundancy: summarize(cfg, &per_layer)?.iter().map(|e| e.redundancy).collect(),
        });
    }

    let mut columns = vec!["strategy".to_string(), "t".into(), "mean_layer_degree".into()];
    columns.extend(inputs.iter().map(|i| format!("layer{}_degree", i.layer_id)));
    let eps: Vec<usize> = match &cfg.placement {
        PlacementChoice::Fixed(p) => vec![p.ep()],
        PlacementChoice::Strategy(_) => cfg.eps.clone(),
    };
    columns.extend(eps.iter().map(|e| format!("redundancy_ep{e}")));
    let mut report = Table::new(columns);
    for r in &rows {
        let label = if r.t.is_some() { strategy.label() } else { "topk" };
        let mut cells: Vec<Cell> = vec![label.into(), r.t.into(), r.mean_degree.into()];
        cells.extend(r.layer_degrees.iter().map(|&d| Cell::from(d)));
        cells.extend(r.redundancy.iter().map(|&v| Cell::from(v)));
        report.push(cells);
    }
    report.write_all(&cfg.out, "sweep_t")?;
    Ok(SweepTOutput { rows, report })
}

pub struct Table3Output {
    pub report: Table,
}

/// Speedup estimates from the reference redundancies and the configured
/// comm fractions, beside the reported figures.
pub fn cmd_table3(cfg: &RunConfig) -> Result<Table3Output> {
    prepare_out(cfg)?;
    let mut report = Table::new([
        "ep",
        "redundancy",
        "comm_fraction",
        "comm_fraction_source",
        "estimated_speedup",
        "reported_speedup",
        "abs_diff_pp",
    ]);
    for point in REFERENCE_EP_SCALING {
        let fraction = cfg.fractions.get(point.ep);
        let est = fraction.map(|p| estimate_speedup(point.redundancy, p)).transpose()?;
        report.push(vec![
            point.ep.into(),
            point.redundancy.into(),
            fraction.into(),
            fraction.map(|_| cfg.fractions.source().to_string()).into(),
            est.into(),
            point.reported_speedup.into(),
            est.map(|s| (s - point.reported_speedup).abs() * 100.0).into(),
        ]);
    }
    report.write_all(&cfg.out, "table3")?;
    Ok(Table3Output { report })
}
