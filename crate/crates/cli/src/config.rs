use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use c2r_core::workload::{self, TracePayload};
use c2r_core::{
    CommFractionTable, Error, MoEConfig, PlacementMap, PlacementStrategy, Result, RouterLogits, RoutingDecision,
    WorkloadSpec,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "c2r", version, about = "Collaboration-constrained MoE routing simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Route a workload and export per-layer collaboration matrices and degrees.
    Profile(RunArgs),
    /// Route a workload and write the decisions as a trace.
    Route(RunArgs),
    /// Account all-to-all copies and estimate speedup for each EP degree.
    Simulate(RunArgs),
    /// Sweep the collaborator-list length T and report degrees and redundancy.
    SweepT(RunArgs),
    /// Multiply the reference EP-scaling redundancies by the comm fractions.
    Table3(RunArgs),
}

impl Command {
    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Profile(a) | Command::Route(a) | Command::Simulate(a) | Command::SweepT(a) | Command::Table3(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoutingStrategy {
    Topk,
    C2r,
    RandomC2r,
}

impl RoutingStrategy {
    pub fn label(self) -> &'static str {
        match self {
            RoutingStrategy::Topk => "topk",
            RoutingStrategy::C2r => "c2r",
            RoutingStrategy::RandomC2r => "random-c2r",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experts per layer (N).
    #[arg(long, default_value_t = 8)]
    pub experts: usize,
    /// Experts selected per token (K).
    #[arg(long = "top-k", default_value_t = 2)]
    pub top_k: usize,
    /// Collaborators kept per expert (T); required for c2r strategies.
    #[arg(long = "top-t")]
    pub top_t: Option<usize>,
    /// Comma-separated expert-parallel degrees.
    #[arg(long)]
    pub ep: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long = "hidden-dim", default_value_t = 16)]
    pub hidden_dim: usize,
    /// Synthetic tokens per layer.
    #[arg(long, default_value_t = 10_000)]
    pub tokens: usize,
    /// Planted expert groups in the synthetic workload.
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long = "cluster-strength", default_value_t = 0.0)]
    pub cluster_strength: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = RoutingStrategy::Topk)]
    pub strategy: RoutingStrategy,
    /// `greedy`, `identity`, or a placement file.
    #[arg(long, default_value = "greedy")]
    pub placement: String,
    /// `paper-default` or a file of `ep,fraction` lines.
    #[arg(long = "comm-fractions", default_value = "paper-default")]
    pub comm_fractions: String,
    /// Read router logits or decisions from a trace instead of generating them.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

const DEFAULT_EP: &str = "2,4";

#[derive(Debug, Clone, PartialEq)]
pub enum PlacementChoice {
    Strategy(PlacementStrategy),
    Fixed(PlacementMap),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub moe: MoEConfig,
    pub top_t: Option<usize>,
    pub eps: Vec<usize>,
    pub workload: WorkloadSpec,
    pub trace: Option<PathBuf>,
    pub strategy: RoutingStrategy,
    pub placement: PlacementChoice,
    pub fractions: CommFractionTable,
    pub out: PathBuf,
    pub seed: u64,
}

fn parse_ep_list(s: &str) -> Result<Vec<usize>> {
    let eps = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&e| e > 0)
                .ok_or_else(|| Error::config(format!("bad EP value `{v}` in `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sorted = eps.clone();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(sorted)
}

pub fn check_top_t(t: usize, moe: &MoEConfig) -> Result<()> {
    if t == 0 || t + 1 > moe.num_experts {
        return Err(Error::config(format!(
            "--top-t must lie in [1, {}], got {t}",
            moe.num_experts.saturating_sub(1)
        )));
    }
    if t + 1 < moe.top_k {
        return Err(Error::config(format!(
            "--top-t {t} is smaller than K - 1 = {}",
            moe.top_k - 1
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_args(args: &RunArgs) -> Result<Self> {
        let moe = MoEConfig::new(args.experts, args.top_k, args.hidden_dim, args.layers)?;
        match (args.strategy, args.top_t) {
            (RoutingStrategy::Topk, None) => {}
            (_, Some(t)) => check_top_t(t, &moe)?,
            (s, None) => {
                return Err(Error::config(format!("strategy {} needs --top-t", s.label())));
            }
        }

        let placement = match args.placement.as_str() {
            "greedy" => PlacementChoice::Strategy(PlacementStrategy::Greedy),
            "identity" => PlacementChoice::Strategy(PlacementStrategy::Identity),
            path => PlacementChoice::Fixed(PlacementMap::load(Path::new(path))?),
        };
        let eps = match (&placement, &args.ep) {
            (PlacementChoice::Fixed(p), None) => vec![p.ep()],
            (PlacementChoice::Fixed(p), Some(list)) => {
                let eps = parse_ep_list(list)?;
                if eps != [p.ep()] {
                    return Err(Error::config(format!(
                        "placement file fixes EP = {}, but --ep asks for {list}",
                        p.ep()
                    )));
                }
                eps
            }
            (_, list) => parse_ep_list(list.as_deref().unwrap_or(DEFAULT_EP))?,
        };
        if let Some(&bad) = eps.iter().find(|&&e| moe.num_experts % e != 0) {
            return Err(Error::config(format!(
                "EP {bad} does not divide {} experts",
                moe.num_experts
            )));
        }
        if let PlacementChoice::Fixed(p) = &placement {
            if p.num_experts() != moe.num_experts {
                return Err(Error::config(format!(
                    "placement file covers {} experts, --experts is {}",
                    p.num_experts(),
                    moe.num_experts
                )));
            }
        }

        let fractions = match args.comm_fractions.as_str() {
            "paper-default" => CommFractionTable::paper_default(),
            path => CommFractionTable::load(Path::new(path))?,
        };

        let workload = WorkloadSpec {
            num_tokens: args.tokens,
            num_experts: args.experts,
            hidden_dim: args.hidden_dim,
            num_groups: args.groups,
            cluster_strength: args.cluster_strength,
            noise_scale: args.noise,
            seed: args.seed,
        };
        if args.trace.is_none() {
            workload.validate()?;
        }

        Ok(RunConfig {
            moe,
            top_t: args.top_t,
            eps,
            workload,
            trace: args.trace.clone(),
            strategy: args.strategy,
            placement,
            fractions,
            out: args.out.clone(),
            seed: args.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerTokens {
    Logits(Vec<RouterLogits>),
    Routed(Vec<RoutingDecision>),
}

impl LayerTokens {
    pub fn len(&self) -> usize {
        match self {
            LayerTokens::Logits(v) => v.len(),
            LayerTokens::Routed(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerInput {
    pub layer_id: usize,
    pub tokens: LayerTokens,
}

/// Per-layer tokens, from the trace when one is configured, otherwise
/// generated. Trace layers must be all logits or all decisions.
pub fn load_layers(cfg: &RunConfig) -> Result<Vec<LayerInput>> {
    let Some(path) = &cfg.trace else {
        return (0..cfg.moe.num_layers)
            .map(|l| {
                Ok(LayerInput {
                    layer_id: l,
                    tokens: LayerTokens::Logits(workload::generate_layer(&cfg.workload, l)?),
                })
            })
            .collect();
    };
    let records = workload::load_trace(path, Some(cfg.moe.num_experts))?;
    if records.is_empty() {
        return Err(Error::config("empty workload"));
    }
    let mut layers: BTreeMap<usize, LayerTokens> = BTreeMap::new();
    for rec in records {
        let slot = layers.entry(rec.layer_id).or_insert_with(|| match rec.payload {
            TracePayload::Logits(_) => LayerTokens::Logits(Vec::new()),
            TracePayload::Decision(_) => LayerTokens::Routed(Vec::new()),
        });
        match (slot, rec.payload) {
            (LayerTokens::Logits(v), TracePayload::Logits(l)) => v.push(l),
            (LayerTokens::Routed(v), TracePayload::Decision(d)) => v.push(d),
            _ => {
                return Err(Error::config(format!(
                    "trace layer {} mixes logits and routed decisions",
                    rec.layer_id
                )))
            }
        }
    }
    Ok(layers
        .into_iter()
        .map(|(layer_id, tokens)| LayerInput { layer_id, tokens })
        .collect())
}
