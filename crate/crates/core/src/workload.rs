//! Synthetic router outputs with planted expert groups, and the routing
//! trace text format.
//!
//! # Generator
//!
//! Expert `e` belongs to group `e % G`. For every token a group is drawn
//! uniformly, each logit gets `noise_scale * N(0, 1)`, and the experts of the
//! drawn group get `cluster_strength` on top. Randomness comes from ChaCha8
//! seeded with the workload seed; token `t` of layer `l` reads its own
//! stream `(l << 40) | t`, so any token can be regenerated on its own and
//! the output does not depend on how generation is split up.
//!
//! # Trace format
//!
//! One token per line, `layer_id<TAB>payload`, where the payload is either
//! comma-separated logits `v1,v2,...,vN` or a pre-routed decision
//! `@e1:w1,e2:w2,...`. Numbers are written in Rust's shortest round-trip
//! decimal form (at most 17 significant digits), so reading a written trace
//! gives back the exact same doubles.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{RouterLogits, RoutingDecision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub num_tokens: usize,
    pub num_experts: usize,
    /// Carried for model-shape bookkeeping; logits are generated directly.
    pub hidden_dim: usize,
    pub num_groups: usize,
    /// Logit boost for the experts of a token's group.
    pub cluster_strength: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tokens == 0 {
            return Err(Error::config("empty workload"));
        }
        if self.num_experts == 0 || self.hidden_dim == 0 {
            return Err(Error::config("experts and hidden dimension must be positive"));
        }
        if self.num_groups == 0 || !self.num_experts.is_multiple_of(self.num_groups) {
            return Err(Error::config(format!(
                "{} groups do not divide {} experts",
                self.num_groups, self.num_experts
            )));
        }
        for (name, v) in [("cluster strength", self.cluster_strength), ("noise scale", self.noise_scale)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.num_experts / self.num_groups
    }
}

pub fn group_of(expert: usize, num_groups: usize) -> usize {
    expert % num_groups
}

/// Layer 0 of the workload.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<RouterLogits>> {
    generate_layer(spec, 0)
}

pub fn generate_layer(spec: &WorkloadSpec, layer: usize) -> Result<Vec<RouterLogits>> {
    spec.validate()?;
    let base = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.num_tokens)
        .map(|t| RouterLogits::new(token_logits(spec, &base, layer, t)))
        .collect()
}

fn token_logits(spec: &WorkloadSpec, base: &ChaCha8Rng, layer: usize, token: usize) -> Vec<f64> {
    let mut rng = base.clone();
    rng.set_stream(((layer as u64) << 40) | token as u64);
    rng.set_word_pos(0);
    let group = rng.random_range(0..spec.num_groups);
    (0..spec.num_experts)
        .map(|e| {
            let z: f64 = rng.sample(StandardNormal);
            let boost = if group_of(e, spec.num_groups) == group {
                spec.cluster_strength
            } else {
                0.0
            };
            spec.noise_scale * z + boost
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TracePayload {
    Logits(RouterLogits),
    Decision(RoutingDecision),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub layer_id: usize,
    pub payload: TracePayload,
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        write!(out, "{}\t", r.layer_id)?;
        match &r.payload {
            TracePayload::Logits(l) => {
                for (i, v) in l.as_slice().iter().enumerate() {
                    if i > 0 {
                        out.write_all(b",")?;
                    }
                    write!(out, "{v}")?;
                }
            }
            TracePayload::Decision(d) => {
                out.write_all(b"@")?;
                for (i, (e, w)) in d.selected().iter().enumerate() {
                    if i > 0 {
                        out.write_all(b",")?;
                    }
                    write!(out, "{e}:{w}")?;
                }
            }
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("`{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("`{s}` is not finite")));
    }
    Ok(v)
}

enum RawPayload {
    Logits(RouterLogits),
    Decision(Vec<(usize, f64)>),
}

fn parse_line(line: &str, lineno: usize) -> Result<(usize, RawPayload)> {
    let (layer, payload) = line
        .split_once('\t')
        .ok_or_else(|| Error::parse(lineno, "expected `layer_id<TAB>payload`"))?;
    let layer_id: usize = layer
        .trim()
        .parse()
        .map_err(|_| Error::parse(lineno, format!("bad layer id `{layer}`")))?;
    if let Some(body) = payload.strip_prefix('@') {
        let selected = body
            .split(',')
            .map(|item| {
                let (e, w) = item
                    .split_once(':')
                    .ok_or_else(|| Error::parse(lineno, format!("expected `expert:weight`, got `{item}`")))?;
                let e: usize = e
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad expert id `{e}`")))?;
                Ok((e, parse_f64(w, lineno)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((layer_id, RawPayload::Decision(selected)))
    } else {
        let values = payload
            .split(',')
            .map(|v| parse_f64(v, lineno))
            .collect::<Result<Vec<_>>>()?;
        let logits = RouterLogits::new(values).map_err(|e| Error::parse(lineno, e.to_string()))?;
        Ok((layer_id, RawPayload::Logits(logits)))
    }
}

/// Reads a trace. When `num_experts` is given, every record must agree with
/// it; otherwise the first logits record fixes N for the whole file, and a
/// file of decisions only takes N from its largest expert id.
pub fn read_trace<R: BufRead>(input: R, num_experts: Option<usize>) -> Result<Vec<TraceRecord>> {
    let mut raw = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (layer_id, payload) = parse_line(&line, lineno)?;
        raw.push((lineno, layer_id, payload));
    }

    let n = num_experts
        .or_else(|| {
            raw.iter().find_map(|(_, _, p)| match p {
                RawPayload::Logits(l) => Some(l.len()),
                RawPayload::Decision(_) => None,
            })
        })
        .unwrap_or_else(|| {
            raw.iter()
                .filter_map(|(_, _, p)| match p {
                    RawPayload::Decision(s) => s.iter().map(|(e, _)| e + 1).max(),
                    RawPayload::Logits(_) => None,
                })
                .max()
                .unwrap_or(0)
        });

    raw.into_iter()
        .map(|(lineno, layer_id, payload)| {
            let payload = match payload {
                RawPayload::Logits(l) if l.len() != n => {
                    return Err(Error::config(format!(
                        "line {lineno}: record has {} logits, expected {n}",
                        l.len()
                    )))
                }
                RawPayload::Logits(l) => TracePayload::Logits(l),
                RawPayload::Decision(s) => TracePayload::Decision(
                    RoutingDecision::from_parts(s, n).map_err(|e| Error::config(format!("line {lineno}: {e}")))?,
                ),
            };
            Ok(TraceRecord { layer_id, payload })
        })
        .collect()
}

pub fn save_trace(records: &[TraceRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_trace(records, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: &Path, num_experts: Option<usize>) -> Result<Vec<TraceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file), num_experts)
}
