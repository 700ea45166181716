//! Expert-to-device assignment under expert parallelism.
//!
//! Every device hosts exactly `N / EP` experts. [`place_greedy`] tries to
//! put frequently co-activated experts on the same device so that a token's
//! experts share as few devices as possible.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::CollaborationMatrix;

/// Number of pairwise-swap sweeps run after greedy grouping, and the cap
/// on Kernighan-Lin passes over the winning candidate.
pub const REFINE_SWEEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementMap {
    assignment: Vec<usize>,
    ep: usize,
}

fn check_divisible(n: usize, ep: usize) -> Result<usize> {
    if n == 0 || ep == 0 || !n.is_multiple_of(ep) {
        return Err(Error::config(format!(
            "{n} experts cannot be split evenly over {ep} devices"
        )));
    }
    Ok(n / ep)
}

impl PlacementMap {
    /// Checks that `assignment` fills every device in `[0, ep)` to exactly `N / ep`.
    pub fn new(assignment: Vec<usize>, ep: usize) -> Result<Self> {
        let cap = check_divisible(assignment.len(), ep)?;
        let mut load = vec![0usize; ep];
        for (e, &d) in assignment.iter().enumerate() {
            if d >= ep {
                return Err(Error::config(format!("expert {e} assigned to device {d}, but EP = {ep}")));
            }
            load[d] += 1;
        }
        if let Some(d) = load.iter().position(|&l| l != cap) {
            return Err(Error::config(format!(
                "device {d} hosts {} experts, expected {cap}",
                load[d]
            )));
        }
        Ok(PlacementMap { assignment, ep })
    }

    pub fn ep(&self) -> usize {
        self.ep
    }

    pub fn num_experts(&self) -> usize {
        self.assignment.len()
    }

    pub fn capacity(&self) -> usize {
        self.assignment.len() / self.ep
    }

    pub fn device_of(&self, expert: usize) -> usize {
        self.assignment[expert]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Experts hosted on `device`, ascending.
    pub fn experts_on(&self, device: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&e| self.assignment[e] == device)
            .collect()
    }

    /// `expert_id,device_id` CSV with a header line.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "expert_id,device_id")?;
        for (e, d) in self.assignment.iter().enumerate() {
            writeln!(out, "{e},{d}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parses the format written by [`PlacementMap::write_to`]. The header is
    /// optional, blank lines and `#` comments are skipped, and EP is taken to
    /// be one more than the largest device id.
    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("expert_id") {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let mut field = |name: &str| -> Result<usize> {
                fields
                    .next()
                    .ok_or_else(|| Error::parse(lineno, format!("missing {name}")))?
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("{name} is not a non-negative integer")))
            };
            let expert = field("expert_id")?;
            let device = field("device_id")?;
            if fields.next().is_some() {
                return Err(Error::parse(lineno, "expected exactly two fields"));
            }
            pairs.push((expert, device));
        }
        let n = pairs.len();
        let mut assignment = vec![usize::MAX; n];
        for &(e, d) in &pairs {
            if e >= n || assignment[e] != usize::MAX {
                return Err(Error::config(format!(
                    "placement must list each of experts 0..{n} exactly once (bad id {e})"
                )));
            }
            assignment[e] = d;
        }
        let ep = assignment.iter().max().map_or(0, |d| d + 1);
        PlacementMap::new(assignment, ep)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        PlacementMap::read_from(BufReader::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementScore {
    /// Collaboration counts between experts sharing a device.
    pub intra_mass: u64,
    pub total_mass: u64,
    /// `intra_mass / total_mass`; 1.0 when there is no collaboration at all.
    pub locality: f64,
}

pub fn score(matrix: &CollaborationMatrix, placement: &PlacementMap) -> Result<PlacementScore> {
    let n = matrix.num_experts();
    if placement.num_experts() != n {
        return Err(Error::config(format!(
            "placement covers {} experts but matrix has {n}",
            placement.num_experts()
        )));
    }
    let mut intra = 0;
    let mut total = 0;
    for i in 0..n {
        for j in i + 1..n {
            let c = matrix.get(i, j);
            total += c;
            if placement.device_of(i) == placement.device_of(j) {
                intra += c;
            }
        }
    }
    let locality = if total == 0 {
        1.0
    } else {
        intra as f64 / total as f64
    };
    Ok(PlacementScore {
        intra_mass: intra,
        total_mass: total,
        locality,
    })
}

/// Contiguous blocks: expert `i` goes to device `i / (n / ep)`.
pub fn place_identity(n: usize, ep: usize) -> Result<PlacementMap> {
    let cap = check_divisible(n, ep)?;
    Ok(PlacementMap {
        assignment: (0..n).map(|i| i / cap).collect(),
        ep,
    })
}

/// Collaboration-aware placement.
///
/// Devices are filled one at a time. The first group is seeded with a given
/// expert; every later group with the unplaced expert carrying the most
/// collaboration mass towards other unplaced experts. A group grows by
/// repeatedly adding the unplaced expert most connected to its current
/// members. This construction is run once per possible first seed, plus the
/// identity placement as a baseline; each candidate is polished with up to
/// [`REFINE_SWEEPS`] sweeps of improving pairwise swaps, and the candidate
/// with the most intra-device mass wins, earliest candidate on ties. The
/// winner then gets Kernighan-Lin passes, which may walk through worse
/// swaps to escape a local optimum but only keep a net improvement. Every
/// tie inside a step goes to the lower expert index, so the output depends
/// only on the counts.
pub fn place_greedy(matrix: &CollaborationMatrix, ep: usize) -> Result<PlacementMap> {
    let n = matrix.num_experts();
    let cap = check_divisible(n, ep)?;
    if ep == 1 {
        return place_identity(n, ep);
    }

    let mut best = refine(matrix, grow_groups(matrix, ep, cap, None));
    let mut best_mass = intra_mass(matrix, &best);
    let candidates = (0..n)
        .map(|seed| grow_groups(matrix, ep, cap, Some(seed)))
        .chain(std::iter::once(place_identity(n, ep)?));
    for candidate in candidates {
        let candidate = refine(matrix, candidate);
        let mass = intra_mass(matrix, &candidate);
        if mass > best_mass {
            best = candidate;
            best_mass = mass;
        }
    }
    Ok(kernighan_lin(matrix, best))
}

fn grow_groups(matrix: &CollaborationMatrix, ep: usize, cap: usize, first_seed: Option<usize>) -> PlacementMap {
    let n = matrix.num_experts();
    let mut assignment = vec![usize::MAX; n];
    for device in 0..ep {
        let unplaced: Vec<usize> = (0..n).filter(|&e| assignment[e] == usize::MAX).collect();
        let seed = match first_seed {
            Some(s) if device == 0 => s,
            _ => *unplaced
                .iter()
                .max_by(|&&a, &&b| {
                    let mass = |e: usize| unplaced.iter().map(|&x| matrix.get(e, x)).sum::<u64>();
                    mass(a).cmp(&mass(b)).then(b.cmp(&a))
                })
                .expect("a device with free capacity implies unplaced experts"),
        };
        assignment[seed] = device;
        let mut group = vec![seed];
        while group.len() < cap {
            let next = (0..n)
                .filter(|&e| assignment[e] == usize::MAX)
                .max_by(|&a, &b| {
                    let link = |e: usize| group.iter().map(|&g| matrix.get(e, g)).sum::<u64>();
                    link(a).cmp(&link(b)).then(b.cmp(&a))
                })
                .expect("capacity bookkeeping");
            assignment[next] = device;
            group.push(next);
        }
    }
    PlacementMap { assignment, ep }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlacementStrategy {
    Identity,
    Greedy,
}

pub fn place(strategy: PlacementStrategy, matrix: &CollaborationMatrix, ep: usize) -> Result<PlacementMap> {
    match strategy {
        PlacementStrategy::Identity => place_identity(matrix.num_experts(), ep),
        PlacementStrategy::Greedy => place_greedy(matrix, ep),
    }
}

fn intra_mass(matrix: &CollaborationMatrix, p: &PlacementMap) -> u64 {
    let n = matrix.num_experts();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| p.device_of(i) == p.device_of(j))
        .map(|(i, j)| matrix.get(i, j))
        .sum()
}

/// Pairwise-swap local search; a swap is taken only if it strictly raises
/// intra-device mass, so balance is preserved and the search terminates.
fn refine(matrix: &CollaborationMatrix, mut p: PlacementMap) -> PlacementMap {
    let n = matrix.num_experts();
    let ep = p.ep;
    let mut conn = device_mass(matrix, &p);
    for _ in 0..REFINE_SWEEPS {
        let mut improved = false;
        for a in 0..n {
            for b in a + 1..n {
                if p.assignment[a] != p.assignment[b] && swap_gain(matrix, &conn, ep, &p, a, b) > 0 {
                    apply_swap(matrix, &mut conn, &mut p, a, b);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    p
}

/// Swap gain for exchanging `a` and `b` given the expert-to-device mass table.
fn swap_gain(matrix: &CollaborationMatrix, conn: &[i64], ep: usize, p: &PlacementMap, a: usize, b: usize) -> i64 {
    let (da, db) = (p.assignment[a], p.assignment[b]);
    conn[a * ep + db] - conn[a * ep + da] + conn[b * ep + da] - conn[b * ep + db] - 2 * matrix.get(a, b) as i64
}

fn device_mass(matrix: &CollaborationMatrix, p: &PlacementMap) -> Vec<i64> {
    let n = matrix.num_experts();
    let mut conn = vec![0i64; n * p.ep];
    for e in 0..n {
        for x in 0..n {
            conn[e * p.ep + p.assignment[x]] += matrix.get(e, x) as i64;
        }
    }
    conn
}

fn apply_swap(matrix: &CollaborationMatrix, conn: &mut [i64], p: &mut PlacementMap, a: usize, b: usize) {
    let ep = p.ep;
    let (da, db) = (p.assignment[a], p.assignment[b]);
    p.assignment[a] = db;
    p.assignment[b] = da;
    for e in 0..matrix.num_experts() {
        let ca = matrix.get(e, a) as i64;
        let cb = matrix.get(e, b) as i64;
        conn[e * ep + da] += cb - ca;
        conn[e * ep + db] += ca - cb;
    }
}

fn kernighan_lin(matrix: &CollaborationMatrix, mut p: PlacementMap) -> PlacementMap {
    let n = matrix.num_experts();
    let ep = p.ep;
    let mut conn = device_mass(matrix, &p);
    for _ in 0..REFINE_SWEEPS {
        let mut locked = vec![false; n];
        let mut swaps = Vec::new();
        let (mut running, mut best, mut best_len) = (0i64, 0i64, 0usize);
        loop {
            let mut pick: Option<(i64, usize, usize)> = None;
            for a in (0..n).filter(|&a| !locked[a]) {
                for b in (a + 1..n).filter(|&b| !locked[b] && p.assignment[a] != p.assignment[b]) {
                    let g = swap_gain(matrix, &conn, ep, &p, a, b);
                    if pick.is_none_or(|(bg, _, _)| g > bg) {
                        pick = Some((g, a, b));
                    }
                }
            }
            let Some((g, a, b)) = pick else { break };
            apply_swap(matrix, &mut conn, &mut p, a, b);
            locked[a] = true;
            locked[b] = true;
            swaps.push((a, b));
            running += g;
            if running > best {
                best = running;
                best_len = swaps.len();
            }
        }
        for &(a, b) in swaps[best_len..].iter().rev() {
            apply_swap(matrix, &mut conn, &mut p, a, b);
        }
        if best_len == 0 {
            break;
        }
    }
    p
}
