use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Index, KernelSpec, LoopSpec};

/// Unroll factors explored by default.
pub const DEFAULT_FACTORS: [u64; 5] = [1, 2, 4, 8, 16];

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoopPragma {
    #[serde(default)]
    pub pipeline: bool,
    #[serde(default = "one")]
    pub unroll: u64,
}

impl Default for LoopPragma {
    fn default() -> Self {
        LoopPragma {
            pipeline: false,
            unroll: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    #[default]
    Cyclic,
    Block,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArrayPartition {
    pub factors: Vec<u64>,
    #[serde(rename = "type", default)]
    pub kind: PartitionKind,
}

/// Pragma directives for one design point. Loops and arrays left out take
/// the defaults (no pipeline, unroll 1, unpartitioned).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PragmaConfig {
    #[serde(default)]
    pub loops: BTreeMap<String, LoopPragma>,
    #[serde(default)]
    pub arrays: BTreeMap<String, ArrayPartition>,
}

impl PragmaConfig {
    pub fn loop_pragma(&self, id: &str) -> LoopPragma {
        self.loops.get(id).cloned().unwrap_or_default()
    }

    pub fn unroll(&self, id: &str) -> u64 {
        self.loop_pragma(id).unroll
    }

    pub fn pipelined(&self, id: &str) -> bool {
        self.loop_pragma(id).pipeline
    }

    /// Partition factors for an array of the given rank (all 1 if absent).
    pub fn partition(&self, array: &str, rank: usize) -> (Vec<u64>, PartitionKind) {
        match self.arrays.get(array) {
            Some(p) => (p.factors.clone(), p.kind),
            None => (vec![1; rank], PartitionKind::Cyclic),
        }
    }

    /// Same design point with every loop and array spelled out explicitly.
    pub fn normalized(&self, spec: &KernelSpec) -> PragmaConfig {
        let loops = spec
            .loops()
            .into_iter()
            .map(|l| (l.id.clone(), self.loop_pragma(&l.id)))
            .collect();
        let arrays = spec
            .arrays
            .iter()
            .map(|a| {
                let (factors, kind) = self.partition(&a.id, a.dims.len());
                (a.id.clone(), ArrayPartition { factors, kind })
            })
            .collect();
        PragmaConfig { loops, arrays }
    }

    /// Short stable content hash of the canonical JSON form.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownLoop(String),
    UnknownArray(String),
    ZeroFactor { target: String },
    NonDividingUnroll { loop_id: String, unroll: u64, tripcount: u64 },
    PartitionArity { array: String, expected: usize, got: usize },
    NonDividingPartition { array: String, dim: usize, factor: u64, size: u64 },
    NestedPipeline { outer: String, inner: String },
    PartialUnrollUnderPipeline { pipelined: String, loop_id: String, unroll: u64, tripcount: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownLoop(l) => write!(f, "unknown loop `{l}`"),
            Violation::UnknownArray(a) => write!(f, "unknown array `{a}`"),
            Violation::ZeroFactor { target } => write!(f, "factor 0 on `{target}`"),
            Violation::NonDividingUnroll { loop_id, unroll, tripcount } => write!(
                f,
                "unroll factor {unroll} does not divide tripcount {tripcount} of loop `{loop_id}`"
            ),
            Violation::PartitionArity { array, expected, got } => write!(
                f,
                "array `{array}` has {expected} dimension(s) but {got} partition factor(s)"
            ),
            Violation::NonDividingPartition { array, dim, factor, size } => write!(
                f,
                "partition factor {factor} does not divide dimension {dim} (size {size}) of `{array}`"
            ),
            Violation::NestedPipeline { outer, inner } => {
                write!(f, "loop `{inner}` is pipelined inside pipelined loop `{outer}`")
            }
            Violation::PartialUnrollUnderPipeline { pipelined, loop_id, unroll, tripcount } => write!(
                f,
                "loop `{loop_id}` under pipelined `{pipelined}` must be fully unrolled ({unroll} != {tripcount})"
            ),
        }
    }
}

/// Check every pragma invariant; collects all violations rather than the first.
pub fn validate_config(spec: &KernelSpec, cfg: &PragmaConfig) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let loops = spec.loops();
    for id in cfg.loops.keys() {
        if !loops.iter().any(|l| &l.id == id) {
            out.push(Violation::UnknownLoop(id.clone()));
        }
    }
    for (id, part) in &cfg.arrays {
        let Some(arr) = spec.array(id) else {
            out.push(Violation::UnknownArray(id.clone()));
            continue;
        };
        if part.factors.len() != arr.dims.len() {
            out.push(Violation::PartitionArity {
                array: id.clone(),
                expected: arr.dims.len(),
                got: part.factors.len(),
            });
            continue;
        }
        for (dim, (&f, &size)) in part.factors.iter().zip(&arr.dims).enumerate() {
            if f == 0 {
                out.push(Violation::ZeroFactor { target: id.clone() });
            } else if size % f != 0 {
                out.push(Violation::NonDividingPartition {
                    array: id.clone(),
                    dim,
                    factor: f,
                    size,
                });
            }
        }
    }

    fn walk(l: &LoopSpec, cfg: &PragmaConfig, pipelined_above: Option<&str>, out: &mut Vec<Violation>) {
        let p = cfg.loop_pragma(&l.id);
        if p.unroll == 0 {
            out.push(Violation::ZeroFactor { target: l.id.clone() });
        } else if l.tripcount % p.unroll != 0 {
            out.push(Violation::NonDividingUnroll {
                loop_id: l.id.clone(),
                unroll: p.unroll,
                tripcount: l.tripcount,
            });
        }
        if let Some(outer) = pipelined_above {
            if p.pipeline {
                out.push(Violation::NestedPipeline {
                    outer: outer.to_string(),
                    inner: l.id.clone(),
                });
            }
            if p.unroll != l.tripcount {
                out.push(Violation::PartialUnrollUnderPipeline {
                    pipelined: outer.to_string(),
                    loop_id: l.id.clone(),
                    unroll: p.unroll,
                    tripcount: l.tripcount,
                });
            }
        }
        let below = pipelined_above.or(if p.pipeline { Some(l.id.as_str()) } else { None });
        for c in l.children() {
            walk(c, cfg, below, out);
        }
    }
    for l in &spec.root_loops {
        walk(l, cfg, None, &mut out);
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Partition factors tied to the unroll factors of the loops indexing each
/// dimension, reduced to the largest divisor of the dimension size.
fn partition_for_unrolls(spec: &KernelSpec, unrolls: &BTreeMap<String, u64>) -> BTreeMap<String, ArrayPartition> {
    let mut factors: BTreeMap<String, Vec<u64>> = spec
        .arrays
        .iter()
        .map(|a| (a.id.clone(), vec![1; a.dims.len()]))
        .collect();
    for l in spec.loops() {
        for s in l.statements() {
            let Some(acc) = s.access() else { continue };
            let f = factors.get_mut(&acc.array).expect("parser checked array");
            for (d, idx) in acc.indices.iter().enumerate() {
                if let Index::Affine(e) = idx {
                    for (var, c) in &e.coeffs {
                        if *c != 0 {
                            f[d] = f[d].max(unrolls.get(var).copied().unwrap_or(1));
                        }
                    }
                }
            }
        }
    }
    spec.arrays
        .iter()
        .map(|a| {
            let fs = factors[&a.id]
                .iter()
                .zip(&a.dims)
                .map(|(&want, &size)| (1..=want.min(size)).rev().find(|d| size % d == 0).unwrap_or(1))
                .collect();
            (
                a.id.clone(),
                ArrayPartition {
                    factors: fs,
                    kind: PartitionKind::Cyclic,
                },
            )
        })
        .collect()
}

/// Enumerate the pragma design space of a kernel.
///
/// Each loop independently takes `{no pipeline, pipeline} x {factors dividing
/// its tripcount}`; loops below a pipelined loop are forced to full unroll,
/// which is what pipelining an enclosing loop implies. Array partitions follow
/// the unroll factors. Output order is deterministic: loops in preorder, the
/// first loop varying slowest.
pub fn enumerate_configs(spec: &KernelSpec, factors: &[u64]) -> Vec<PragmaConfig> {
    let mut fs: Vec<u64> = factors.iter().copied().filter(|&f| f > 0).collect();
    fs.sort_unstable();
    fs.dedup();
    let loops = spec.loops();
    if loops.is_empty() || fs.is_empty() {
        return Vec::new();
    }
    let parents = spec.parents();
    let index_of = |id: &str| loops.iter().position(|l| l.id == id).expect("known loop");
    let parent_idx: Vec<Option<usize>> = loops
        .iter()
        .map(|l| parents[&l.id].as_deref().map(index_of))
        .collect();

    let mut out = Vec::new();
    let mut choice: Vec<LoopPragma> = Vec::with_capacity(loops.len());
    // under_pipe[i]: some ancestor of loop i is pipelined
    let mut under_pipe: Vec<bool> = Vec::with_capacity(loops.len());

    fn rec(
        i: usize,
        loops: &[&LoopSpec],
        parent_idx: &[Option<usize>],
        fs: &[u64],
        choice: &mut Vec<LoopPragma>,
        under_pipe: &mut Vec<bool>,
        spec: &KernelSpec,
        out: &mut Vec<PragmaConfig>,
    ) {
        if i == loops.len() {
            let lp: BTreeMap<String, LoopPragma> = loops
                .iter()
                .zip(choice.iter())
                .map(|(l, p)| (l.id.clone(), p.clone()))
                .collect();
            let unrolls = lp.iter().map(|(k, v)| (k.clone(), v.unroll)).collect();
            let cfg = PragmaConfig {
                arrays: partition_for_unrolls(spec, &unrolls),
                loops: lp,
            };
            debug_assert!(validate_config(spec, &cfg).is_ok());
            out.push(cfg);
            return;
        }
        let l = loops[i];
        let forced = parent_idx[i].is_some_and(|p| under_pipe[p] || choice[p].pipeline);
        let options: Vec<LoopPragma> = if forced {
            vec![LoopPragma {
                pipeline: false,
                unroll: l.tripcount,
            }]
        } else {
            [false, true]
                .into_iter()
                .flat_map(|pipeline| {
                    fs.iter()
                        .filter(|&&u| l.tripcount % u == 0)
                        .map(move |&unroll| LoopPragma { pipeline, unroll })
                })
                .collect()
        };
        for opt in options {
            choice.push(opt);
            under_pipe.push(forced);
            rec(i + 1, loops, parent_idx, fs, choice, under_pipe, spec, out);
            choice.pop();
            under_pipe.pop();
        }
    }

    rec(0, &loops, &parent_idx, &fs, &mut choice, &mut under_pipe, spec, &mut out);
    out
}
