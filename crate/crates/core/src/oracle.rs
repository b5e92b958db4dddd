//! Analytical reference model producing ground-truth QoR labels.
//!
//! Iterations are list-scheduled ASAP with unlimited functional units and
//! per-bank port limits; loop latencies follow the pipeline closed forms and
//! outer loops compose bottom-up over condensed blocks.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{annotate_features, LoopFeatures, NodeFeatures, OpLibrary};
use crate::graph::{
    build_cdfg, condense_instance, condense_supernode, extract_inner_subgraphs, Cdfg, EdgeKind,
    InnerLoopSubgraph, NodeKind, NodeType,
};
use crate::ir::{KernelSpec, PragmaConfig};

/// LUTs per extra multiplexer input on a node with fan-in above one.
pub const MUX_LUT: u64 = 8;
/// Pipeline register FFs per stage of a pipelined loop.
pub const PIPE_FF: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Qor {
    pub latency_cycles: u64,
    pub lut: u64,
    pub dsp: u64,
    pub ff: u64,
}

/// Real-valued QoR, as produced by the models.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QorEstimate {
    pub latency_cycles: f64,
    pub lut: f64,
    pub dsp: f64,
    pub ff: f64,
}

impl From<Qor> for QorEstimate {
    fn from(q: Qor) -> Self {
        QorEstimate {
            latency_cycles: q.latency_cycles as f64,
            lut: q.lut as f64,
            dsp: q.dsp as f64,
            ff: q.ff as f64,
        }
    }
}

impl Qor {
    pub fn targets(&self) -> [f64; 4] {
        QorEstimate::from(*self).targets()
    }
}

impl QorEstimate {
    pub fn targets(&self) -> [f64; 4] {
        [self.latency_cycles, self.lut, self.dsp, self.ff]
    }

    pub fn from_targets(t: [f64; 4]) -> Self {
        QorEstimate {
            latency_cycles: t[0],
            lut: t[1],
            dsp: t[2],
            ff: t[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleResult {
    pub start: BTreeMap<usize, u64>,
    pub iteration_latency: u64,
    /// Node ids along the path that determines the iteration latency.
    pub critical_path: Vec<usize>,
}

fn node_cycles(g: &Cdfg, id: usize, lib: &OpLibrary) -> u64 {
    let n = g.node(id).expect("scheduled node exists");
    match n.optype {
        NodeType::Op(op) => lib.cost(op).cycles,
        NodeType::SuperNode => n.features.cycles.max(0.0).ceil() as u64,
        NodeType::MemPort => 0,
    }
}

/// ASAP list schedule of one iteration of `g` (all non-port nodes).
pub fn schedule_iteration(g: &Cdfg, lib: &OpLibrary) -> Result<ScheduleResult> {
    let is_port = |id: usize| g.node(id).is_some_and(|n| n.kind() == NodeKind::MemPort);
    let ids: Vec<usize> = g.nodes.iter().filter(|n| n.kind() != NodeKind::MemPort).map(|n| n.id).collect();
    let mut preds: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut succs: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut banks: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in &g.edges {
        match e.kind {
            EdgeKind::Mem => {
                let (port, other) = if is_port(e.src) { (e.src, e.dst) } else { (e.dst, e.src) };
                let accessor = g.node(other).is_some_and(|n| n.kind() == NodeKind::Op);
                if accessor {
                    banks.entry(other).or_default().push(port);
                }
            }
            _ if is_port(e.src) || is_port(e.dst) => {}
            _ => {
                preds.entry(e.dst).or_default().push(e.src);
                succs.entry(e.src).or_default().push(e.dst);
            }
        }
    }
    let capacity: HashMap<usize, u32> = g
        .nodes
        .iter()
        .filter_map(|n| n.bank.as_ref().map(|b| (n.id, b.capacity.max(1))))
        .collect();

    let mut remaining: HashMap<usize, usize> = ids.iter().map(|&n| (n, preds.get(&n).map_or(0, Vec::len))).collect();
    let mut ready: HashMap<usize, (u64, Option<usize>)> = HashMap::new();
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    for &n in &ids {
        if remaining[&n] == 0 {
            ready.insert(n, (0, None));
            heap.push(Reverse((0, n)));
        }
    }
    let mut usage: HashMap<(usize, u64), u32> = HashMap::new();
    let mut start = BTreeMap::new();
    let mut finish: HashMap<usize, u64> = HashMap::new();
    while let Some(Reverse((r, n))) = heap.pop() {
        let mut t = r;
        if let Some(ports) = banks.get(&n) {
            while ports.iter().any(|p| usage.get(&(*p, t)).copied().unwrap_or(0) >= capacity[p]) {
                t += 1;
            }
            for p in ports {
                *usage.entry((*p, t)).or_insert(0) += 1;
            }
        }
        start.insert(n, t);
        let f = t + node_cycles(g, n, lib);
        finish.insert(n, f);
        for &s in succs.get(&n).into_iter().flatten() {
            let entry = ready.entry(s).or_insert((0, None));
            if f > entry.0 || entry.1.is_none() {
                *entry = (f.max(entry.0), Some(n));
            }
            let c = remaining.get_mut(&s).expect("successor is scheduled");
            *c -= 1;
            if *c == 0 {
                heap.push(Reverse((ready[&s].0, s)));
            }
        }
    }
    if start.len() < ids.len() {
        return Err(Error::Cycle(ids.len() - start.len()));
    }
    let last = finish.iter().max_by_key(|(id, f)| (**f, Reverse(**id))).map(|(id, _)| *id);
    let iteration_latency = last.map_or(0, |n| finish[&n]).max(1);
    let mut critical_path = Vec::new();
    let mut cur = last;
    while let Some(n) = cur {
        critical_path.push(n);
        cur = ready.get(&n).and_then(|r| r.1);
    }
    critical_path.reverse();
    Ok(ScheduleResult {
        start,
        iteration_latency,
        critical_path,
    })
}

/// Whole-loop latency from iteration latency and loop-level features.
pub fn loop_latency(lf: &LoopFeatures, il: u64) -> u64 {
    let tc = lf.tripcount.max(1);
    if lf.pipelined {
        il + lf.ii.max(1) * (tc - 1)
    } else {
        tc * (il + 1) + 1
    }
}

fn op_resources(g: &Cdfg, lib: &OpLibrary, only: Option<&HashSet<usize>>) -> (u64, u64, u64) {
    let deg = g.degrees();
    let (mut lut, mut dsp, mut ff) = (0, 0, 0);
    for n in &g.nodes {
        let NodeType::Op(op) = n.optype else { continue };
        if only.is_some_and(|s| !s.contains(&n.id)) {
            continue;
        }
        let c = lib.cost(op);
        lut += c.lut + MUX_LUT * (deg[&n.id].0 as u64).saturating_sub(1);
        dsp += c.dsp;
        ff += c.ff;
    }
    (lut, dsp, ff)
}

/// Oracle label of one inner loop: iteration latency and loop QoR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerLabel {
    pub il: u64,
    pub qor: Qor,
}

pub fn inner_qor(sub: &InnerLoopSubgraph, lib: &OpLibrary) -> Result<InnerLabel> {
    let il = schedule_iteration(&sub.graph, lib)?.iteration_latency;
    let (lut, dsp, mut ff) = op_resources(&sub.graph, lib, None);
    if sub.loop_features.pipelined {
        ff += PIPE_FF * il;
    }
    Ok(InnerLabel {
        il,
        qor: Qor {
            latency_cycles: loop_latency(&sub.loop_features, il),
            lut,
            dsp,
            ff,
        },
    })
}

/// Everything the oracle derives for one design point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Annotated full graph.
    pub graph: Cdfg,
    /// Inner loops with IL filled in from the oracle.
    pub inner: Vec<(InnerLoopSubgraph, InnerLabel)>,
    /// Graph with every inner loop condensed to an oracle-labeled super node.
    pub condensed: Cdfg,
    pub qor: Qor,
}

fn depth(g: &Cdfg, mut i: usize) -> usize {
    let mut d = 0;
    while let Some(p) = g.instances[i].parent {
        d += 1;
        i = p;
    }
    d
}

/// Latency of a graph whose inner loops are already condensed: outer loop
/// instances are scheduled and folded into blocks bottom-up, then the
/// top-level blocks are scheduled.
pub fn outer_latency(condensed: &Cdfg, spec: &KernelSpec, cfg: &PragmaConfig, lib: &OpLibrary) -> Result<u64> {
    let mut h = condensed.clone();
    let mut live: Vec<usize> = {
        let mut s: Vec<usize> = h.nodes.iter().filter_map(|n| n.instance).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    live.sort_by_key(|&i| (Reverse(depth(&h, i)), i));
    for inst in live {
        let own: HashSet<usize> = h.nodes.iter().filter(|n| n.instance == Some(inst)).map(|n| n.id).collect();
        let keep = with_ports(&h, own);
        let il = schedule_iteration(&crate::graph::induced_graph(&h, &keep), lib)?.iteration_latency;
        let l = &h.instances[inst];
        let lp = spec
            .find_loop(&l.loop_id)
            .ok_or_else(|| Error::Internal(format!("unknown loop `{}`", l.loop_id)))?;
        let lf = LoopFeatures {
            tripcount: lp.tripcount / cfg.unroll(&lp.id).max(1),
            pipelined: false,
            ii: 0,
            il: il as f64,
        };
        let mut f = NodeFeatures::new(NodeType::SuperNode);
        f.cycles = loop_latency(&lf, il) as f64;
        h = condense_instance(&h, inst, f)?;
    }
    let top: HashSet<usize> = h
        .nodes
        .iter()
        .filter(|n| n.kind() != NodeKind::MemPort && n.instance.is_none())
        .map(|n| n.id)
        .collect();
    if top.is_empty() {
        return Ok(0);
    }
    let keep = with_ports(&h, top);
    Ok(schedule_iteration(&crate::graph::induced_graph(&h, &keep), lib)?.iteration_latency)
}

fn with_ports(g: &Cdfg, mut keep: HashSet<usize>) -> HashSet<usize> {
    let extra: Vec<usize> = g
        .edges
        .iter()
        .filter(|e| e.kind == EdgeKind::Mem)
        .filter_map(|e| {
            if keep.contains(&e.src) {
                Some(e.dst)
            } else if keep.contains(&e.dst) {
                Some(e.src)
            } else {
                None
            }
        })
        .collect();
    keep.extend(extra);
    keep
}

/// Resources of a condensed graph: super node resources plus the explicit
/// outer operations with their multiplexers.
pub fn outer_resources(condensed: &Cdfg, lib: &OpLibrary) -> (f64, f64, f64) {
    let (lut, dsp, ff) = op_resources(condensed, lib, None);
    let mut r = (lut as f64, dsp as f64, ff as f64);
    for n in condensed.nodes.iter().filter(|n| n.kind() == NodeKind::SuperNode) {
        r.0 += n.features.lut;
        r.1 += n.features.dsp;
        r.2 += n.features.ff;
    }
    r
}

/// Full oracle evaluation of one design point.
pub fn evaluate(spec: &KernelSpec, cfg: &PragmaConfig, lib: &OpLibrary) -> Result<Evaluation> {
    let graph = annotate_features(build_cdfg(spec, cfg)?, spec, cfg, lib)?;
    let mut inner = Vec::new();
    let mut condensed = graph.clone();
    for mut sub in extract_inner_subgraphs(&graph, spec, cfg)? {
        let label = inner_qor(&sub, lib)?;
        sub.loop_features.il = label.il as f64;
        condensed = condense_supernode(&condensed, &sub, &label.qor.into())?;
        inner.push((sub, label));
    }
    let latency = outer_latency(&condensed, spec, cfg, lib)?;
    let (lut, dsp, ff) = outer_resources(&condensed, lib);
    let qor = Qor {
        latency_cycles: latency,
        lut: lut as u64,
        dsp: dsp as u64,
        ff: ff as u64,
    };
    Ok(Evaluation {
        graph,
        inner,
        condensed,
        qor,
    })
}

pub fn kernel_qor(spec: &KernelSpec, cfg: &PragmaConfig, lib: &OpLibrary) -> Result<Qor> {
    Ok(evaluate(spec, cfg, lib)?.qor)
}
