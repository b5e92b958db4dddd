//! Inner-hierarchy loops: classification, induced subgraphs and super-node
//! condensation.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Cdfg, CdfgEdge, CdfgNode, NodeKind, NodeType};
use crate::error::{Error, Result};
use crate::features::{compute_ii_min, instance_invocations, LoopFeatures, NodeFeatures};
use crate::ir::{KernelSpec, LoopSpec, PragmaConfig};
use crate::oracle::QorEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerCategory {
    /// ① a loop without sub-loops.
    SingleLevel,
    /// ② pipelined loop whose sub-loops are fully unrolled.
    PipelinedOuter,
    /// ③ perfect nest flattened into its pipelined innermost loop.
    Flattened,
    /// ④ non-pipelined nest whose sub-loops are all fully unrolled.
    FullyUnrolled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopSubgraph {
    pub root_loop: String,
    /// Loop instance at the root of the subgraph.
    pub instance: usize,
    pub category: InnerCategory,
    /// Node ids replaced on condensation.
    pub owned: Vec<usize>,
    /// Memory ports touched by owned nodes; shared with the outer graph.
    pub ports: Vec<usize>,
    /// Induced graph over `owned` and `ports`, original ids kept.
    pub graph: Cdfg,
    pub loop_features: LoopFeatures,
    /// Executions of the whole loop implied by the enclosing loops.
    pub outer_invocations: u64,
}

impl InnerLoopSubgraph {
    pub fn pipelined(&self) -> bool {
        self.loop_features.pipelined
    }
}

fn children_of(g: &Cdfg) -> Vec<Vec<usize>> {
    let mut ch = vec![Vec::new(); g.instances.len()];
    for (i, inst) in g.instances.iter().enumerate() {
        if let Some(p) = inst.parent {
            ch[p].push(i);
        }
    }
    ch
}

/// Chain of loops flattened into the pipelined innermost loop, if `l` roots
/// a flattenable perfect nest.
fn flatten_chain<'a>(l: &'a LoopSpec, cfg: &PragmaConfig) -> Option<Vec<&'a LoopSpec>> {
    let mut chain = vec![l];
    let mut cur = l;
    loop {
        if !cur.has_children() {
            return (chain.len() > 1 && cfg.pipelined(&cur.id)).then_some(chain);
        }
        if !cur.is_perfect() || cfg.unroll(&cur.id) != 1 || cfg.pipelined(&cur.id) {
            return None;
        }
        cur = cur.children().next().expect("perfect loop has a child");
        chain.push(cur);
    }
}

fn fully_unrolled_below(l: &LoopSpec, cfg: &PragmaConfig) -> bool {
    l.subtree()
        .into_iter()
        .skip(1)
        .all(|d| !cfg.pipelined(&d.id) && cfg.unroll(&d.id) == d.tripcount)
}

fn classify(l: &LoopSpec, cfg: &PragmaConfig) -> Option<(InnerCategory, bool, u64)> {
    let tc = |x: &LoopSpec| x.tripcount / cfg.unroll(&x.id).max(1);
    if let Some(chain) = flatten_chain(l, cfg) {
        let eff = chain.iter().map(|x| tc(x)).product();
        return Some((InnerCategory::Flattened, true, eff));
    }
    if cfg.pipelined(&l.id) {
        let cat = if l.has_children() {
            InnerCategory::PipelinedOuter
        } else {
            InnerCategory::SingleLevel
        };
        return Some((cat, true, tc(l)));
    }
    if !l.has_children() {
        return Some((InnerCategory::SingleLevel, false, tc(l)));
    }
    if fully_unrolled_below(l, cfg) {
        return Some((InnerCategory::FullyUnrolled, false, tc(l)));
    }
    None
}

/// Node ids belonging to loop instance `inst` or any instance below it.
pub fn owned_nodes(g: &Cdfg, inst: usize) -> Vec<usize> {
    g.nodes
        .iter()
        .filter(|n| n.instance.is_some_and(|i| g.instance_within(i, inst)))
        .map(|n| n.id)
        .collect()
}

/// Induced graph on `keep`, original ids retained.
pub fn induced_graph(g: &Cdfg, keep: &HashSet<usize>) -> Cdfg {
    let mut sub = Cdfg {
        kernel: g.kernel.clone(),
        config_hash: g.config_hash.clone(),
        nodes: g.nodes.iter().filter(|n| keep.contains(&n.id)).cloned().collect(),
        edges: g
            .edges
            .iter()
            .filter(|e| keep.contains(&e.src) && keep.contains(&e.dst))
            .copied()
            .collect(),
        instances: g.instances.clone(),
        next_id: g.next_id,
    };
    sub.recompute_degrees();
    sub
}

/// Identify the maximal inner-hierarchy loops of a built graph, one entry
/// per loop instance (replicas under an unrolled outer loop are separate).
pub fn extract_inner_subgraphs(g: &Cdfg, spec: &KernelSpec, cfg: &PragmaConfig) -> Result<Vec<InnerLoopSubgraph>> {
    let children = children_of(g);
    let mut roots: Vec<(usize, InnerCategory, bool, u64)> = Vec::new();
    let mut stack: Vec<usize> = (0..g.instances.len())
        .filter(|&i| g.instances[i].parent.is_none())
        .rev()
        .collect();
    while let Some(i) = stack.pop() {
        let id = &g.instances[i].loop_id;
        let l = spec
            .find_loop(id)
            .ok_or_else(|| Error::Internal(format!("graph loop `{id}` not in kernel")))?;
        match classify(l, cfg) {
            Some((cat, pipe, tc)) => roots.push((i, cat, pipe, tc)),
            None => stack.extend(children[i].iter().rev()),
        }
    }

    let mut port_links: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in &g.edges {
        let (a, b) = (g.node(e.src), g.node(e.dst));
        if let (Some(a), Some(b)) = (a, b) {
            if a.kind() == NodeKind::MemPort {
                port_links.entry(b.id).or_default().push(a.id);
            } else if b.kind() == NodeKind::MemPort {
                port_links.entry(a.id).or_default().push(b.id);
            }
        }
    }

    let mut out = Vec::with_capacity(roots.len());
    for (inst, category, pipelined, tripcount) in roots {
        let owned = owned_nodes(g, inst);
        let ports: BTreeSet<usize> = owned
            .iter()
            .flat_map(|n| port_links.get(n).into_iter().flatten().copied())
            .collect();
        let keep: HashSet<usize> = owned.iter().copied().chain(ports.iter().copied()).collect();
        let graph = induced_graph(g, &keep);
        let outer_invocations = instance_invocations(g, spec, cfg, g.instances[inst].parent);
        let mut sub = InnerLoopSubgraph {
            root_loop: g.instances[inst].loop_id.clone(),
            instance: inst,
            category,
            owned,
            ports: ports.into_iter().collect(),
            graph,
            loop_features: LoopFeatures {
                tripcount,
                pipelined,
                ii: 0,
                il: 0.0,
            },
            outer_invocations,
        };
        if pipelined {
            sub.loop_features.ii = compute_ii_min(&sub, &spec.deps, spec, cfg);
        }
        out.push(sub);
    }
    Ok(out)
}

/// Replace every node of loop instance `inst` (and below) by one super node
/// carrying `features`. Boundary edges are re-attached with duplicates
/// removed.
pub fn condense_instance(g: &Cdfg, inst: usize, features: NodeFeatures) -> Result<Cdfg> {
    let owned: HashSet<usize> = owned_nodes(g, inst).into_iter().collect();
    if owned.is_empty() {
        return Err(Error::SubgraphNotFound(inst));
    }
    condense_set(g, inst, &owned, features)
}

fn condense_set(g: &Cdfg, inst: usize, owned: &HashSet<usize>, mut features: NodeFeatures) -> Result<Cdfg> {
    let root = &g.instances[inst];
    let parent = root.parent;
    let replica = parent
        .and_then(|p| root.replicas.get(&g.instances[p].loop_id).copied())
        .unwrap_or(0);
    let sid = g.next_id;
    features.optype = NodeType::SuperNode;
    let mut nodes: Vec<CdfgNode> = g.nodes.iter().filter(|n| !owned.contains(&n.id)).cloned().collect();
    nodes.push(CdfgNode {
        id: sid,
        optype: NodeType::SuperNode,
        replica,
        instance: parent,
        stmt: None,
        array: None,
        bank: None,
        represents: Some(inst),
        features,
    });
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for e in &g.edges {
        let (si, di) = (owned.contains(&e.src), owned.contains(&e.dst));
        if si && di {
            continue;
        }
        let ne = CdfgEdge {
            src: if si { sid } else { e.src },
            dst: if di { sid } else { e.dst },
            kind: e.kind,
        };
        if seen.insert(ne) {
            edges.push(ne);
        }
    }
    let mut out = Cdfg {
        kernel: g.kernel.clone(),
        config_hash: g.config_hash.clone(),
        nodes,
        edges,
        instances: g.instances.clone(),
        next_id: sid + 1,
    };
    out.recompute_degrees();
    out.check()?;
    Ok(out)
}

/// Condense an extracted inner loop using (predicted or oracle) QoR: latency
/// becomes the super node's cycle count, resources carry over.
pub fn condense_supernode(g: &Cdfg, sub: &InnerLoopSubgraph, qor: &QorEstimate) -> Result<Cdfg> {
    let owned: HashSet<usize> = sub.owned.iter().copied().collect();
    if owned.is_empty() || owned.iter().any(|&n| g.index_of(n).is_none()) {
        return Err(Error::SubgraphNotFound(sub.instance));
    }
    let mut f = NodeFeatures::new(NodeType::SuperNode);
    f.invocations = sub.outer_invocations;
    f.cycles = qor.latency_cycles;
    f.lut = qor.lut;
    f.dsp = qor.dsp;
    f.ff = qor.ff;
    condense_set(g, sub.instance, &owned, f)
}
