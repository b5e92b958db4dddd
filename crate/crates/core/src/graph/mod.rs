//! Pragma-aware control/data-flow graph construction.
//!
//! Pipelining leaves the graph untouched, unrolling replicates the body of
//! the unrolled loop, and array partitioning splits each array into one
//! memory-port node per bank, wired to the accesses that can reach it.

mod inner;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use inner::{
    condense_instance, condense_supernode, extract_inner_subgraphs, induced_graph, owned_nodes,
    InnerCategory,
    InnerLoopSubgraph,
};

use crate::error::{Error, Result};
use crate::features::NodeFeatures;
use crate::ir::{
    validate_config, BodyItem, Index, KernelSpec, LoopSpec, OpType, PartitionKind, PragmaConfig,
    Statement,
};

/// Node vocabulary: the statement optypes plus memory ports and super nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum NodeType {
    Op(OpType),
    MemPort,
    SuperNode,
}

impl NodeType {
    pub const VOCAB_SIZE: usize = OpType::ALL.len() + 2;

    pub fn index(self) -> usize {
        match self {
            NodeType::Op(op) => OpType::ALL.iter().position(|o| *o == op).expect("in vocab"),
            NodeType::MemPort => OpType::ALL.len(),
            NodeType::SuperNode => OpType::ALL.len() + 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::Op(op) => op.name(),
            NodeType::MemPort => "memport",
            NodeType::SuperNode => "supernode",
        }
    }

    pub fn from_name(s: &str) -> Option<NodeType> {
        match s {
            "memport" => Some(NodeType::MemPort),
            "supernode" => Some(NodeType::SuperNode),
            _ => OpType::from_name(s).map(NodeType::Op),
        }
    }

    pub fn kind(self) -> NodeKind {
        match self {
            NodeType::Op(_) => NodeKind::Op,
            NodeType::MemPort => NodeKind::MemPort,
            NodeType::SuperNode => NodeKind::SuperNode,
        }
    }

    pub fn op(self) -> Option<OpType> {
        match self {
            NodeType::Op(op) => Some(op),
            _ => None,
        }
    }
}

impl From<NodeType> for String {
    fn from(t: NodeType) -> String {
        t.name().to_string()
    }
}

impl TryFrom<String> for NodeType {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        NodeType::from_name(&s).ok_or_else(|| format!("unknown optype `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Op,
    MemPort,
    SuperNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Data,
    Control,
    Mem,
}

/// One memory bank of a (possibly partitioned) array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bank {
    pub array: String,
    pub index: u64,
    /// Accesses the bank can serve per cycle.
    pub capacity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfgNode {
    /// Stable identifier; survives condensation.
    pub id: usize,
    pub optype: NodeType,
    /// Copy number within the owning loop's unrolled body.
    pub replica: u32,
    /// Loop instance the node executes in (`None` for memory ports and
    /// top-level blocks).
    pub instance: Option<usize>,
    /// Source statement for body operations.
    pub stmt: Option<String>,
    /// Accessed array for load/store nodes.
    pub array: Option<String>,
    pub bank: Option<Bank>,
    /// Loop instance a super node stands for.
    pub represents: Option<usize>,
    pub features: NodeFeatures,
}

impl CdfgNode {
    pub fn kind(&self) -> NodeKind {
        self.optype.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CdfgEdge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

/// One execution context of a loop: a loop body copy under a specific
/// replica assignment of its enclosing unrolled loops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopInstance {
    pub loop_id: String,
    pub parent: Option<usize>,
    /// Replica index of every enclosing loop on the path to this instance.
    pub replicas: BTreeMap<String, u32>,
    pub phi: usize,
    pub icmp: usize,
    pub br: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cdfg {
    pub kernel: String,
    pub config_hash: String,
    /// Sorted by `id`.
    pub nodes: Vec<CdfgNode>,
    pub edges: Vec<CdfgEdge>,
    pub instances: Vec<LoopInstance>,
    pub next_id: usize,
}

impl Cdfg {
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    pub fn node(&self, id: usize) -> Option<&CdfgNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: usize) -> Option<&mut CdfgNode> {
        self.index_of(id).map(move |i| &mut self.nodes[i])
    }

    /// Loop id the node originates from.
    pub fn loop_of(&self, id: usize) -> Option<&str> {
        let n = self.node(id)?;
        let inst = n.represents.or(n.instance)?;
        Some(self.instances[inst].loop_id.as_str())
    }

    /// Whether `inst` equals `ancestor` or lies below it.
    pub fn instance_within(&self, mut inst: usize, ancestor: usize) -> bool {
        loop {
            if inst == ancestor {
                return true;
            }
            match self.instances[inst].parent {
                Some(p) => inst = p,
                None => return false,
            }
        }
    }

    pub fn degrees(&self) -> HashMap<usize, (u32, u32)> {
        let mut deg: HashMap<usize, (u32, u32)> = self.nodes.iter().map(|n| (n.id, (0, 0))).collect();
        for e in &self.edges {
            if let Some(d) = deg.get_mut(&e.src) {
                d.1 += 1;
            }
            if let Some(d) = deg.get_mut(&e.dst) {
                d.0 += 1;
            }
        }
        deg
    }

    pub fn recompute_degrees(&mut self) {
        let deg = self.degrees();
        for n in &mut self.nodes {
            let (i, o) = deg[&n.id];
            n.features.in_degree = i;
            n.features.out_degree = o;
        }
    }

    pub fn ports_of(&self, array: &str) -> Vec<&CdfgNode> {
        self.nodes
            .iter()
            .filter(|n| n.bank.as_ref().is_some_and(|b| b.array == array))
            .collect()
    }

    /// Structural check of the graph invariants.
    pub fn check(&self) -> Result<()> {
        let ids: HashSet<usize> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() || self.nodes.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::Internal("node ids not strictly increasing".into()));
        }
        for e in &self.edges {
            if !ids.contains(&e.src) || !ids.contains(&e.dst) {
                return Err(Error::Internal(format!("dangling edge {} -> {}", e.src, e.dst)));
            }
            if e.kind == EdgeKind::Data && e.src == e.dst {
                return Err(Error::Internal(format!("data self-loop on {}", e.src)));
            }
            if e.kind == EdgeKind::Mem {
                let (a, b) = (self.node(e.src).unwrap(), self.node(e.dst).unwrap());
                let is_port = |n: &CdfgNode| n.kind() == NodeKind::MemPort;
                let is_access = |n: &CdfgNode| {
                    n.optype.op().is_some_and(OpType::is_memory) || n.kind() == NodeKind::SuperNode
                };
                if !((is_port(a) && is_access(b)) || (is_access(a) && is_port(b))) {
                    return Err(Error::Internal(format!(
                        "mem edge {} -> {} does not join a port and an access",
                        e.src, e.dst
                    )));
                }
            }
        }
        Ok(())
    }
}

struct Builder<'a> {
    spec: &'a KernelSpec,
    cfg: &'a PragmaConfig,
    nodes: Vec<CdfgNode>,
    edges: Vec<CdfgEdge>,
    seen: HashSet<CdfgEdge>,
    instances: Vec<LoopInstance>,
}

impl Builder<'_> {
    fn node(&mut self, optype: NodeType, replica: u32, instance: Option<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(CdfgNode {
            id,
            optype,
            replica,
            instance,
            stmt: None,
            array: None,
            bank: None,
            represents: None,
            features: NodeFeatures::new(optype),
        });
        id
    }

    fn edge(&mut self, src: usize, dst: usize, kind: EdgeKind) {
        let e = CdfgEdge { src, dst, kind };
        if self.seen.insert(e) {
            self.edges.push(e);
        }
    }

    /// Emit one instance of `l`; returns the instance id and the values its
    /// body defines (last replica wins).
    fn emit_loop(
        &mut self,
        l: &LoopSpec,
        parent: Option<usize>,
        replicas: BTreeMap<String, u32>,
        env: &HashMap<String, usize>,
    ) -> (usize, HashMap<String, usize>) {
        let inst = self.instances.len();
        self.instances.push(LoopInstance {
            loop_id: l.id.clone(),
            parent,
            replicas: replicas.clone(),
            phi: 0,
            icmp: 0,
            br: 0,
        });
        let phi = self.node(NodeType::Op(OpType::Phi), 0, Some(inst));
        let icmp = self.node(NodeType::Op(OpType::ICmp), 0, Some(inst));
        let br = self.node(NodeType::Op(OpType::Br), 0, Some(inst));
        self.instances[inst].phi = phi;
        self.instances[inst].icmp = icmp;
        self.instances[inst].br = br;
        self.edge(phi, icmp, EdgeKind::Data);
        self.edge(icmp, br, EdgeKind::Data);

        let unroll = self.cfg.unroll(&l.id).max(1) as u32;
        let mut defined = HashMap::new();
        for r in 0..unroll {
            let mut env_r = env.clone();
            env_r.insert(l.id.clone(), phi);
            let mut child_replicas = replicas.clone();
            child_replicas.insert(l.id.clone(), r);
            let first_body_node = self.nodes.len();
            let first_edge = self.edges.len();
            let mut prev_child_br: Option<usize> = None;
            for item in &l.body {
                match item {
                    BodyItem::Stmt(s) => {
                        let n = self.node(NodeType::Op(s.op), r, Some(inst));
                        self.nodes[n].stmt = Some(s.id.clone());
                        for v in s.value_operands() {
                            let src = env_r[v];
                            self.edge(src, n, EdgeKind::Data);
                        }
                        if let Some(acc) = s.access() {
                            self.nodes[n].array = Some(acc.array.clone());
                            let mut vars: Vec<&str> = acc.loop_vars().collect();
                            vars.sort_unstable();
                            vars.dedup();
                            for var in vars {
                                let src = env_r[var];
                                self.edge(src, n, EdgeKind::Data);
                            }
                        }
                        env_r.insert(s.id.clone(), n);
                        defined.insert(s.id.clone(), n);
                    }
                    BodyItem::Loop(c) => {
                        let (ci, cdefs) = self.emit_loop(c, Some(inst), child_replicas.clone(), &env_r);
                        let (cphi, cbr) = (self.instances[ci].phi, self.instances[ci].br);
                        self.edge(phi, cphi, EdgeKind::Control);
                        self.edge(cbr, br, EdgeKind::Control);
                        if let Some(prev) = prev_child_br {
                            self.edge(prev, cphi, EdgeKind::Control);
                        }
                        prev_child_br = Some(cbr);
                        for (k, v) in cdefs {
                            env_r.insert(k.clone(), v);
                            defined.insert(k, v);
                        }
                    }
                }
            }
            // Anchor this replica's statements between the loop's phi and br.
            let body: Vec<usize> = (first_body_node..self.nodes.len())
                .filter(|&n| self.nodes[n].instance == Some(inst) && self.nodes[n].stmt.is_some())
                .collect();
            let body_set: HashSet<usize> = body.iter().copied().collect();
            let mut has_pred = HashSet::new();
            let mut has_succ = HashSet::new();
            for e in &self.edges[first_edge..] {
                if body_set.contains(&e.dst) && (body_set.contains(&e.src) || e.src == phi) {
                    has_pred.insert(e.dst);
                }
                if body_set.contains(&e.src) && body_set.contains(&e.dst) {
                    has_succ.insert(e.src);
                }
            }
            for &n in &body {
                if !has_pred.contains(&n) {
                    self.edge(phi, n, EdgeKind::Control);
                }
                if !has_succ.contains(&n) {
                    self.edge(n, br, EdgeKind::Control);
                }
            }
        }
        (inst, defined)
    }
}

/// Graph skeleton without memory ports: replicated operations, loop-control
/// scaffolding and data/control edges.
pub fn build_structure(spec: &KernelSpec, cfg: &PragmaConfig) -> Result<Cdfg> {
    validate_config(spec, cfg).map_err(Error::InvalidConfig)?;
    let mut b = Builder {
        spec,
        cfg,
        nodes: Vec::new(),
        edges: Vec::new(),
        seen: HashSet::new(),
        instances: Vec::new(),
    };
    let mut env = HashMap::new();
    let mut prev_br: Option<usize> = None;
    for l in &b.spec.root_loops {
        let (inst, defs) = b.emit_loop(l, None, BTreeMap::new(), &env);
        let (phi, br) = (b.instances[inst].phi, b.instances[inst].br);
        if let Some(p) = prev_br {
            b.edge(p, phi, EdgeKind::Control);
        }
        prev_br = Some(br);
        env.extend(defs);
    }
    let next_id = b.nodes.len();
    let mut g = Cdfg {
        kernel: spec.name.clone(),
        config_hash: cfg.normalized(spec).hash_hex(),
        nodes: b.nodes,
        edges: b.edges,
        instances: b.instances,
        next_id,
    };
    g.recompute_degrees();
    Ok(g)
}

/// Residue context of an access node: (tripcount, unroll, replica) of every
/// enclosing loop variable.
fn access_context(g: &Cdfg, spec: &KernelSpec, cfg: &PragmaConfig, n: &CdfgNode) -> HashMap<String, (u64, u64, u64)> {
    let mut ctx = HashMap::new();
    let inst = &g.instances[n.instance.expect("access inside a loop")];
    let mut chain: Vec<(&str, u32)> = inst.replicas.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    chain.push((inst.loop_id.as_str(), n.replica));
    for (id, r) in chain {
        let l = spec.find_loop(id).expect("known loop");
        ctx.insert(id.to_string(), (l.tripcount, cfg.unroll(id).max(1), r as u64));
    }
    ctx
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Flat bank index of an element coordinate (mixed radix, dimension 0 most
/// significant).
pub fn bank_of(coord: &[i64], dims: &[u64], factors: &[u64], kind: PartitionKind) -> u64 {
    let mut flat = 0u64;
    for ((&x, &size), &f) in coord.iter().zip(dims).zip(factors) {
        let b = match kind {
            PartitionKind::Cyclic => x.rem_euclid(f as i64) as u64,
            PartitionKind::Block => {
                let block = (size / f).max(1) as i64;
                (x.div_euclid(block)).clamp(0, f as i64 - 1) as u64
            }
        };
        flat = flat * f + b;
    }
    flat
}

const ROUTING_ENUM_LIMIT: u64 = 1 << 20;

/// Banks an access node can touch over the whole iteration space, given its
/// replica residues.
fn reachable_banks(
    g: &Cdfg,
    spec: &KernelSpec,
    cfg: &PragmaConfig,
    stmts: &HashMap<&str, &Statement>,
    n: &CdfgNode,
) -> Vec<u64> {
    let array = n.array.as_deref().expect("access node");
    let arr = spec.array(array).expect("declared");
    let (factors, kind) = cfg.partition(array, arr.dims.len());
    let total: u64 = factors.iter().product();
    let stmt = stmts[n.stmt.as_deref().expect("body op")];
    let acc = stmt.access().expect("access");
    if acc.is_dynamic() {
        return (0..total).collect();
    }
    let ctx = access_context(g, spec, cfg, n);
    let mut vars: Vec<&str> = acc.loop_vars().collect();
    vars.sort_unstable();
    vars.dedup();
    // For cyclic banks the residue pattern of k repeats with period dividing
    // lcm(factors); block banks need the exact index range.
    let period = factors.iter().fold(1, |a, &f| a / gcd(a, f) * f);
    let ranges: Vec<(String, u64, u64, u64)> = vars
        .iter()
        .map(|v| {
            let (tc, u, r) = ctx[*v];
            let n_iter = tc / u;
            let count = match kind {
                PartitionKind::Cyclic => n_iter.min(period),
                PartitionKind::Block => n_iter,
            };
            (v.to_string(), u, r, count)
        })
        .collect();
    let work: u64 = ranges.iter().map(|r| r.3).product();
    if work > ROUTING_ENUM_LIMIT {
        return (0..total).collect();
    }
    let mut banks = HashSet::new();
    let mut k = vec![0u64; ranges.len()];
    loop {
        let env: HashMap<&str, i64> = ranges
            .iter()
            .zip(&k)
            .map(|((v, u, r, _), &ki)| (v.as_str(), (ki * u + r) as i64))
            .collect();
        let coord: Vec<i64> = acc
            .indices
            .iter()
            .map(|i| match i {
                Index::Affine(e) => e.eval(|v| env[v]),
                Index::Dynamic => unreachable!(),
            })
            .collect();
        banks.insert(bank_of(&coord, &arr.dims, &factors, kind));
        // odometer
        let mut d = 0;
        loop {
            if d == k.len() {
                let mut out: Vec<u64> = banks.into_iter().collect();
                out.sort_unstable();
                return out;
            }
            k[d] += 1;
            if k[d] < ranges[d].3 {
                break;
            }
            k[d] = 0;
            d += 1;
        }
    }
}

/// Add one memory-port node per array bank and connect every load/store to
/// the banks it can reach.
pub fn add_memory_ports(mut g: Cdfg, spec: &KernelSpec, cfg: &PragmaConfig) -> Cdfg {
    let mut port_ids: HashMap<(String, u64), usize> = HashMap::new();
    for arr in &spec.arrays {
        let (factors, _) = cfg.partition(&arr.id, arr.dims.len());
        let count: u64 = factors.iter().product();
        for b in 0..count {
            let id = g.next_id;
            g.next_id += 1;
            g.nodes.push(CdfgNode {
                id,
                optype: NodeType::MemPort,
                replica: 0,
                instance: None,
                stmt: None,
                array: Some(arr.id.clone()),
                bank: Some(Bank {
                    array: arr.id.clone(),
                    index: b,
                    capacity: arr.base_ports,
                }),
                represents: None,
                features: NodeFeatures::new(NodeType::MemPort),
            });
            port_ids.insert((arr.id.clone(), b), id);
        }
    }
    let accesses: Vec<CdfgNode> = g
        .nodes
        .iter()
        .filter(|n| n.optype.op().is_some_and(OpType::is_memory))
        .cloned()
        .collect();
    let mut seen: HashSet<CdfgEdge> = g.edges.iter().copied().collect();
    let stmts: HashMap<&str, &Statement> = spec
        .loops()
        .into_iter()
        .flat_map(|l| l.statements())
        .map(|s| (s.id.as_str(), s))
        .collect();
    for n in &accesses {
        let array = n.array.clone().expect("access node");
        for b in reachable_banks(&g, spec, cfg, &stmts, n) {
            let port = port_ids[&(array.clone(), b)];
            let e = if n.optype == NodeType::Op(OpType::Load) {
                CdfgEdge { src: port, dst: n.id, kind: EdgeKind::Mem }
            } else {
                CdfgEdge { src: n.id, dst: port, kind: EdgeKind::Mem }
            };
            if seen.insert(e) {
                g.edges.push(e);
            }
        }
    }
    g.recompute_degrees();
    g
}

/// Full pragma-transformed graph (structure plus memory ports).
pub fn build_cdfg(spec: &KernelSpec, cfg: &PragmaConfig) -> Result<Cdfg> {
    let g = build_structure(spec, cfg)?;
    Ok(add_memory_ports(g, spec, cfg))
}

#[derive(Serialize)]
struct DumpNode<'a> {
    id: usize,
    kind: NodeKind,
    optype: &'static str,
    replica: u32,
    #[serde(rename = "loop")]
    loop_id: Option<&'a str>,
    features: &'a NodeFeatures,
}

#[derive(Serialize)]
struct DumpEdge {
    src: usize,
    dst: usize,
    kind: EdgeKind,
}

#[derive(Serialize)]
struct Dump<'a> {
    kernel: &'a str,
    config_hash: &'a str,
    nodes: Vec<DumpNode<'a>>,
    edges: Vec<DumpEdge>,
}

impl Cdfg {
    /// JSON graph dump with nodes and edges in stable order.
    pub fn to_dump_json(&self) -> String {
        let mut edges: Vec<DumpEdge> = self
            .edges
            .iter()
            .map(|e| DumpEdge { src: e.src, dst: e.dst, kind: e.kind })
            .collect();
        edges.sort_by_key(|e| (e.src, e.dst, e.kind));
        let dump = Dump {
            kernel: &self.kernel,
            config_hash: &self.config_hash,
            nodes: self
                .nodes
                .iter()
                .map(|n| DumpNode {
                    id: n.id,
                    kind: n.kind(),
                    optype: n.optype.name(),
                    replica: n.replica,
                    loop_id: self.loop_of(n.id),
                    features: &n.features,
                })
                .collect(),
            edges,
        };
        serde_json::to_string_pretty(&dump).expect("graph serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_kernel, ArrayPartition, LoopPragma};

    fn scale() -> KernelSpec {
        parse_kernel(
            "kernel scale { array A[16]: f32; array B[16]: f32;
               loop i in 0..16 { a = load A[i]; m = fmul a, a; s = store B[i], m; } }",
        )
        .unwrap()
    }

    fn with(loops: &[(&str, bool, u64)], arrays: &[(&str, &[u64])]) -> PragmaConfig {
        PragmaConfig {
            loops: loops
                .iter()
                .map(|(id, p, u)| (id.to_string(), LoopPragma { pipeline: *p, unroll: *u }))
                .collect(),
            arrays: arrays
                .iter()
                .map(|(id, f)| {
                    (
                        id.to_string(),
                        ArrayPartition { factors: f.to_vec(), kind: PartitionKind::Cyclic },
                    )
                })
                .collect(),
        }
    }

    fn body_ops(g: &Cdfg) -> usize {
        g.nodes.iter().filter(|n| n.stmt.is_some()).count()
    }

    #[test]
    fn identity_construction() {
        let g = build_cdfg(&scale(), &PragmaConfig::default()).unwrap();
        assert_eq!(body_ops(&g), 3);
        // phi, icmp, br + 3 body + one port per array
        assert_eq!(g.nodes.len(), 3 + 3 + 2);
        g.check().unwrap();
    }

    #[test]
    fn unroll_replicates_body() {
        let g = build_cdfg(&scale(), &with(&[("i", false, 4)], &[])).unwrap();
        assert_eq!(body_ops(&g), 12);
        let inst = &g.instances[0];
        for n in g.nodes.iter().filter(|n| n.stmt.as_deref() == Some("a")) {
            assert!(g.edges.contains(&CdfgEdge { src: inst.phi, dst: n.id, kind: EdgeKind::Data }));
        }
        for n in g.nodes.iter().filter(|n| n.stmt.as_deref() == Some("s")) {
            assert!(g.edges.contains(&CdfgEdge { src: n.id, dst: inst.br, kind: EdgeKind::Control }));
        }
        let mut reps: Vec<u32> = g.nodes.iter().filter(|n| n.stmt.is_some()).map(|n| n.replica).collect();
        reps.sort_unstable();
        assert_eq!(reps, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn pipelining_leaves_graph_unchanged() {
        let a = build_cdfg(&scale(), &with(&[("i", false, 2)], &[("A", &[2])])).unwrap();
        let b = build_cdfg(&scale(), &with(&[("i", true, 2)], &[("A", &[2])])).unwrap();
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn port_count_is_product_of_factors() {
        let k = parse_kernel(
            "kernel t { array A[8][8]: f32;
               loop i in 0..8 { loop j in 0..8 { a = load A[i][j]; } } }",
        )
        .unwrap();
        let g = build_cdfg(&k, &with(&[], &[("A", &[2, 4])])).unwrap();
        assert_eq!(g.ports_of("A").len(), 8);
    }

    #[test]
    fn cyclic_routing_follows_replica_residue() {
        let g = build_cdfg(&scale(), &with(&[("i", false, 4)], &[("A", &[4])])).unwrap();
        for n in g.nodes.iter().filter(|n| n.stmt.as_deref() == Some("a")) {
            let ports: Vec<u64> = g
                .edges
                .iter()
                .filter(|e| e.dst == n.id && e.kind == EdgeKind::Mem)
                .map(|e| g.node(e.src).unwrap().bank.as_ref().unwrap().index)
                .collect();
            assert_eq!(ports, vec![n.replica as u64 % 4]);
        }
    }

    #[test]
    fn dynamic_access_reaches_all_ports() {
        let k = parse_kernel(
            "kernel d { array A[16]: f32; loop i in 0..16 { a = load A[dyn]; } }",
        )
        .unwrap();
        let g = build_cdfg(&k, &with(&[], &[("A", &[4])])).unwrap();
        let load = g.nodes.iter().find(|n| n.stmt.is_some()).unwrap();
        let mem = g.edges.iter().filter(|e| e.dst == load.id && e.kind == EdgeKind::Mem).count();
        assert_eq!(mem, 4);
    }

    #[test]
    fn block_banks() {
        assert_eq!(bank_of(&[0], &[16], &[4], PartitionKind::Block), 0);
        assert_eq!(bank_of(&[5], &[16], &[4], PartitionKind::Block), 1);
        assert_eq!(bank_of(&[15], &[16], &[4], PartitionKind::Block), 3);
        assert_eq!(bank_of(&[3, 5], &[4, 8], &[2, 4], PartitionKind::Cyclic), 1 * 4 + 1);
    }

    #[test]
    fn sequential_root_loops_chained() {
        let k = parse_kernel(
            "kernel two { array A[8]: f32;
               loop i in 0..8 { a = load A[i]; }
               loop j in 0..8 { b = load A[j]; } }",
        )
        .unwrap();
        let g = build_cdfg(&k, &PragmaConfig::default()).unwrap();
        let (i, j) = (&g.instances[0], &g.instances[1]);
        assert!(g.edges.contains(&CdfgEdge { src: i.br, dst: j.phi, kind: EdgeKind::Control }));
    }

    #[test]
    fn dump_is_stable() {
        let g = build_cdfg(&scale(), &with(&[("i", false, 2)], &[])).unwrap();
        let a = g.to_dump_json();
        let b = build_cdfg(&scale(), &with(&[("i", false, 2)], &[])).unwrap().to_dump_json();
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["nodes"][0]["optype"], "phi");
        assert_eq!(v["nodes"][0]["loop"], "i");
    }
}
