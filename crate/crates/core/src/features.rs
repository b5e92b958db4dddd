//! Node and loop-level features, the operation cost library, the minimum
//! initiation interval, and numeric encoding for the networks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Cdfg, InnerLoopSubgraph, NodeKind, NodeType};
use crate::ir::{DependenceSpec, KernelSpec, OpType, PragmaConfig};

/// Per-node attributes. Resource and timing fields are reals so that super
/// nodes can carry predicted values; operation nodes hold library integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub optype: NodeType,
    pub invocations: u64,
    pub in_degree: u32,
    pub out_degree: u32,
    pub cycles: f64,
    pub delay_ns: f64,
    pub lut: f64,
    pub dsp: f64,
    pub ff: f64,
}

impl NodeFeatures {
    pub fn new(optype: NodeType) -> Self {
        NodeFeatures {
            optype,
            invocations: 0,
            in_degree: 0,
            out_degree: 0,
            cycles: 0.0,
            delay_ns: 0.0,
            lut: 0.0,
            dsp: 0.0,
            ff: 0.0,
        }
    }

    /// The eight numeric attributes in encoding order.
    pub fn numeric(&self) -> [f64; NUMERIC_FEATURES] {
        [
            self.invocations as f64,
            self.in_degree as f64,
            self.out_degree as f64,
            self.cycles,
            self.delay_ns,
            self.lut,
            self.dsp,
            self.ff,
        ]
    }
}

pub const NUMERIC_FEATURES: usize = 8;
pub const ENCODED_WIDTH: usize = NodeType::VOCAB_SIZE + NUMERIC_FEATURES;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoopFeatures {
    /// Iterations executed by the (rolled, possibly flattened) loop.
    pub tripcount: u64,
    pub pipelined: bool,
    /// Initiation interval; 0 when not pipelined.
    pub ii: u64,
    /// Iteration latency: oracle label in datasets, model output at inference.
    pub il: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub cycles: u64,
    pub delay_ns: f64,
    pub lut: u64,
    pub dsp: u64,
    pub ff: u64,
}

impl OpCost {
    const fn new(cycles: u64, delay_ns: f64, lut: u64, dsp: u64, ff: u64) -> Self {
        OpCost {
            cycles,
            delay_ns,
            lut,
            dsp,
            ff,
        }
    }
}

/// Latency/delay/resource table keyed by optype name (plus `memport`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpLibrary {
    entries: BTreeMap<String, OpCost>,
}

impl Default for OpLibrary {
    fn default() -> Self {
        let table = [
            ("add", OpCost::new(1, 1.0, 32, 0, 32)),
            ("sub", OpCost::new(1, 1.0, 32, 0, 32)),
            ("mul", OpCost::new(3, 3.0, 20, 2, 64)),
            ("div", OpCost::new(10, 4.0, 400, 0, 300)),
            ("fadd", OpCost::new(4, 5.0, 200, 2, 300)),
            ("fsub", OpCost::new(4, 5.0, 200, 2, 300)),
            ("fmul", OpCost::new(3, 4.0, 80, 3, 150)),
            ("fdiv", OpCost::new(12, 6.0, 800, 0, 700)),
            ("icmp", OpCost::new(1, 1.0, 0, 0, 0)),
            ("fcmp", OpCost::new(2, 2.5, 0, 0, 0)),
            ("select", OpCost::new(1, 0.5, 0, 0, 0)),
            ("load", OpCost::new(2, 1.5, 0, 0, 0)),
            ("store", OpCost::new(2, 1.5, 0, 0, 0)),
            ("phi", OpCost::new(0, 0.0, 0, 0, 0)),
            ("br", OpCost::new(0, 0.0, 0, 0, 0)),
            ("memport", OpCost::new(0, 0.0, 0, 0, 0)),
        ];
        OpLibrary {
            entries: table.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

impl OpLibrary {
    pub fn from_entries(entries: BTreeMap<String, OpCost>) -> Result<Self> {
        let lib = OpLibrary { entries };
        lib.validate()?;
        Ok(lib)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let entries: BTreeMap<String, OpCost> = serde_json::from_str(&text)?;
        Self::from_entries(entries)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("library serializes")
    }

    /// Every vocabulary optype present; non-arithmetic entries free of
    /// resource cost.
    pub fn validate(&self) -> Result<()> {
        for name in OpType::ALL.iter().map(|o| o.name()).chain(["memport"]) {
            let c = self
                .entries
                .get(name)
                .ok_or_else(|| Error::MissingLibEntry(name.to_string()))?;
            let arithmetic = OpType::from_name(name).is_some_and(OpType::is_arithmetic);
            if !arithmetic && (c.lut != 0 || c.dsp != 0 || c.ff != 0) {
                return Err(Error::Invalid(format!(
                    "non-arithmetic optype `{name}` must have zero resource cost"
                )));
            }
        }
        for name in self.entries.keys() {
            if NodeType::from_name(name).is_none() || name == "supernode" {
                return Err(Error::UnknownOptype(name.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, t: NodeType) -> Result<&OpCost> {
        self.entries
            .get(t.name())
            .ok_or_else(|| Error::MissingLibEntry(t.name().to_string()))
    }

    pub fn cost(&self, op: OpType) -> &OpCost {
        self.entries.get(op.name()).expect("validated library")
    }
}

/// Executions of one body copy of loop instance `inst`: product over the
/// instance and its ancestors of tripcount / unroll.
pub fn instance_invocations(g: &Cdfg, spec: &KernelSpec, cfg: &PragmaConfig, inst: Option<usize>) -> u64 {
    let mut n = 1u64;
    let mut cur = inst;
    while let Some(i) = cur {
        let l = &g.instances[i];
        let tc = spec.find_loop(&l.loop_id).map_or(1, |x| x.tripcount);
        n *= tc / cfg.unroll(&l.loop_id).max(1);
        cur = l.parent;
    }
    n
}

/// Fill node features from the graph structure and the library. Super nodes
/// keep their timing/resource fields; only their degrees are refreshed.
pub fn annotate_features(mut g: Cdfg, spec: &KernelSpec, cfg: &PragmaConfig, lib: &OpLibrary) -> Result<Cdfg> {
    let mut inst_inv: HashMap<Option<usize>, u64> = HashMap::new();
    for n in &mut g.nodes {
        n.features.optype = n.optype;
        if n.kind() == NodeKind::SuperNode {
            continue;
        }
        let cost = lib.get(n.optype)?;
        n.features.cycles = cost.cycles as f64;
        n.features.delay_ns = cost.delay_ns;
        n.features.lut = cost.lut as f64;
        n.features.dsp = cost.dsp as f64;
        n.features.ff = cost.ff as f64;
    }
    for i in 0..g.nodes.len() {
        if g.nodes[i].kind() != NodeKind::Op {
            continue;
        }
        let inst = g.nodes[i].instance;
        let inv = *inst_inv
            .entry(inst)
            .or_insert_with(|| instance_invocations(&g, spec, cfg, inst));
        g.nodes[i].features.invocations = inv;
    }
    // A memory port serves every execution of the accesses wired to it.
    let mut port_inv: HashMap<usize, u64> = HashMap::new();
    for e in &g.edges {
        if e.kind != crate::graph::EdgeKind::Mem {
            continue;
        }
        let (port, access) = match (g.node(e.src), g.node(e.dst)) {
            (Some(a), Some(b)) if a.kind() == NodeKind::MemPort => (a.id, b),
            (Some(a), Some(b)) if b.kind() == NodeKind::MemPort => (b.id, a),
            _ => continue,
        };
        *port_inv.entry(port).or_insert(0) += access.features.invocations;
    }
    for n in &mut g.nodes {
        if n.kind() == NodeKind::MemPort {
            n.features.invocations = port_inv.get(&n.id).copied().unwrap_or(0);
        }
    }
    g.recompute_degrees();
    Ok(g)
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b.max(1))
}

/// Lower bound on the initiation interval of a pipelined inner loop:
/// `max(max ceil(delay/distance) over its dependences, max ceil(accesses/ports)
/// over its arrays)`, at least 1.
pub fn compute_ii_min(
    sub: &InnerLoopSubgraph,
    deps: &[DependenceSpec],
    spec: &KernelSpec,
    cfg: &PragmaConfig,
) -> u64 {
    let stmts: Vec<String> = spec
        .find_loop(&sub.root_loop)
        .map(|l| l.all_statements().into_iter().map(|s| s.id.clone()).collect())
        .unwrap_or_default();
    let ii_rec = deps
        .iter()
        .filter(|d| stmts.contains(&d.src) && stmts.contains(&d.dst))
        .map(|d| ceil_div(d.delay as u64, d.distance as u64))
        .max()
        .unwrap_or(0);

    let mut accesses: BTreeMap<&str, u64> = BTreeMap::new();
    for n in &sub.graph.nodes {
        if n.optype.op().is_some_and(OpType::is_memory) {
            if let Some(a) = &n.array {
                *accesses.entry(a.as_str()).or_insert(0) += 1;
            }
        }
    }
    let ii_res = accesses
        .iter()
        .filter_map(|(array, &count)| {
            let arr = spec.array(array)?;
            let (factors, _) = cfg.partition(array, arr.dims.len());
            let ports = arr.base_ports as u64 * factors.iter().product::<u64>();
            Some(ceil_div(count, ports))
        })
        .max()
        .unwrap_or(0);
    ii_rec.max(ii_res).max(1)
}

/// Per-feature standardization statistics, fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NUMERIC_FEATURES],
    pub std: [f64; NUMERIC_FEATURES],
}

pub const MIN_STD: f64 = 1e-6;

/// Numeric attributes span several orders of magnitude (invocations, super
/// node latencies), so they are compressed with `ln(1 + x)` before
/// standardization.
pub fn compress(x: f64) -> f64 {
    x.max(0.0).ln_1p()
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; NUMERIC_FEATURES],
            std: [1.0; NUMERIC_FEATURES],
        }
    }

    pub fn fit<'a>(nodes: impl IntoIterator<Item = &'a NodeFeatures>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; NUMERIC_FEATURES];
        let mut sq = [0.0; NUMERIC_FEATURES];
        for f in nodes {
            n += 1;
            for (k, v) in f.numeric().into_iter().enumerate() {
                let c = compress(v);
                sum[k] += c;
                sq[k] += c * c;
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mut mean = [0.0; NUMERIC_FEATURES];
        let mut std = [1.0; NUMERIC_FEATURES];
        for k in 0..NUMERIC_FEATURES {
            mean[k] = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0);
            std[k] = var.sqrt().max(MIN_STD);
        }
        NormStats { mean, std }
    }
}

/// One-hot optype followed by the standardized numeric attributes.
pub fn encode(f: &NodeFeatures, norm: &NormStats) -> Vec<f64> {
    let mut v = vec![0.0; ENCODED_WIDTH];
    encode_into(f, norm, &mut v);
    v
}

pub fn encode_into(f: &NodeFeatures, norm: &NormStats, out: &mut [f64]) {
    debug_assert_eq!(out.len(), ENCODED_WIDTH);
    out.iter_mut().for_each(|x| *x = 0.0);
    out[f.optype.index()] = 1.0;
    for (k, x) in f.numeric().into_iter().enumerate() {
        out[NodeType::VOCAB_SIZE + k] = (compress(x) - norm.mean[k]) / norm.std[k].max(MIN_STD);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_cdfg, extract_inner_subgraphs};
    use crate::ir::{parse_kernel, ArrayPartition, LoopPragma, PartitionKind};

    fn cfg(loops: &[(&str, bool, u64)], arrays: &[(&str, &[u64])]) -> PragmaConfig {
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

    #[test]
    fn invocations_divide_by_unroll() {
        let k = parse_kernel(
            "kernel m { array A[64]: f32; loop i in 0..64 { a = load A[i]; m = fmul a, a; } }",
        )
        .unwrap();
        let c = cfg(&[("i", false, 4)], &[]);
        let g = annotate_features(build_cdfg(&k, &c).unwrap(), &k, &c, &OpLibrary::default()).unwrap();
        for n in g.nodes.iter().filter(|n| n.optype == NodeType::Op(OpType::FMul)) {
            assert_eq!(n.features.invocations, 16);
        }
        let port = g.nodes.iter().find(|n| n.kind() == NodeKind::MemPort).unwrap();
        assert_eq!(port.features.invocations, 64);
    }

    #[test]
    fn degrees_match_edges() {
        let k = parse_kernel(
            "kernel d { array A[8]: f32;
               loop i in 0..8 { a = load A[i]; b = load A[i]; c = fadd a, b; s = store A[i], c; } }",
        )
        .unwrap();
        let c = PragmaConfig::default();
        let g = annotate_features(build_cdfg(&k, &c).unwrap(), &k, &c, &OpLibrary::default()).unwrap();
        let fadd = g.nodes.iter().find(|n| n.stmt.as_deref() == Some("c")).unwrap();
        assert_eq!(fadd.features.in_degree, 2);
        assert_eq!(fadd.features.out_degree, 1);
        let store = g.nodes.iter().find(|n| n.stmt.as_deref() == Some("s")).unwrap();
        // value, phi (address), plus mem edge out and control edge to br
        assert_eq!(store.features.in_degree, 2);
        assert_eq!(store.features.out_degree, 2);
    }

    #[test]
    fn control_nodes_have_no_resources() {
        let k = parse_kernel("kernel b { array A[8]: f32; loop i in 0..8 { a = load A[i]; x = fadd a, a; } }")
            .unwrap();
        let c = PragmaConfig::default();
        let g = annotate_features(build_cdfg(&k, &c).unwrap(), &k, &c, &OpLibrary::default()).unwrap();
        let br = g.nodes.iter().find(|n| n.optype == NodeType::Op(OpType::Br)).unwrap();
        assert_eq!((br.features.lut, br.features.dsp, br.features.ff), (0.0, 0.0, 0.0));
    }

    #[test]
    fn annotation_is_idempotent() {
        let k = parse_kernel("kernel b { array A[8]: f32; loop i in 0..8 { a = load A[i]; x = fadd a, a; } }")
            .unwrap();
        let c = cfg(&[("i", false, 2)], &[("A", &[2])]);
        let lib = OpLibrary::default();
        let once = annotate_features(build_cdfg(&k, &c).unwrap(), &k, &c, &lib).unwrap();
        let twice = annotate_features(once.clone(), &k, &c, &lib).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn library_rejects_costly_control_op() {
        let mut lib = OpLibrary::default();
        lib.entries.get_mut("br").unwrap().lut = 4;
        assert!(lib.validate().is_err());
        let mut lib = OpLibrary::default();
        lib.entries.remove("fmul");
        assert!(matches!(lib.validate(), Err(Error::MissingLibEntry(_))));
    }

    fn ii_for(src: &str, c: &PragmaConfig) -> u64 {
        let k = parse_kernel(src).unwrap();
        let g = build_cdfg(&k, c).unwrap();
        let subs = extract_inner_subgraphs(&g, &k, c).unwrap();
        compute_ii_min(&subs[0], &k.deps, &k, c)
    }

    #[test]
    fn ii_recurrence_bound() {
        let src = "kernel r { array A[8]: f32; dep a -> s delay 4 distance 1;
            loop i in 0..8 { a = load A[i]; s = store A[i], a; } }";
        assert_eq!(ii_for(src, &cfg(&[("i", true, 1)], &[])), 4);
    }

    #[test]
    fn ii_resource_bound() {
        let src = "kernel r { array A[8]: f32; array B[8]: f32;
            loop i in 0..8 { a = load A[i]; b = load A[i]; c = load A[i]; d = load A[i]; s = store B[i], a; } }";
        assert_eq!(ii_for(src, &cfg(&[("i", true, 1)], &[])), 2);
    }

    #[test]
    fn ii_mixed() {
        let src = "kernel r { array A[8]: f32; array B[8]: f32; dep a -> s delay 3 distance 2;
            loop i in 0..8 { a = load A[i]; b = load A[i]; c = load A[i]; d = load A[i]; e = load A[i]; s = store B[i], a; } }";
        assert_eq!(ii_for(src, &cfg(&[("i", true, 1)], &[])), 3);
    }

    #[test]
    fn encode_layout() {
        let mut f = NodeFeatures::new(NodeType::Op(OpType::Add));
        f.lut = 32.0;
        let norm = NormStats::identity();
        let v = encode(&f, &norm);
        assert_eq!(v.len(), 25);
        assert_eq!(v[0], 1.0);
        assert!(v[1..17].iter().all(|&x| x == 0.0));

        let fitted = NormStats::fit([&f, &f]);
        let z = encode(&f, &fitted);
        assert!(z[17..].iter().all(|&x| x == 0.0));

        let mut g = f.clone();
        g.optype = NodeType::Op(OpType::FMul);
        let (a, b) = (encode(&f, &fitted), encode(&g, &fitted));
        assert_eq!(a[17..], b[17..]);
        assert_ne!(a[..17], b[..17]);
    }
}
