//! Labeled samples for the three model stages, deterministic splits and the
//! error metric.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{encode_into, LoopFeatures, NodeFeatures, NormStats, OpLibrary, ENCODED_WIDTH};
use crate::gnn::EncodedGraph;
use crate::graph::{Cdfg, NodeKind};
use crate::ir::{enumerate_configs, KernelSpec, PragmaConfig};
use crate::oracle::{evaluate, Qor};

pub use crate::gnn::mape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "inner-p")]
    InnerP,
    #[serde(rename = "inner-np")]
    InnerNp,
    #[serde(rename = "global")]
    Global,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::InnerP, Stage::InnerNp, Stage::Global];

    pub fn file_name(self) -> &'static str {
        match self {
            Stage::InnerP => "inner_p.jsonl",
            Stage::InnerNp => "inner_np.jsonl",
            Stage::Global => "global.jsonl",
        }
    }

    pub fn model_dir(self) -> &'static str {
        match self {
            Stage::InnerP => "gnn_p",
            Stage::InnerNp => "gnn_np",
            Stage::Global => "gnn_g",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::InnerP => "inner-p",
            Stage::InnerNp => "inner-np",
            Stage::Global => "global",
        })
    }
}

/// Node features plus directed edges as index pairs into `nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub nodes: Vec<NodeFeatures>,
    pub edges: Vec<[u32; 2]>,
}

impl GraphRecord {
    pub fn from_cdfg(g: &Cdfg) -> Self {
        let index: HashMap<usize, u32> = g.nodes.iter().enumerate().map(|(i, n)| (n.id, i as u32)).collect();
        let mut edges: Vec<[u32; 2]> = g.edges.iter().map(|e| [index[&e.src], index[&e.dst]]).collect();
        edges.sort_unstable();
        edges.dedup();
        GraphRecord {
            nodes: g.nodes.iter().map(|n| n.features.clone()).collect(),
            edges,
        }
    }

    pub fn encode(&self, norm: &NormStats, loop_features: Option<&LoopFeatures>) -> EncodedGraph {
        let n = self.nodes.len();
        let mut x = vec![0.0; n * ENCODED_WIDTH];
        for (i, f) in self.nodes.iter().enumerate() {
            encode_into(f, norm, &mut x[i * ENCODED_WIDTH..(i + 1) * ENCODED_WIDTH]);
        }
        let mut g = EncodedGraph::new(n, x, self.edges.iter().map(|e| (e[0] as usize, e[1] as usize)));
        g.loop_feats = loop_features.map(|lf| EncodedGraph::loop_inputs(lf.tripcount, lf.ii, lf.pipelined));
        g
    }
}

/// Position of a super node in a global sample and the inner sample it
/// stands for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernodeRef {
    pub node: usize,
    pub inner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kernel: String,
    pub config_hash: String,
    pub stage: Stage,
    pub config: PragmaConfig,
    /// Root loop of an inner sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_loop: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Content hash of graph, loop features and labels.
    pub id: String,
    pub graph: GraphRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loop_features: Option<LoopFeatures>,
    pub labels: Qor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub il: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub supernodes: Vec<SupernodeRef>,
    pub provenance: Provenance,
}

fn content_id(graph: &GraphRecord, lf: Option<&LoopFeatures>, labels: &Qor, il: Option<u64>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(graph, lf, labels, il)).expect("sample serializes"));
    h.finalize()[..12].iter().map(|b| format!("{b:02x}")).collect()
}

impl Sample {
    pub fn kernel(&self) -> &str {
        &self.provenance.kernel
    }

    /// Label of target `t` (0 latency, 1 lut, 2 dsp, 3 ff).
    pub fn target(&self, t: usize) -> f64 {
        self.labels.targets()[t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Kernel name → sha256 of its printed source.
    pub corpus: BTreeMap<String, String>,
    pub factors: Vec<u64>,
    pub seed: u64,
    pub configs: usize,
    pub skipped: usize,
    pub duplicates: BTreeMap<Stage, usize>,
    pub counts: BTreeMap<Stage, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inner_p: Vec<Sample>,
    pub inner_np: Vec<Sample>,
    pub global: Vec<Sample>,
    pub manifest: DatasetManifest,
}

pub fn kernel_hash(spec: &KernelSpec) -> String {
    let d = Sha256::digest(spec.to_string().as_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Samples of one design point: inner samples in extraction order, then the
/// global sample.
pub fn samples_for(spec: &KernelSpec, cfg: &PragmaConfig, lib: &OpLibrary) -> Result<(Vec<Sample>, Sample)> {
    let ev = evaluate(spec, cfg, lib)?;
    let config = cfg.normalized(spec);
    let config_hash = config.hash_hex();
    let mut inner = Vec::with_capacity(ev.inner.len());
    let mut refs = Vec::with_capacity(ev.inner.len());
    let index: HashMap<usize, usize> = ev.condensed.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    for (sub, label) in &ev.inner {
        let graph = GraphRecord::from_cdfg(&sub.graph);
        let stage = if sub.pipelined() { Stage::InnerP } else { Stage::InnerNp };
        let id = content_id(&graph, Some(&sub.loop_features), &label.qor, Some(label.il));
        let node = ev
            .condensed
            .nodes
            .iter()
            .find(|n| n.kind() == NodeKind::SuperNode && n.represents == Some(sub.instance))
            .map(|n| index[&n.id])
            .ok_or_else(|| Error::Internal("super node missing after condensation".into()))?;
        refs.push(SupernodeRef { node, inner: id.clone() });
        inner.push(Sample {
            id,
            graph,
            loop_features: Some(sub.loop_features.clone()),
            labels: label.qor,
            il: Some(label.il),
            supernodes: Vec::new(),
            provenance: Provenance {
                kernel: spec.name.clone(),
                config_hash: config_hash.clone(),
                stage,
                config: config.clone(),
                root_loop: Some(sub.root_loop.clone()),
            },
        });
    }
    let graph = GraphRecord::from_cdfg(&ev.condensed);
    let mut id_src = serde_json::to_vec(&refs).expect("refs serialize");
    id_src.extend(content_id(&graph, None, &ev.qor, None).into_bytes());
    let id = Sha256::digest(&id_src)[..12].iter().map(|b| format!("{b:02x}")).collect();
    let global = Sample {
        id,
        graph,
        loop_features: None,
        labels: ev.qor,
        il: None,
        supernodes: refs,
        provenance: Provenance {
            kernel: spec.name.clone(),
            config_hash,
            stage: Stage::Global,
            config,
            root_loop: None,
        },
    };
    Ok((inner, global))
}

/// Enumerate every design point of every kernel and label it with the
/// oracle. Identical samples are kept once; failing configs are skipped and
/// counted.
pub fn generate(corpus: &[KernelSpec], factors: &[u64], lib: &OpLibrary, seed: u64) -> Result<Dataset> {
    let mut names = HashSet::new();
    for k in corpus {
        if !names.insert(k.name.as_str()) {
            return Err(Error::Invalid(format!("kernel `{}` appears twice in the corpus", k.name)));
        }
    }
    let jobs: Vec<(&KernelSpec, PragmaConfig)> = corpus
        .iter()
        .flat_map(|k| enumerate_configs(k, factors).into_iter().map(move |c| (k, c)))
        .collect();
    let results: Vec<Result<(Vec<Sample>, Sample)>> = jobs.par_iter().map(|(k, c)| samples_for(k, c, lib)).collect();

    let mut ds = Dataset {
        inner_p: Vec::new(),
        inner_np: Vec::new(),
        global: Vec::new(),
        manifest: DatasetManifest {
            version: 1,
            corpus: corpus.iter().map(|k| (k.name.clone(), kernel_hash(k))).collect(),
            factors: factors.to_vec(),
            seed,
            configs: jobs.len(),
            skipped: 0,
            duplicates: BTreeMap::new(),
            counts: BTreeMap::new(),
        },
    };
    let mut seen: HashSet<String> = HashSet::new();
    for (r, (k, c)) in results.into_iter().zip(&jobs) {
        let (inner, global) = match r {
            Ok(x) => x,
            Err(e) => {
                log::warn!("skipping {} {}: {e}", k.name, c.hash_hex());
                ds.manifest.skipped += 1;
                continue;
            }
        };
        for s in inner.into_iter().chain([global]) {
            let stage = s.provenance.stage;
            if !seen.insert(s.id.clone()) {
                *ds.manifest.duplicates.entry(stage).or_insert(0) += 1;
                continue;
            }
            ds.stage_mut(stage).push(s);
        }
    }
    for st in Stage::ALL {
        let n = ds.stage(st).len();
        ds.manifest.counts.insert(st, n);
    }
    Ok(ds)
}

impl Dataset {
    pub fn stage(&self, s: Stage) -> &[Sample] {
        match s {
            Stage::InnerP => &self.inner_p,
            Stage::InnerNp => &self.inner_np,
            Stage::Global => &self.global,
        }
    }

    fn stage_mut(&mut self, s: Stage) -> &mut Vec<Sample> {
        match s {
            Stage::InnerP => &mut self.inner_p,
            Stage::InnerNp => &mut self.inner_np,
            Stage::Global => &mut self.global,
        }
    }

    /// Inner sample by content id.
    pub fn inner_by_id(&self) -> HashMap<&str, &Sample> {
        self.inner_p
            .iter()
            .chain(&self.inner_np)
            .map(|s| (s.id.as_str(), s))
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for st in Stage::ALL {
            let mut w = BufWriter::new(std::fs::File::create(dir.join(st.file_name()))?);
            for s in self.stage(st) {
                serde_json::to_writer(&mut w, s)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut ds = Dataset {
            inner_p: Vec::new(),
            inner_np: Vec::new(),
            global: Vec::new(),
            manifest,
        };
        for st in Stage::ALL {
            let f = std::io::BufReader::new(std::fs::File::open(dir.join(st.file_name()))?);
            for line in f.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: Sample = serde_json::from_str(&line)?;
                if s.provenance.stage != st {
                    return Err(Error::Invalid(format!(
                        "sample {} tagged {} found in {}",
                        s.id,
                        s.provenance.stage,
                        st.file_name()
                    )));
                }
                ds.stage_mut(st).push(s);
            }
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Plain random split over samples (held-out configurations).
    Random,
    /// Whole kernels assigned to folds (held-out kernels).
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_SPLIT: usize = 10;

/// 80/10/10 split of `kernels.len()` samples, where `kernels[i]` names the
/// kernel of sample `i`.
pub fn split(kernels: &[&str], mode: SplitMode, seed: u64) -> Result<Split> {
    let n = kernels.len();
    if n < MIN_SPLIT {
        return Err(Error::DatasetTooSmall { got: n, need: MIN_SPLIT });
    }
    let tenth = (n as f64 / 10.0).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    match mode {
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            s.test = idx[..tenth].to_vec();
            s.val = idx[tenth..2 * tenth].to_vec();
            s.train = idx[2 * tenth..].to_vec();
        }
        SplitMode::Kernel => {
            let mut names: Vec<&str> = kernels.to_vec();
            names.sort_unstable();
            names.dedup();
            if names.len() < 3 {
                return Err(Error::Invalid("kernel-stratified split needs at least 3 kernels".into()));
            }
            names.shuffle(&mut rng);
            let mut by_kernel: HashMap<&str, Vec<usize>> = HashMap::new();
            for (i, k) in kernels.iter().enumerate() {
                by_kernel.entry(k).or_default().push(i);
            }
            // The last two kernels are reserved so no fold ends up empty.
            let mut it = names.iter();
            let (mut test, mut val) = (Vec::new(), Vec::new());
            let mut left = names.len();
            for k in it.by_ref() {
                test.extend(&by_kernel[k]);
                left -= 1;
                if test.len() >= tenth || left <= 2 {
                    break;
                }
            }
            for k in it.by_ref() {
                val.extend(&by_kernel[k]);
                left -= 1;
                if val.len() >= tenth || left <= 1 {
                    break;
                }
            }
            let train: Vec<usize> = it.flat_map(|k| by_kernel[k].iter().copied()).collect();
            s = Split { train, val, test };
            s.train.sort_unstable();
            s.val.sort_unstable();
            s.test.sort_unstable();
        }
    }
    Ok(s)
}

/// Per-target MAPE over `[latency, lut, dsp, ff]`.
pub fn mape_targets(preds: &[[f64; 4]], labels: &[[f64; 4]]) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (t, o) in out.iter_mut().enumerate() {
        let p: Vec<f64> = preds.iter().map(|x| x[t]).collect();
        let l: Vec<f64> = labels.iter().map(|x| x[t]).collect();
        *o = mape(&p, &l)?;
    }
    Ok(out)
}
