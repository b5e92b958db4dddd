//! Staged training and inference: inner-loop models (pipelined and
//! non-pipelined) are trained first and frozen; their predictions label the
//! super nodes of the condensed graphs the global model learns from.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{mape, split, GraphRecord, Sample, Split, SplitMode, Stage};
use crate::error::{Error, Result};
use crate::features::{annotate_features, NodeFeatures, NormStats, OpLibrary};
use crate::gnn::checkpoint;
use crate::gnn::train::predict_graphs;
use crate::gnn::{train, EncodedGraph, Example, Model, TrainConfig};
use crate::graph::{build_cdfg, condense_supernode, extract_inner_subgraphs, Cdfg};
use crate::ir::{KernelSpec, PragmaConfig};
use crate::oracle::QorEstimate;
use crate::dataset::Dataset;

pub const TARGETS: [&str; 4] = ["latency", "lut", "dsp", "ff"];
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupernodeLabels {
    /// Oracle QoR of the inner loops (teacher forcing).
    Oracle,
    /// Frozen stage-1 predictions.
    Predicted,
}

impl std::str::FromStr for SupernodeLabels {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(SupernodeLabels::Oracle),
            "predicted" => Ok(SupernodeLabels::Predicted),
            _ => Err(Error::Invalid(format!("unknown supernode label source `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierConfig {
    pub train: TrainConfig,
    pub supernode_labels: SupernodeLabels,
    pub split_mode: SplitMode,
    /// Abort when an inner stage's validation MAPE (any target) exceeds this.
    pub abort_mape: Option<f64>,
}

impl Default for HierConfig {
    fn default() -> Self {
        HierConfig {
            train: TrainConfig::default(),
            supernode_labels: SupernodeLabels::Predicted,
            split_mode: SplitMode::Random,
            abort_mape: None,
        }
    }
}

/// Four single-target models of one stage and the normalization they share.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModels {
    pub models: Vec<Model>,
    pub norm: NormStats,
}

impl StageModels {
    /// Predicted QoR of each graph; for inner stages the latency model also
    /// returns the iteration latency through its primary head.
    pub fn predict(&self, graphs: &[EncodedGraph]) -> Result<Vec<QorEstimate>> {
        let mut cols = Vec::with_capacity(4);
        for m in &self.models {
            cols.push(predict_graphs(m, graphs)?);
        }
        Ok((0..graphs.len())
            .map(|i| QorEstimate::from_targets([cols[0][i], cols[1][i], cols[2][i], cols[3][i]]))
            .collect())
    }

    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.models {
            for p in &m.params {
                h.update(p.to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub seed: u64,
    pub config: HierConfig,
    /// Stage directory name → number of training samples (0 when absent).
    pub stages: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub gnn_p: Option<StageModels>,
    pub gnn_np: Option<StageModels>,
    pub gnn_g: StageModels,
    pub manifest: BundleManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub val_mape: [f64; 4],
    pub test_mape: [f64; 4],
    /// Wall-clock training time, not serialized so reports stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierReport {
    pub stages: Vec<StageReport>,
    /// Global split used for stage 2, kept for later evaluation.
    pub global_split: Split,
}

fn model_seed(seed: u64, stage: Stage, target: usize) -> u64 {
    let s = Stage::ALL.iter().position(|&x| x == stage).expect("known stage") as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s * 4 + target as u64)
}

fn inner_example(g: EncodedGraph, s: &Sample, t: usize) -> Example {
    Example {
        graph: g,
        label: s.target(t),
        il_label: (t == 0).then(|| s.il.unwrap_or(0) as f64),
    }
}

fn encode_all(graphs: &[GraphRecord], samples: &[Sample], norm: &NormStats) -> Vec<EncodedGraph> {
    graphs
        .iter()
        .zip(samples)
        .map(|(g, s)| g.encode(norm, s.loop_features.as_ref()))
        .collect()
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

fn train_stage(
    stage: Stage,
    samples: &[Sample],
    graphs: &[GraphRecord],
    cfg: &HierConfig,
) -> Result<(StageModels, StageReport, Split)> {
    let start = Instant::now();
    let kernels: Vec<&str> = samples.iter().map(Sample::kernel).collect();
    let sp = split(&kernels, cfg.split_mode, cfg.train.seed)?;
    let norm = NormStats::fit(sp.train.iter().flat_map(|&i| graphs[i].nodes.iter()));
    let enc = encode_all(graphs, samples, &norm);
    let inner = stage != Stage::Global;
    let mut models = Vec::with_capacity(4);
    let (mut val_mape, mut test_mape) = ([f64::NAN; 4], [f64::NAN; 4]);
    for t in 0..4 {
        let ex = |idx: &[usize]| -> Vec<Example> {
            idx.iter()
                .map(|&i| {
                    if inner {
                        inner_example(enc[i].clone(), &samples[i], t)
                    } else {
                        Example { graph: enc[i].clone(), label: samples[i].target(t), il_label: None }
                    }
                })
                .collect()
        };
        let (tr, va, te) = (ex(&sp.train), ex(&sp.val), ex(&sp.test));
        let tc = TrainConfig { seed: model_seed(cfg.train.seed, stage, t), ..cfg.train.clone() };
        let (m, rep) = train(&tr, &va, &tc)?;
        let labels = |e: &[Example]| e.iter().map(|x| x.label).collect::<Vec<f64>>();
        val_mape[t] = rep.best_val_mape;
        test_mape[t] = mape(&predict_graphs(&m, te.iter().map(|e| &e.graph))?, &labels(&te))?;
        log::info!(
            "{stage} {}: best epoch {}, val MAPE {:.2}%, test MAPE {:.2}%",
            TARGETS[t],
            rep.best_epoch,
            val_mape[t],
            test_mape[t]
        );
        models.push(m);
    }
    if let (true, Some(th)) = (inner, cfg.abort_mape) {
        if let Some(worst) = val_mape.iter().copied().filter(|x| x.is_finite()).reduce(f64::max) {
            if worst > th {
                return Err(Error::StageAbort { stage: stage.to_string(), mape: worst, threshold: th });
            }
        }
    }
    let report = StageReport {
        stage,
        samples: samples.len(),
        train: sp.train.len(),
        val: sp.val.len(),
        test: sp.test.len(),
        val_mape,
        test_mape,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((StageModels { models, norm }, report, sp))
}

/// Super node features carrying a loop's QoR.
pub fn supernode_features(base: &NodeFeatures, q: &QorEstimate) -> NodeFeatures {
    let mut f = base.clone();
    f.cycles = q.latency_cycles;
    f.lut = q.lut;
    f.dsp = q.dsp;
    f.ff = q.ff;
    f
}

/// Stage-1 predictions for every inner sample, keyed by sample id.
pub fn predict_inner(
    ds: &Dataset,
    gnn_p: Option<&StageModels>,
    gnn_np: Option<&StageModels>,
) -> Result<HashMap<String, QorEstimate>> {
    let mut out = HashMap::new();
    for (stage, models) in [(Stage::InnerP, gnn_p), (Stage::InnerNp, gnn_np)] {
        let samples = ds.stage(stage);
        if samples.is_empty() {
            continue;
        }
        let m = models.ok_or_else(|| Error::Bundle(format!("no model for {stage} samples")))?;
        let enc: Vec<EncodedGraph> = samples
            .iter()
            .map(|s| s.graph.encode(&m.norm, s.loop_features.as_ref()))
            .collect();
        for (s, q) in samples.iter().zip(m.predict(&enc)?) {
            out.insert(s.id.clone(), q);
        }
    }
    Ok(out)
}

/// Global graphs with super node features taken from `labels`.
pub fn global_graphs(ds: &Dataset, labels: SupernodeLabels, predicted: &HashMap<String, QorEstimate>) -> Result<Vec<GraphRecord>> {
    let inner = ds.inner_by_id();
    ds.global
        .iter()
        .map(|s| {
            let mut g = s.graph.clone();
            for r in &s.supernodes {
                let q = match labels {
                    SupernodeLabels::Oracle => inner
                        .get(r.inner.as_str())
                        .map(|x| QorEstimate::from(x.labels))
                        .ok_or_else(|| Error::Invalid(format!("global sample {} references unknown inner {}", s.id, r.inner)))?,
                    SupernodeLabels::Predicted => *predicted
                        .get(&r.inner)
                        .ok_or_else(|| Error::Invalid(format!("no prediction for inner sample {}", r.inner)))?,
                };
                g.nodes[r.node] = supernode_features(&g.nodes[r.node], &q);
            }
            Ok(g)
        })
        .collect()
}

/// Train the three stages in order; stage-1 models are frozen before the
/// global model sees their predictions.
pub fn train_hierarchical(ds: &Dataset, cfg: &HierConfig) -> Result<(ModelBundle, HierReport)> {
    let mut reports = Vec::new();
    let mut inner_models: [Option<StageModels>; 2] = [None, None];
    for (slot, stage) in [Stage::InnerP, Stage::InnerNp].into_iter().enumerate() {
        let samples = ds.stage(stage);
        if samples.is_empty() {
            log::warn!("{stage} dataset is empty; stage skipped");
            continue;
        }
        let graphs: Vec<GraphRecord> = samples.iter().map(|s| s.graph.clone()).collect();
        let (m, r, _) = train_stage(stage, samples, &graphs, cfg)?;
        inner_models[slot] = Some(m);
        reports.push(r);
    }
    let [gnn_p, gnn_np] = inner_models;
    if ds.global.is_empty() {
        return Err(Error::EmptyDataset("global".into()));
    }
    let predicted = match cfg.supernode_labels {
        SupernodeLabels::Predicted => predict_inner(ds, gnn_p.as_ref(), gnn_np.as_ref())?,
        SupernodeLabels::Oracle => HashMap::new(),
    };
    let graphs = global_graphs(ds, cfg.supernode_labels, &predicted)?;
    let (gnn_g, r, global_split) = train_stage(Stage::Global, &ds.global, &graphs, cfg)?;
    reports.push(r);
    let mut stages = BTreeMap::new();
    for st in Stage::ALL {
        let n = reports.iter().find(|r| r.stage == st).map_or(0, |r| r.train);
        stages.insert(st.model_dir().to_string(), n);
    }
    let bundle = ModelBundle {
        gnn_p,
        gnn_np,
        gnn_g,
        manifest: BundleManifest {
            version: BUNDLE_VERSION,
            seed: cfg.train.seed,
            config: cfg.clone(),
            stages,
        },
    };
    Ok((bundle, HierReport { stages: reports, global_split }))
}

/// Predicted QoR of several design points of one kernel.
pub fn predict_many(spec: &KernelSpec, cfgs: &[PragmaConfig], bundle: &ModelBundle, lib: &OpLibrary) -> Result<Vec<QorEstimate>> {
    struct Pending {
        graph: Cdfg,
        subs: Vec<crate::graph::InnerLoopSubgraph>,
    }
    let mut pending = Vec::with_capacity(cfgs.len());
    let mut inner_enc: [Vec<EncodedGraph>; 2] = [Vec::new(), Vec::new()];
    let mut routes: Vec<Vec<(usize, usize)>> = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let graph = annotate_features(build_cdfg(spec, cfg)?, spec, cfg, lib)?;
        let subs = extract_inner_subgraphs(&graph, spec, cfg)?;
        let mut r = Vec::with_capacity(subs.len());
        for s in &subs {
            let slot = if s.pipelined() { 0 } else { 1 };
            let m = [&bundle.gnn_p, &bundle.gnn_np][slot]
                .as_ref()
                .ok_or_else(|| Error::Bundle(format!("bundle has no {} model", ["gnn_p", "gnn_np"][slot])))?;
            let rec = GraphRecord::from_cdfg(&s.graph);
            inner_enc[slot].push(rec.encode(&m.norm, Some(&s.loop_features)));
            r.push((slot, inner_enc[slot].len() - 1));
        }
        routes.push(r);
        pending.push(Pending { graph, subs });
    }
    let mut inner_pred: [Vec<QorEstimate>; 2] = [Vec::new(), Vec::new()];
    for slot in 0..2 {
        if !inner_enc[slot].is_empty() {
            let m = [&bundle.gnn_p, &bundle.gnn_np][slot].as_ref().expect("checked above");
            inner_pred[slot] = m.predict(&inner_enc[slot])?;
        }
    }
    let mut global_enc = Vec::with_capacity(cfgs.len());
    for (p, r) in pending.iter().zip(&routes) {
        let mut g = p.graph.clone();
        for (s, &(slot, i)) in p.subs.iter().zip(r) {
            g = condense_supernode(&g, s, &inner_pred[slot][i])?;
        }
        global_enc.push(GraphRecord::from_cdfg(&g).encode(&bundle.gnn_g.norm, None));
    }
    bundle.gnn_g.predict(&global_enc)
}

pub fn predict_hierarchical(spec: &KernelSpec, cfg: &PragmaConfig, bundle: &ModelBundle, lib: &OpLibrary) -> Result<QorEstimate> {
    Ok(predict_many(spec, std::slice::from_ref(cfg), bundle, lib)?[0])
}

impl ModelBundle {
    pub fn stage(&self, s: Stage) -> Option<&StageModels> {
        match s {
            Stage::InnerP => self.gnn_p.as_ref(),
            Stage::InnerNp => self.gnn_np.as_ref(),
            Stage::Global => Some(&self.gnn_g),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut norms = BTreeMap::new();
        for st in Stage::ALL {
            let Some(m) = self.stage(st) else { continue };
            let sub = dir.join(st.model_dir());
            std::fs::create_dir_all(&sub)?;
            for (t, model) in m.models.iter().enumerate() {
                let tag = format!("{}/{}", st.model_dir(), TARGETS[t]);
                checkpoint::save(&sub.join(format!("{}.bin", TARGETS[t])), model, &tag, Some(&m.norm))?;
            }
            norms.insert(st.model_dir(), m.norm.clone());
        }
        std::fs::write(dir.join("norm.json"), serde_json::to_string_pretty(&norms)? + "\n")?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = serde_json::from_str(
            &std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| Error::Bundle(format!("{}: {e}", dir.display())))?,
        )?;
        if manifest.version != BUNDLE_VERSION {
            return Err(Error::Bundle(format!("unsupported bundle version {}", manifest.version)));
        }
        let norms: BTreeMap<String, NormStats> = serde_json::from_str(&std::fs::read_to_string(dir.join("norm.json"))?)?;
        let mut stages: Vec<Option<StageModels>> = Vec::new();
        for st in Stage::ALL {
            let Some(norm) = norms.get(st.model_dir()) else {
                stages.push(None);
                continue;
            };
            let mut models = Vec::new();
            for t in TARGETS {
                let (m, h) = checkpoint::load(&dir.join(st.model_dir()).join(format!("{t}.bin")))?;
                let want = format!("{}/{t}", st.model_dir());
                if h.tag != want {
                    return Err(Error::Bundle(format!("checkpoint tagged `{}` where `{want}` expected", h.tag)));
                }
                models.push(m);
            }
            stages.push(Some(StageModels { models, norm: norm.clone() }));
        }
        let gnn_g = stages.pop().flatten().ok_or_else(|| Error::Bundle("bundle lacks gnn_g".into()))?;
        let gnn_np = stages.pop().flatten();
        let gnn_p = stages.pop().flatten();
        Ok(ModelBundle { gnn_p, gnn_np, gnn_g, manifest })
    }
}

/// Latency MAPE of the hierarchical pipeline and of a single flat model on
/// the full (uncondensed) graphs, over nested-loop kernels only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub train_samples: usize,
    pub test_samples: usize,
    pub hierarchical_mape: f64,
    pub flat_mape: f64,
}

/// Full annotated graph of a global sample, rebuilt from its provenance.
pub fn flat_graph(spec: &KernelSpec, s: &Sample, lib: &OpLibrary) -> Result<GraphRecord> {
    let cfg = &s.provenance.config;
    Ok(GraphRecord::from_cdfg(&annotate_features(build_cdfg(spec, cfg)?, spec, cfg, lib)?))
}

pub fn ablation(
    ds: &Dataset,
    corpus: &[KernelSpec],
    bundle: &ModelBundle,
    global_split: &Split,
    cfg: &HierConfig,
    lib: &OpLibrary,
) -> Result<AblationReport> {
    let specs: HashMap<&str, &KernelSpec> = corpus.iter().map(|k| (k.name.as_str(), k)).collect();
    let nested = |i: &usize| specs.get(ds.global[*i].kernel()).is_some_and(|k| k.max_depth() >= 2);
    let train_idx: Vec<usize> = global_split.train.iter().copied().filter(nested).collect();
    let val_idx: Vec<usize> = global_split.val.iter().copied().filter(nested).collect();
    let test_idx: Vec<usize> = global_split.test.iter().copied().filter(nested).collect();
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::EmptyDataset("no nested-loop samples for the ablation".into()));
    }
    let labels: Vec<f64> = test_idx.iter().map(|&i| ds.global[i].target(0)).collect();

    let predicted = match cfg.supernode_labels {
        SupernodeLabels::Predicted => predict_inner(ds, bundle.gnn_p.as_ref(), bundle.gnn_np.as_ref())?,
        SupernodeLabels::Oracle => HashMap::new(),
    };
    let graphs = global_graphs(ds, cfg.supernode_labels, &predicted)?;
    let enc: Vec<EncodedGraph> = test_idx.iter().map(|&i| graphs[i].encode(&bundle.gnn_g.norm, None)).collect();
    let hier = predict_graphs(&bundle.gnn_g.models[0], &enc)?;

    let flat = |idx: &[usize]| -> Result<Vec<GraphRecord>> {
        idx.iter()
            .map(|&i| {
                let s = &ds.global[i];
                let spec = specs
                    .get(s.kernel())
                    .ok_or_else(|| Error::Invalid(format!("kernel `{}` not in corpus", s.kernel())))?;
                flat_graph(spec, s, lib)
            })
            .collect()
    };
    let (ftr, fva, fte) = (flat(&train_idx)?, flat(&val_idx)?, flat(&test_idx)?);
    let norm = NormStats::fit(ftr.iter().flat_map(|g| g.nodes.iter()));
    let ex = |gs: &[GraphRecord], idx: &[usize]| -> Vec<Example> {
        gs.iter()
            .zip(idx)
            .map(|(g, &i)| Example { graph: g.encode(&norm, None), label: ds.global[i].target(0), il_label: None })
            .collect()
    };
    let tc = TrainConfig { seed: model_seed(cfg.train.seed, Stage::Global, 0) ^ 0xF1A7, ..cfg.train.clone() };
    let (m, _) = train(&ex(&ftr, &train_idx), &ex(&fva, &val_idx), &tc)?;
    let flat_pred = predict_graphs(&m, ex(&fte, &test_idx).iter().map(|e| &e.graph))?;
    Ok(AblationReport {
        train_samples: train_idx.len(),
        test_samples: test_idx.len(),
        hierarchical_mape: mape(&hier, &labels)?,
        flat_mape: mape(&flat_pred, &labels)?,
    })
}

pub fn pick_samples(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    pick(samples, idx)
}
