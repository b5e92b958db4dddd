//! Exhaustive design-space exploration: predicted and exact Pareto frontiers
//! and their ADRS distance.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::OpLibrary;
use crate::hierarchy::{predict_many, ModelBundle};
use crate::ir::{enumerate_configs, KernelSpec, PragmaConfig};
use crate::oracle::{kernel_qor, QorEstimate};

/// Weight of one DSP in the scalar resource objective.
pub const DSP_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Objectives {
    /// (latency, lut + 100·dsp + ff)
    #[default]
    #[serde(rename = "2d")]
    Weighted2D,
    /// (latency, lut, dsp, ff)
    #[serde(rename = "4d")]
    Full4D,
}

impl std::str::FromStr for Objectives {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(Objectives::Weighted2D),
            "4d" => Ok(Objectives::Full4D),
            _ => Err(Error::Invalid(format!("unknown objective space `{s}` (2d or 4d)"))),
        }
    }
}

impl Objectives {
    pub fn of(self, q: &QorEstimate) -> Vec<f64> {
        match self {
            Objectives::Weighted2D => vec![q.latency_cycles, q.lut + DSP_WEIGHT * q.dsp + q.ff],
            Objectives::Full4D => q.targets().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub config_hash: String,
    pub config: PragmaConfig,
    pub predicted: QorEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<QorEstimate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoSet {
    pub role: Role,
    /// Config hashes of the frontier, in ascending hash order.
    pub configs: Vec<String>,
    pub objectives: Vec<Vec<f64>>,
}

/// `a` dominates `b`: no worse everywhere, strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Indices of the non-dominated points, ordered by key. Of several points
/// with equal objectives only the one with the smallest key is kept.
pub fn pareto_filter(keys: &[String], objs: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..objs.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
    let mut front: Vec<usize> = Vec::new();
    for &i in &order {
        let beaten = order.iter().any(|&j| dominates(&objs[j], &objs[i]));
        if !beaten && !front.iter().any(|&f| objs[f] == objs[i]) {
            front.push(i);
        }
    }
    front
}

pub fn frontier(role: Role, points: &[(String, Vec<f64>)]) -> ParetoSet {
    let keys: Vec<String> = points.iter().map(|p| p.0.clone()).collect();
    let objs: Vec<Vec<f64>> = points.iter().map(|p| p.1.clone()).collect();
    let idx = pareto_filter(&keys, &objs);
    ParetoSet {
        role,
        configs: idx.iter().map(|&i| keys[i].clone()).collect(),
        objectives: idx.iter().map(|&i| objs[i].clone()).collect(),
    }
}

/// Worst relative shortfall of `omega` against `gamma` over all dimensions.
pub fn shortfall(gamma: &[f64], omega: &[f64]) -> f64 {
    gamma
        .iter()
        .zip(omega)
        .map(|(g, o)| ((o - g) / g.abs().max(1.0)).max(0.0))
        .fold(0.0, f64::max)
}

/// Mean over `gamma` of the distance to the closest point of `omega`.
pub fn adrs(gamma: &[Vec<f64>], omega: &[Vec<f64>]) -> Result<f64> {
    if gamma.is_empty() || omega.is_empty() {
        return Err(Error::EmptyDesignSpace);
    }
    let total: f64 = gamma
        .iter()
        .map(|g| omega.iter().map(|o| shortfall(g, o)).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / gamma.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub model_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseReport {
    pub kernel: String,
    pub factors: Vec<u64>,
    pub objectives: Objectives,
    pub points: Vec<DesignPoint>,
    pub predicted_front: ParetoSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_front: Option<ParetoSet>,
    /// ADRS of the predicted frontier's oracle QoR against the exact one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adrs: Option<f64>,
    /// Wall-clock times; excluded from byte comparisons.
    #[serde(skip)]
    pub timings: Option<Timings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseOptions {
    pub factors: Vec<u64>,
    pub objectives: Objectives,
    pub exact: bool,
}

/// Oracle QoR of every config, in input order.
pub fn oracle_pass(spec: &KernelSpec, cfgs: &[PragmaConfig], lib: &OpLibrary) -> Result<Vec<QorEstimate>> {
    cfgs.par_iter().map(|c| kernel_qor(spec, c, lib).map(QorEstimate::from)).collect()
}

/// Model QoR of every config, in input order.
pub fn model_pass(spec: &KernelSpec, cfgs: &[PragmaConfig], bundle: &ModelBundle, lib: &OpLibrary) -> Result<Vec<QorEstimate>> {
    let chunk = cfgs.len().div_ceil(rayon::current_num_threads() * 4).max(1);
    let parts: Vec<Vec<QorEstimate>> = cfgs
        .par_chunks(chunk)
        .map(|c| predict_many(spec, c, bundle, lib))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Frontiers and ADRS from per-config predicted and (optional) oracle QoR.
pub fn assemble(
    spec: &KernelSpec,
    cfgs: Vec<PragmaConfig>,
    predicted: Vec<QorEstimate>,
    actual: Option<Vec<QorEstimate>>,
    opts: &DseOptions,
) -> Result<DseReport> {
    if cfgs.is_empty() {
        return Err(Error::EmptyDesignSpace);
    }
    let points: Vec<DesignPoint> = cfgs
        .into_iter()
        .enumerate()
        .map(|(i, config)| DesignPoint {
            config_hash: config.hash_hex(),
            config,
            predicted: predicted[i],
            actual: actual.as_ref().map(|a| a[i]),
        })
        .collect();
    let obj = opts.objectives;
    let pred: Vec<(String, Vec<f64>)> = points.iter().map(|p| (p.config_hash.clone(), obj.of(&p.predicted))).collect();
    let predicted_front = frontier(Role::Approximate, &pred);
    let (exact_front, adrs_v) = if actual.is_some() {
        let act: Vec<(String, Vec<f64>)> = points
            .iter()
            .map(|p| (p.config_hash.clone(), obj.of(p.actual.as_ref().expect("actual present"))))
            .collect();
        let gamma = frontier(Role::Exact, &act);
        // Ω is scored by what its configs really achieve.
        let by_hash: std::collections::HashMap<&str, &Vec<f64>> = act.iter().map(|(h, o)| (h.as_str(), o)).collect();
        let omega: Vec<Vec<f64>> = predicted_front.configs.iter().map(|h| by_hash[h.as_str()].clone()).collect();
        let a = adrs(&gamma.objectives, &omega)?;
        (Some(gamma), Some(a))
    } else {
        (None, None)
    };
    Ok(DseReport {
        kernel: spec.name.clone(),
        factors: opts.factors.clone(),
        objectives: obj,
        points,
        predicted_front,
        exact_front,
        adrs: adrs_v,
        timings: None,
    })
}

pub fn explore(spec: &KernelSpec, bundle: &ModelBundle, lib: &OpLibrary, opts: &DseOptions) -> Result<DseReport> {
    let cfgs = enumerate_configs(spec, &opts.factors);
    if cfgs.is_empty() {
        return Err(Error::EmptyDesignSpace);
    }
    let t = Instant::now();
    let predicted = model_pass(spec, &cfgs, bundle, lib)?;
    let model_seconds = t.elapsed().as_secs_f64();
    let (actual, oracle_seconds) = if opts.exact {
        let t = Instant::now();
        let a = oracle_pass(spec, &cfgs, lib)?;
        (Some(a), Some(t.elapsed().as_secs_f64()))
    } else {
        (None, None)
    };
    let mut rep = assemble(spec, cfgs, predicted, actual, opts)?;
    rep.timings = Some(Timings { model_seconds, oracle_seconds });
    log::info!("{}: model pass {model_seconds:.3}s, oracle pass {oracle_seconds:?}", spec.name);
    Ok(rep)
}

impl DseReport {
    /// Point cloud as CSV: one row per config.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let front: std::collections::HashSet<&str> = self.predicted_front.configs.iter().map(String::as_str).collect();
        let exact: std::collections::HashSet<&str> = self
            .exact_front
            .iter()
            .flat_map(|f| f.configs.iter().map(String::as_str))
            .collect();
        out.write_record([
            "config_hash", "pred_latency", "pred_lut", "pred_dsp", "pred_ff", "latency", "lut", "dsp", "ff", "in_omega",
            "in_gamma",
        ])
        .map_err(csv_err)?;
        for p in &self.points {
            let mut row = vec![p.config_hash.clone()];
            row.extend(p.predicted.targets().iter().map(|v| format!("{v}")));
            match &p.actual {
                Some(a) => row.extend(a.targets().iter().map(|v| format!("{v}"))),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
            row.push(front.contains(p.config_hash.as_str()).to_string());
            row.push(exact.contains(p.config_hash.as_str()).to_string());
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Internal(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("k{i}")).collect()
    }

    #[test]
    fn frontier_examples() {
        let o = vec![vec![10.0, 100.0], vec![20.0, 50.0], vec![15.0, 120.0]];
        assert_eq!(pareto_filter(&keys(3), &o), vec![0, 1]);
        let same = vec![vec![3.0, 3.0]; 4];
        assert_eq!(pareto_filter(&keys(4), &same).len(), 1);
        assert_eq!(pareto_filter(&keys(1), &[vec![1.0, 2.0]]), vec![0]);
    }

    #[test]
    fn frontier_order_follows_hash() {
        let k = vec!["b".to_string(), "a".to_string()];
        let o = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert_eq!(pareto_filter(&k, &o), vec![1, 0]);
    }

    #[test]
    fn adrs_examples() {
        let g = vec![vec![10.0, 100.0]];
        assert_eq!(adrs(&g, &g).unwrap(), 0.0);
        let a = adrs(&g, &[vec![11.0, 100.0]]).unwrap();
        assert!((a - 0.1).abs() < 1e-12);
        assert!(adrs(&[], &g).is_err());
        assert!(adrs(&g, &[]).is_err());
    }

    #[test]
    fn objective_spaces() {
        let q = QorEstimate::from_targets([5.0, 10.0, 2.0, 7.0]);
        assert_eq!(Objectives::Weighted2D.of(&q), vec![5.0, 217.0]);
        assert_eq!(Objectives::Full4D.of(&q), vec![5.0, 10.0, 2.0, 7.0]);
        assert_eq!(serde_json::to_string(&Objectives::Full4D).unwrap(), "\"4d\"");
    }
}
