//! Message-passing network with a hand-written reverse pass.
//!
//! Encoder, three propagation layers, sum+max readout and an MLP head that
//! predicts `ln(1 + target)`. Models of inner loops can carry a second MLP
//! that maps the predicted iteration latency plus loop-level features to the
//! loop latency.

pub mod checkpoint;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ENCODED_WIDTH;

pub use train::{mape, train, EpochStats, Example, TrainConfig, TrainReport};

pub const LAYERS: usize = 3;
/// Loop-level inputs next to the predicted iteration latency:
/// `ln(1 + TC)`, `ln(1 + II)`, pipelined flag.
pub const LOOP_INPUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gcn,
    Sage,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Gcn => "gcn",
            Variant::Sage => "sage",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Variant::Gcn),
            "sage" => Ok(Variant::Sage),
            _ => Err(Error::Invalid(format!("unknown variant `{s}` (expected gcn or sage)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub variant: Variant,
    pub input: usize,
    pub hidden: usize,
    pub loop_head: bool,
    pub loop_hidden: usize,
}

impl Arch {
    pub fn new(variant: Variant, hidden: usize, loop_head: bool) -> Self {
        Arch {
            variant,
            input: ENCODED_WIDTH,
            hidden,
            loop_head,
            loop_hidden: 16,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Span {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
    fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: Span,
    b: Span,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Dense,
    /// Self (or GCN) transform per layer plus its bias.
    prop: Vec<Dense>,
    /// Neighbour transform for the sage variant.
    nbr: Vec<Option<Span>>,
    head1: Dense,
    head2: Dense,
    loop1: Option<Dense>,
    loop2: Option<Dense>,
    total: usize,
}

impl Layout {
    fn new(a: &Arch) -> Layout {
        let mut off = 0;
        let mut span = |rows: usize, cols: usize| {
            let s = Span { off, rows, cols };
            off += rows * cols;
            s
        };
        let h = a.hidden;
        let enc = Dense { w: span(a.input, h), b: span(1, h) };
        let mut prop = Vec::new();
        let mut nbr = Vec::new();
        for _ in 0..LAYERS {
            let w = span(h, h);
            let n = (a.variant == Variant::Sage).then(|| span(h, h));
            let b = span(1, h);
            prop.push(Dense { w, b });
            nbr.push(n);
        }
        let head1 = Dense { w: span(2 * h, h), b: span(1, h) };
        let head2 = Dense { w: span(h, 1), b: span(1, 1) };
        let (loop1, loop2) = if a.loop_head {
            let l1 = Dense { w: span(1 + LOOP_INPUTS, a.loop_hidden), b: span(1, a.loop_hidden) };
            let l2 = Dense { w: span(a.loop_hidden, 1), b: span(1, 1) };
            (Some(l1), Some(l2))
        } else {
            (None, None)
        };
        Layout { enc, prop, nbr, head1, head2, loop1, loop2, total: off }
    }

    fn weights(&self) -> Vec<Span> {
        let mut v = vec![self.enc.w];
        for (p, n) in self.prop.iter().zip(&self.nbr) {
            v.push(p.w);
            v.extend(n);
        }
        v.push(self.head1.w);
        v.push(self.head2.w);
        v.extend(self.loop1.map(|d| d.w));
        v.extend(self.loop2.map(|d| d.w));
        v
    }
}

/// A graph ready for the network: encoded node rows and undirected,
/// de-duplicated neighbour pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedGraph {
    pub n: usize,
    pub x: Vec<f64>,
    pub edges: Vec<(u32, u32)>,
    pub loop_feats: Option<[f64; LOOP_INPUTS]>,
}

impl EncodedGraph {
    /// `raw_edges` may be directed, repeated or contain self loops.
    pub fn new(n: usize, x: Vec<f64>, raw_edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut edges: Vec<(u32, u32)> = raw_edges
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| if a < b { (a as u32, b as u32) } else { (b as u32, a as u32) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        EncodedGraph { n, x, edges, loop_feats: None }
    }

    pub fn loop_inputs(tripcount: u64, ii: u64, pipelined: bool) -> [f64; LOOP_INPUTS] {
        [
            (tripcount as f64).ln_1p(),
            (ii as f64).ln_1p(),
            if pipelined { 1.0 } else { 0.0 },
            // Cycles between the first and last iteration start.
            if pipelined { (ii.saturating_mul(tripcount.saturating_sub(1)) as f64).ln_1p() } else { 0.0 },
        ]
    }
}

/// Several graphs concatenated into one disconnected graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub n: usize,
    pub width: usize,
    pub x: Vec<f64>,
    pub nbr_off: Vec<usize>,
    pub nbr: Vec<u32>,
    pub member: Vec<u32>,
    pub graphs: usize,
    pub loop_feats: Vec<[f64; LOOP_INPUTS]>,
}

impl GraphBatch {
    pub fn new(graphs: &[&EncodedGraph]) -> Result<Self> {
        let width = graphs.first().map_or(ENCODED_WIDTH, |g| g.x.len() / g.n.max(1));
        let n: usize = graphs.iter().map(|g| g.n).sum();
        let mut x = Vec::with_capacity(n * width);
        let mut member = Vec::with_capacity(n);
        let mut deg = vec![0usize; n];
        let mut base = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.n == 0 {
                return Err(Error::Shape(format!("graph {gi} has no nodes")));
            }
            if g.x.len() != g.n * width {
                return Err(Error::Shape(format!(
                    "graph {gi}: {} feature values for {} nodes of width {width}",
                    g.x.len(),
                    g.n
                )));
            }
            x.extend_from_slice(&g.x);
            member.extend(std::iter::repeat(gi as u32).take(g.n));
            for &(a, b) in &g.edges {
                if a as usize >= g.n || b as usize >= g.n {
                    return Err(Error::Shape(format!("graph {gi}: edge ({a},{b}) out of range")));
                }
                deg[base + a as usize] += 1;
                deg[base + b as usize] += 1;
            }
            base += g.n;
        }
        let mut nbr_off = vec![0usize; n + 1];
        for i in 0..n {
            nbr_off[i + 1] = nbr_off[i] + deg[i];
        }
        let mut fill = nbr_off.clone();
        let mut nbr = vec![0u32; nbr_off[n]];
        base = 0;
        for g in graphs {
            for &(a, b) in &g.edges {
                let (a, b) = (base + a as usize, base + b as usize);
                nbr[fill[a]] = b as u32;
                fill[a] += 1;
                nbr[fill[b]] = a as u32;
                fill[b] += 1;
            }
            base += g.n;
        }
        let loop_feats = graphs.iter().map(|g| g.loop_feats.unwrap_or([0.0; LOOP_INPUTS])).collect();
        Ok(GraphBatch {
            n,
            width,
            x,
            nbr_off,
            nbr,
            member,
            graphs: graphs.len(),
            loop_feats,
        })
    }

    fn neighbours(&self, v: usize) -> &[u32] {
        &self.nbr[self.nbr_off[v]..self.nbr_off[v + 1]]
    }

    fn degree(&self, v: usize) -> usize {
        self.nbr_off[v + 1] - self.nbr_off[v]
    }
}

/// `out += x · w` with `x` n×din and `w` din×dout (row-major).
fn mm_acc(x: &[f64], n: usize, din: usize, w: &[f64], dout: usize, out: &mut [f64]) {
    for i in 0..n {
        let xr = &x[i * din..(i + 1) * din];
        let or = &mut out[i * dout..(i + 1) * dout];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in or.iter_mut().zip(&w[k * dout..(k + 1) * dout]) {
                *o += xv * wv;
            }
        }
    }
}

/// `gw += xᵀ · dy`.
fn mm_grad_w(x: &[f64], n: usize, din: usize, dy: &[f64], dout: usize, gw: &mut [f64]) {
    for i in 0..n {
        let dr = &dy[i * dout..(i + 1) * dout];
        for (k, &xv) in x[i * din..(i + 1) * din].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (g, &d) in gw[k * dout..(k + 1) * dout].iter_mut().zip(dr) {
                *g += xv * d;
            }
        }
    }
}

/// `dx += dy · wᵀ`.
fn mm_grad_x(dy: &[f64], n: usize, dout: usize, w: &[f64], din: usize, dx: &mut [f64]) {
    for i in 0..n {
        let dr = &dy[i * dout..(i + 1) * dout];
        if dr.iter().all(|&d| d == 0.0) {
            continue;
        }
        for k in 0..din {
            let wr = &w[k * dout..(k + 1) * dout];
            dx[i * din + k] += dr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn add_bias(out: &mut [f64], b: &[f64]) {
    for row in out.chunks_mut(b.len()) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
}

fn grad_bias(dy: &[f64], gb: &mut [f64]) {
    for row in dy.chunks(gb.len()) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn relu_mask(d: &mut [f64], act: &[f64]) {
    for (g, &a) in d.iter_mut().zip(act) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn check_finite(v: &[f64], layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

/// Activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Node embeddings after the encoder (index 0) and each layer.
    h: Vec<Vec<f64>>,
    /// Aggregated neighbourhood input of each layer.
    agg: Vec<Vec<f64>>,
    sum: Vec<f64>,
    argmax: Vec<u32>,
    readout: Vec<f64>,
    z: Vec<f64>,
    /// Primary head output per graph: `ln(1 + target)` or `ln(1 + IL)`.
    pub y: Vec<f64>,
    q: Vec<f64>,
    p: Vec<f64>,
    /// Loop-latency output per graph (`ln(1 + latency)`), loop-head models only.
    pub loop_y: Option<Vec<f64>>,
}

impl Forward {
    /// Sum-pooled and max-pooled final embeddings of graph `g`.
    pub fn pooled(&self, g: usize) -> (&[f64], &[f64]) {
        let h = self.readout.len() / (2 * self.y.len().max(1));
        let r = &self.readout[g * 2 * h..(g + 1) * 2 * h];
        (&self.sum[g * h..(g + 1) * h], &r[h..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Arch,
    pub params: Vec<f64>,
}

impl Model {
    /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init(arch: Arch, rng: &mut ChaCha8Rng) -> Self {
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        for s in layout.weights() {
            let a = (6.0 / (s.rows + s.cols) as f64).sqrt();
            for p in &mut params[s.range()] {
                *p = rng.gen_range(-a..a);
            }
        }
        Model { arch, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    fn slice(&self, s: Span) -> &[f64] {
        &self.params[s.range()]
    }

    /// Set the output biases so the untrained model predicts the given
    /// log-space means.
    pub fn set_output_bias(&mut self, y_mean: f64, loop_mean: Option<f64>) {
        let l = self.layout();
        self.params[l.head2.b.off] = y_mean;
        if let (Some(d), Some(m)) = (l.loop2, loop_mean) {
            self.params[d.b.off] = m;
        }
    }

    pub fn forward(&self, b: &GraphBatch) -> Result<Forward> {
        let a = &self.arch;
        if self.params.len() != self.layout().total {
            return Err(Error::Shape(format!(
                "expected {} parameters, found {}",
                self.layout().total,
                self.params.len()
            )));
        }
        if b.width != a.input {
            return Err(Error::Shape(format!("input width {} but model expects {}", b.width, a.input)));
        }
        let l = self.layout();
        let (n, h, g) = (b.n, a.hidden, b.graphs);

        let mut h0 = vec![0.0; n * h];
        mm_acc(&b.x, n, a.input, self.slice(l.enc.w), h, &mut h0);
        add_bias(&mut h0, self.slice(l.enc.b));
        relu(&mut h0);
        check_finite(&h0, 0)?;
        let mut hs = vec![h0];
        let mut aggs = Vec::with_capacity(LAYERS);
        for k in 0..LAYERS {
            let hin = &hs[k];
            let mut agg = vec![0.0; n * h];
            match a.variant {
                Variant::Gcn => {
                    for v in 0..n {
                        let dv = (b.degree(v) + 1) as f64;
                        let row = &mut agg[v * h..(v + 1) * h];
                        let c = 1.0 / dv;
                        for (o, &x) in row.iter_mut().zip(&hin[v * h..(v + 1) * h]) {
                            *o += c * x;
                        }
                        for &u in b.neighbours(v) {
                            let u = u as usize;
                            let c = 1.0 / (dv * (b.degree(u) + 1) as f64).sqrt();
                            for (o, &x) in row.iter_mut().zip(&hin[u * h..(u + 1) * h]) {
                                *o += c * x;
                            }
                        }
                    }
                }
                Variant::Sage => {
                    for v in 0..n {
                        let d = b.degree(v);
                        if d == 0 {
                            continue;
                        }
                        let c = 1.0 / d as f64;
                        let row = &mut agg[v * h..(v + 1) * h];
                        for &u in b.neighbours(v) {
                            let u = u as usize;
                            for (o, &x) in row.iter_mut().zip(&hin[u * h..(u + 1) * h]) {
                                *o += c * x;
                            }
                        }
                    }
                }
            }
            let mut out = vec![0.0; n * h];
            match a.variant {
                Variant::Gcn => mm_acc(&agg, n, h, self.slice(l.prop[k].w), h, &mut out),
                Variant::Sage => {
                    mm_acc(hin, n, h, self.slice(l.prop[k].w), h, &mut out);
                    mm_acc(&agg, n, h, self.slice(l.nbr[k].expect("sage layer")), h, &mut out);
                }
            }
            add_bias(&mut out, self.slice(l.prop[k].b));
            relu(&mut out);
            check_finite(&out, k + 1)?;
            aggs.push(agg);
            hs.push(out);
        }

        let last = &hs[LAYERS];
        let mut sum = vec![0.0; g * h];
        let mut mx = vec![f64::NEG_INFINITY; g * h];
        let mut argmax = vec![0u32; g * h];
        for v in 0..n {
            let gi = b.member[v] as usize;
            for j in 0..h {
                let x = last[v * h + j];
                sum[gi * h + j] += x;
                if x > mx[gi * h + j] {
                    mx[gi * h + j] = x;
                    argmax[gi * h + j] = v as u32;
                }
            }
        }
        let mut readout = vec![0.0; g * 2 * h];
        for gi in 0..g {
            for j in 0..h {
                readout[gi * 2 * h + j] = sum[gi * h + j].ln_1p();
                readout[gi * 2 * h + h + j] = mx[gi * h + j];
            }
        }
        let mut z = vec![0.0; g * h];
        mm_acc(&readout, g, 2 * h, self.slice(l.head1.w), h, &mut z);
        add_bias(&mut z, self.slice(l.head1.b));
        relu(&mut z);
        let mut y = vec![0.0; g];
        mm_acc(&z, g, h, self.slice(l.head2.w), 1, &mut y);
        add_bias(&mut y, self.slice(l.head2.b));
        check_finite(&y, LAYERS + 1)?;

        let (mut q, mut p, mut loop_y) = (Vec::new(), Vec::new(), None);
        if let (Some(l1), Some(l2)) = (l.loop1, l.loop2) {
            let lh = a.loop_hidden;
            q = vec![0.0; g * (1 + LOOP_INPUTS)];
            for gi in 0..g {
                q[gi * (1 + LOOP_INPUTS)] = y[gi];
                q[gi * (1 + LOOP_INPUTS) + 1..(gi + 1) * (1 + LOOP_INPUTS)].copy_from_slice(&b.loop_feats[gi]);
            }
            p = vec![0.0; g * lh];
            mm_acc(&q, g, 1 + LOOP_INPUTS, self.slice(l1.w), lh, &mut p);
            add_bias(&mut p, self.slice(l1.b));
            relu(&mut p);
            let mut ly = vec![0.0; g];
            mm_acc(&p, g, lh, self.slice(l2.w), 1, &mut ly);
            add_bias(&mut ly, self.slice(l2.b));
            check_finite(&ly, LAYERS + 2)?;
            loop_y = Some(ly);
        }
        Ok(Forward {
            h: hs,
            agg: aggs,
            sum,
            argmax,
            readout,
            z,
            y,
            q,
            p,
            loop_y,
        })
    }

    /// Gradient of a loss with respect to every parameter, given the loss
    /// gradients at the head outputs.
    pub fn backward(&self, b: &GraphBatch, f: &Forward, dy: &[f64], dloop: Option<&[f64]>) -> Vec<f64> {
        let a = &self.arch;
        let l = self.layout();
        let (n, h, g) = (b.n, a.hidden, b.graphs);
        let mut grad = vec![0.0; l.total];
        let mut dy = dy.to_vec();

        if let (Some(l1), Some(l2), Some(dl)) = (l.loop1, l.loop2, dloop) {
            let lh = a.loop_hidden;
            let qw = 1 + LOOP_INPUTS;
            mm_grad_w(&f.p, g, lh, dl, 1, &mut grad[l2.w.range()]);
            grad_bias(dl, &mut grad[l2.b.range()]);
            let mut dp = vec![0.0; g * lh];
            mm_grad_x(dl, g, 1, self.slice(l2.w), lh, &mut dp);
            relu_mask(&mut dp, &f.p);
            mm_grad_w(&f.q, g, qw, &dp, lh, &mut grad[l1.w.range()]);
            grad_bias(&dp, &mut grad[l1.b.range()]);
            let mut dq = vec![0.0; g * qw];
            mm_grad_x(&dp, g, lh, self.slice(l1.w), qw, &mut dq);
            for gi in 0..g {
                dy[gi] += dq[gi * qw];
            }
        }

        mm_grad_w(&f.z, g, h, &dy, 1, &mut grad[l.head2.w.range()]);
        grad_bias(&dy, &mut grad[l.head2.b.range()]);
        let mut dz = vec![0.0; g * h];
        mm_grad_x(&dy, g, 1, self.slice(l.head2.w), h, &mut dz);
        relu_mask(&mut dz, &f.z);
        mm_grad_w(&f.readout, g, 2 * h, &dz, h, &mut grad[l.head1.w.range()]);
        grad_bias(&dz, &mut grad[l.head1.b.range()]);
        let mut dr = vec![0.0; g * 2 * h];
        mm_grad_x(&dz, g, h, self.slice(l.head1.w), 2 * h, &mut dr);

        let mut dh = vec![0.0; n * h];
        for v in 0..n {
            let gi = b.member[v] as usize;
            for j in 0..h {
                dh[v * h + j] += dr[gi * 2 * h + j] / (1.0 + f.sum[gi * h + j]);
            }
        }
        for gi in 0..g {
            for j in 0..h {
                let v = f.argmax[gi * h + j] as usize;
                dh[v * h + j] += dr[gi * 2 * h + h + j];
            }
        }

        for k in (0..LAYERS).rev() {
            let mut dpre = dh;
            relu_mask(&mut dpre, &f.h[k + 1]);
            grad_bias(&dpre, &mut grad[l.prop[k].b.range()]);
            let mut dprev = vec![0.0; n * h];
            let mut dagg = vec![0.0; n * h];
            match a.variant {
                Variant::Gcn => {
                    mm_grad_w(&f.agg[k], n, h, &dpre, h, &mut grad[l.prop[k].w.range()]);
                    mm_grad_x(&dpre, n, h, self.slice(l.prop[k].w), h, &mut dagg);
                    for v in 0..n {
                        let dv = (b.degree(v) + 1) as f64;
                        let c = 1.0 / dv;
                        for j in 0..h {
                            dprev[v * h + j] += c * dagg[v * h + j];
                        }
                        for &u in b.neighbours(v) {
                            let u = u as usize;
                            let c = 1.0 / (dv * (b.degree(u) + 1) as f64).sqrt();
                            for j in 0..h {
                                dprev[u * h + j] += c * dagg[v * h + j];
                            }
                        }
                    }
                }
                Variant::Sage => {
                    let wn = l.nbr[k].expect("sage layer");
                    mm_grad_w(&f.h[k], n, h, &dpre, h, &mut grad[l.prop[k].w.range()]);
                    mm_grad_w(&f.agg[k], n, h, &dpre, h, &mut grad[wn.range()]);
                    mm_grad_x(&dpre, n, h, self.slice(l.prop[k].w), h, &mut dprev);
                    mm_grad_x(&dpre, n, h, self.slice(wn), h, &mut dagg);
                    for v in 0..n {
                        let d = b.degree(v);
                        if d == 0 {
                            continue;
                        }
                        let c = 1.0 / d as f64;
                        for &u in b.neighbours(v) {
                            let u = u as usize;
                            for j in 0..h {
                                dprev[u * h + j] += c * dagg[v * h + j];
                            }
                        }
                    }
                }
            }
            dh = dprev;
        }
        relu_mask(&mut dh, &f.h[0]);
        mm_grad_w(&b.x, n, a.input, &dh, h, &mut grad[l.enc.w.range()]);
        grad_bias(&dh, &mut grad[l.enc.b.range()]);
        grad
    }

    /// Log-space squared error averaged over graphs, with its gradient.
    /// `targets` are raw labels of the primary head; `loop_targets` raw
    /// loop latencies for loop-head models.
    pub fn loss_and_grad(&self, b: &GraphBatch, targets: &[f64], loop_targets: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        let f = self.forward(b)?;
        let g = b.graphs as f64;
        let mut loss = 0.0;
        let dy: Vec<f64> = f
            .y
            .iter()
            .zip(targets)
            .map(|(&y, &t)| {
                let e = y - t.max(0.0).ln_1p();
                loss += e * e / g;
                2.0 * e / g
            })
            .collect();
        let dl: Option<Vec<f64>> = match (&f.loop_y, loop_targets) {
            (Some(ly), Some(lt)) => Some(
                ly.iter()
                    .zip(lt)
                    .map(|(&y, &t)| {
                        let e = y - t.max(0.0).ln_1p();
                        loss += e * e / g;
                        2.0 * e / g
                    })
                    .collect(),
            ),
            _ => None,
        };
        let grad = self.backward(b, &f, &dy, dl.as_deref());
        Ok((loss, grad))
    }

    /// Predictions in label space: final target per graph (loop latency for
    /// loop-head models) and the primary head (IL for loop-head models).
    pub fn predict(&self, b: &GraphBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.forward(b)?;
        let primary: Vec<f64> = f.y.iter().map(|&y| from_log(y)).collect();
        let fin = match &f.loop_y {
            Some(ly) => ly.iter().map(|&y| from_log(y)).collect(),
            None => primary.clone(),
        };
        Ok((fin, primary))
    }
}

/// Inverse of the `ln(1 + x)` target transform, clamped to a sane range.
pub fn from_log(y: f64) -> f64 {
    y.clamp(-50.0, 60.0).exp_m1().max(0.0)
}
