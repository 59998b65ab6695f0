//! The graph encoder and CrossNet head.
//!
//! Node attributes are learnable vectors. Each of the K layers builds, per
//! node, `concat(h_self, mean_{N_1}(h), ..., mean_{N_R}(h))` and applies a
//! linear map plus ReLU. CrossNet maps two final embeddings to a click-rate
//! prediction in (0, 1) with a single sigmoid perceptron.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;

use crate::codec::{sha256_hex, Reader, Writer};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::graph::{InteractionGraph, NodeId};
use crate::ingest::FeatureRef;
use crate::rng::Rng;
use crate::tensor::{affine, dot, sigmoid, Matrix, Scalar};

const MAGIC: &[u8; 4] = b"PCFM";
const VERSION: u32 = 1;

/// What the CrossNet perceptron sees for a pair `(h_u, h_v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossNetInput {
    /// `[h_u; h_v]`. Additive in logit space: cannot express pair interactions.
    Concat,
    /// `[h_u; h_v; h_u ⊙ h_v]`.
    ConcatProduct,
}

impl CrossNetInput {
    pub fn width(self, d: usize) -> usize {
        match self {
            CrossNetInput::Concat => 2 * d,
            CrossNetInput::ConcatProduct => 3 * d,
        }
    }

    fn tag(self) -> u8 {
        match self {
            CrossNetInput::Concat => 0,
            CrossNetInput::ConcatProduct => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(CrossNetInput::Concat),
            1 => Some(CrossNetInput::ConcatProduct),
            _ => None,
        }
    }
}

impl std::str::FromStr for CrossNetInput {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "concat" => Ok(CrossNetInput::Concat),
            "concat_product" => Ok(CrossNetInput::ConcatProduct),
            _ => Err(format!("expected concat|concat_product, got `{s}`")),
        }
    }
}

impl std::fmt::Display for CrossNetInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrossNetInput::Concat => "concat",
            CrossNetInput::ConcatProduct => "concat_product",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// d: width of the learnable node attributes.
    pub embed_dim: usize,
    /// d_1..d_K; empty means K = 0 and the raw attributes feed CrossNet.
    pub layer_widths: Vec<usize>,
    pub cross_input: CrossNetInput,
    /// Per-relation neighbor cap during training; `None` aggregates everything.
    pub fanout: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            layer_widths: vec![64, 8],
            cross_input: CrossNetInput::ConcatProduct,
            fanout: None,
        }
    }
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.layer_widths.len()
    }

    pub fn output_dim(&self) -> usize {
        self.layer_widths.last().copied().unwrap_or(self.embed_dim)
    }

    /// Keys: `embed_dim`, `layers` (comma-separated widths, empty for K=0),
    /// `crossnet` (concat|concat_product), `fanout` (0 = unlimited).
    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        if let Some(d) = cfg.parsed("embed_dim")? {
            self.embed_dim = d;
        }
        if let Some(l) = cfg.get("layers") {
            self.layer_widths = l
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e| Error::Config {
                        key: "layers".into(),
                        message: format!("`{s}`: {e}"),
                    })
                })
                .collect::<Result<_>>()?;
        }
        if let Some(c) = cfg.parsed("crossnet")? {
            self.cross_input = c;
        }
        if let Some(f) = cfg.parsed::<usize>("fanout")? {
            self.fanout = (f > 0).then_some(f);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.layer_widths.contains(&0) {
            return Err(Error::Config {
                key: "embed_dim/layers".into(),
                message: "widths must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn write(&self, cfg: &mut KvConfig) {
        cfg.set("embed_dim", self.embed_dim);
        cfg.set(
            "layers",
            self.layer_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        cfg.set("crossnet", self.cross_input);
        cfg.set("fanout", self.fanout.unwrap_or(0));
    }
}

/// Combination weights of one encoder layer: `W` is ((R+1)·d_in × d_out).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub weight: Matrix<F>,
    pub bias: Vec<F>,
}

/// Every learnable tensor of the encoder and CrossNet.
#[derive(Debug, Clone, PartialEq)]
pub struct PcfParams<F = f32> {
    relations: usize,
    cross_input: CrossNetInput,
    pub embeddings: Matrix<F>,
    pub layers: Vec<Layer<F>>,
    pub cross_weight: Vec<F>,
    pub cross_bias: F,
}

/// Gradients share the parameter layout.
pub type GradientSet<F> = PcfParams<F>;

impl<F: Scalar> PcfParams<F> {
    /// Scaled-uniform initialization: each tensor in ±1/√fan_in, biases zero.
    pub fn init(nodes: usize, relations: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut uniform = |n: usize, fan_in: usize| -> Vec<F> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| F::of(rng.random_range(-bound..bound)))
                .collect()
        };
        let d = cfg.embed_dim;
        let embeddings = Matrix::from_vec(nodes, d, uniform(nodes * d, d));
        let mut layers = Vec::new();
        let mut d_in = d;
        for &d_out in &cfg.layer_widths {
            let rows = (relations + 1) * d_in;
            layers.push(Layer {
                weight: Matrix::from_vec(rows, d_out, uniform(rows * d_out, rows)),
                bias: vec![F::zero(); d_out],
            });
            d_in = d_out;
        }
        let cw = cfg.cross_input.width(d_in);
        Self {
            relations,
            cross_input: cfg.cross_input,
            embeddings,
            layers,
            cross_weight: uniform(cw, cw),
            cross_bias: F::zero(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            relations: self.relations,
            cross_input: self.cross_input,
            embeddings: Matrix::zeros(self.embeddings.rows(), self.embeddings.cols()),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![F::zero(); l.bias.len()],
                })
                .collect(),
            cross_weight: vec![F::zero(); self.cross_weight.len()],
            cross_bias: F::zero(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn relation_count(&self) -> usize {
        self.relations
    }

    pub fn cross_input(&self) -> CrossNetInput {
        self.cross_input
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.bias.len()).collect()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.embed_dim(), |l| l.bias.len())
    }

    /// Tensors in a fixed order: embeddings, (W_k, b_k) per layer, CrossNet weight, CrossNet bias.
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![self.embeddings.as_slice()];
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out.push(&self.cross_weight);
        out.push(std::slice::from_ref(&self.cross_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![self.embeddings.as_mut_slice()];
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(&mut self.cross_weight);
        out.push(std::slice::from_mut(&mut self.cross_bias));
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["embeddings".to_string()];
        for k in 1..=self.layers.len() {
            out.push(format!("layer{k}.weight"));
            out.push(format!("layer{k}.bias"));
        }
        out.push("crossnet.weight".into());
        out.push("crossnet.bias".into());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> PcfParams<G> {
        PcfParams {
            relations: self.relations,
            cross_input: self.cross_input,
            embeddings: self.embeddings.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|x| G::of(x.f64())).collect(),
                })
                .collect(),
            cross_weight: self.cross_weight.iter().map(|x| G::of(x.f64())).collect(),
            cross_bias: G::of(self.cross_bias.f64()),
        }
    }

    /// Checks that the parameters fit `graph` (node and relation counts).
    pub fn check_graph(&self, graph: &InteractionGraph) -> Result<()> {
        if self.node_count() != graph.node_count() || self.relations != graph.relation_count() {
            return Err(Error::contract(format!(
                "parameters are for N={} R={}, graph has N={} R={}",
                self.node_count(),
                self.relations,
                graph.node_count(),
                graph.relation_count()
            )));
        }
        Ok(())
    }
}

impl PcfParams<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u64(self.node_count() as u64);
        w.u32(self.embed_dim() as u32);
        w.u32(self.layers.len() as u32);
        w.u32(self.relations as u32);
        for width in self.layer_widths() {
            w.u32(width as u32);
        }
        w.u8(self.cross_input.tag());
        for t in self.tensors() {
            w.f32s(t);
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open("checkpoint", data, MAGIC, VERSION)?;
        let n = r.u64()? as usize;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let rels = r.u32()? as usize;
        let widths = (0..k).map(|_| r.u32().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
        let cross_input = CrossNetInput::from_tag(r.u8()?).ok_or_else(|| Error::Format {
            kind: "checkpoint",
            message: "unknown crossnet tag".into(),
        })?;
        let cfg = ModelConfig {
            embed_dim: d,
            layer_widths: widths,
            cross_input,
            fanout: None,
        };
        let mut p = Self {
            relations: rels,
            cross_input,
            embeddings: Matrix::zeros(0, d),
            layers: Vec::new(),
            cross_weight: Vec::new(),
            cross_bias: 0.0,
        };
        // shape skeleton, then fill tensor by tensor
        p.embeddings = Matrix::zeros(n, d);
        let mut d_in = d;
        for &d_out in &cfg.layer_widths {
            p.layers.push(Layer {
                weight: Matrix::zeros((rels + 1) * d_in, d_out),
                bias: vec![0.0; d_out],
            });
            d_in = d_out;
        }
        p.cross_weight = vec![0.0; cross_input.width(d_in)];
        let total = p.param_count();
        if total.saturating_mul(4) > data.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                message: "declared dimensions exceed file size".into(),
            });
        }
        for t in p.tensors_mut() {
            let vals = r.f32s(t.len())?;
            t.copy_from_slice(&vals);
        }
        r.finish()?;
        Ok(p)
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }
}

/// Neighbor lists the encoder aggregates over.
pub trait Neighborhood: Sync {
    fn neighbors_of(&self, node: usize, r: usize) -> &[NodeId];
    fn node_count(&self) -> usize;
    fn relation_count(&self) -> usize;
}

impl Neighborhood for InteractionGraph {
    fn neighbors_of(&self, node: usize, r: usize) -> &[NodeId] {
        self.adj(node, r)
    }
    fn node_count(&self) -> usize {
        InteractionGraph::node_count(self)
    }
    fn relation_count(&self) -> usize {
        InteractionGraph::relation_count(self)
    }
}

/// A fanout-capped copy of a graph's adjacency.
#[derive(Debug, Clone)]
pub struct SampledNeighborhood {
    lists: Vec<Vec<Vec<NodeId>>>,
    relations: usize,
}

impl SampledNeighborhood {
    /// Keeps at most `fanout` neighbors per (node, relation), chosen uniformly without replacement.
    pub fn sample(graph: &InteractionGraph, fanout: usize, rng: &mut Rng) -> Self {
        let r_count = graph.relation_count();
        let lists = (0..graph.node_count())
            .map(|i| {
                (0..r_count)
                    .map(|r| {
                        let full = graph.adj(i, r);
                        if full.len() <= fanout {
                            full.to_vec()
                        } else {
                            let mut picked: Vec<NodeId> =
                                sample(rng, full.len(), fanout).into_iter().map(|k| full[k]).collect();
                            picked.sort_unstable();
                            picked
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            lists,
            relations: r_count,
        }
    }
}

impl Neighborhood for SampledNeighborhood {
    fn neighbors_of(&self, node: usize, r: usize) -> &[NodeId] {
        &self.lists[node][r]
    }
    fn node_count(&self) -> usize {
        self.lists.len()
    }
    fn relation_count(&self) -> usize {
        self.relations
    }
}

/// m_{i,r}: element-wise mean of `h_prev` over N_r(i); zero when N_r(i) is empty.
pub fn aggregate<F: Scalar>(graph: &InteractionGraph, h_prev: &Matrix<F>, i: NodeId, r: usize) -> Result<Vec<F>> {
    let nb = graph.neighbors(i, r)?;
    let mut out = vec![F::zero(); h_prev.cols()];
    mean_into(h_prev, nb, &mut out);
    Ok(out)
}

fn mean_into<F: Scalar>(h: &Matrix<F>, nb: &[NodeId], out: &mut [F]) {
    out.iter_mut().for_each(|x| *x = F::zero());
    if nb.is_empty() {
        return;
    }
    for j in nb {
        for (o, x) in out.iter_mut().zip(h.row(j.index())) {
            *o += *x;
        }
    }
    let deg = F::of(nb.len() as f64);
    out.iter_mut().for_each(|x| *x = *x / deg);
}

/// `ReLU(concat(h_self, m_1..m_R) · W + b)`.
pub fn combine<F: Scalar>(h_self: &[F], messages: &[Vec<F>], layer: &Layer<F>) -> Result<Vec<F>> {
    let d_in = h_self.len();
    if messages.iter().any(|m| m.len() != d_in) || (messages.len() + 1) * d_in != layer.weight.rows() {
        return Err(Error::contract(format!(
            "combine: self width {d_in} with {} messages does not fit weight rows {}",
            messages.len(),
            layer.weight.rows()
        )));
    }
    let mut x = h_self.to_vec();
    for m in messages {
        x.extend_from_slice(m);
    }
    let mut out = vec![F::zero(); layer.bias.len()];
    affine(&x, &layer.weight, &layer.bias, &mut out);
    out.iter_mut().for_each(|z| *z = z.max(F::zero()));
    Ok(out)
}

/// Final node representations h^{(K)}, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput<F> {
    pub embeddings: Matrix<F>,
}

impl<F: Scalar> EncodeOutput<F> {
    pub fn row(&self, node: NodeId) -> &[F] {
        self.embeddings.row(node.index())
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape<F> {
    /// h^{(0)}..h^{(K)}; rows outside the active set of a layer stay zero.
    pub hidden: Vec<Matrix<F>>,
    /// Per layer: the concatenated input rows.
    pub inputs: Vec<Matrix<F>>,
    /// Per layer: pre-activation rows.
    pub pre: Vec<Matrix<F>>,
    /// Nodes computed at each depth 0..=K, ascending.
    pub active: Vec<Vec<usize>>,
}

impl<F: Scalar> ForwardTape<F> {
    pub fn output(&self) -> &Matrix<F> {
        self.hidden.last().expect("at least h0")
    }
}

/// Nodes whose depth-k values are needed to compute `targets` at depth K.
pub fn receptive_field<N: Neighborhood>(nbr: &N, layers: usize, targets: &[usize]) -> Vec<Vec<usize>> {
    let n = nbr.node_count();
    let mut active = vec![Vec::new(); layers + 1];
    let mut mark = vec![false; n];
    let mut cur: Vec<usize> = targets.to_vec();
    cur.sort_unstable();
    cur.dedup();
    active[layers] = cur.clone();
    for k in (0..layers).rev() {
        mark.iter_mut().for_each(|m| *m = false);
        for &i in &cur {
            mark[i] = true;
            for r in 0..nbr.relation_count() {
                for j in nbr.neighbors_of(i, r) {
                    mark[j.index()] = true;
                }
            }
        }
        cur = (0..n).filter(|&i| mark[i]).collect();
        active[k] = cur.clone();
    }
    active
}

/// Runs the encoder, computing depth-K rows for `targets` (all nodes when `None`).
/// Layer k reads only layer k−1 values.
pub fn forward<F: Scalar, N: Neighborhood>(
    nbr: &N,
    params: &PcfParams<F>,
    targets: Option<&[usize]>,
) -> ForwardTape<F> {
    let n = params.node_count();
    let k_layers = params.layers.len();
    let active = match targets {
        Some(t) => receptive_field(nbr, k_layers, t),
        None => vec![(0..n).collect(); k_layers + 1],
    };
    let full = targets.is_none();
    let mut hidden = vec![params.embeddings.clone()];
    let mut inputs = Vec::with_capacity(k_layers);
    let mut pre = Vec::with_capacity(k_layers);
    let rels = params.relation_count();
    for (k, layer) in params.layers.iter().enumerate() {
        let h_prev = &hidden[k];
        let d_in = h_prev.cols();
        let d_out = layer.bias.len();
        let x_width = (rels + 1) * d_in;
        let row = |i: usize, x: &mut [F], z: &mut [F], h: &mut [F]| {
            x[..d_in].copy_from_slice(h_prev.row(i));
            for r in 0..rels {
                mean_into(
                    h_prev,
                    nbr.neighbors_of(i, r),
                    &mut x[(r + 1) * d_in..(r + 2) * d_in],
                );
            }
            affine(x, &layer.weight, &layer.bias, z);
            for (hv, zv) in h.iter_mut().zip(z.iter()) {
                *hv = zv.max(F::zero());
            }
        };
        let mut x_m = Matrix::zeros(n, x_width);
        let mut z_m = Matrix::zeros(n, d_out);
        let mut h_m = Matrix::zeros(n, d_out);
        if full {
            x_m.as_mut_slice()
                .par_chunks_mut(x_width)
                .zip(z_m.as_mut_slice().par_chunks_mut(d_out))
                .zip(h_m.as_mut_slice().par_chunks_mut(d_out))
                .enumerate()
                .for_each(|(i, ((x, z), h))| row(i, x, z, h));
        } else {
            let rows: Vec<ActiveRow<F>> = active[k + 1]
                .par_iter()
                .map(|&i| {
                    let mut x = vec![F::zero(); x_width];
                    let mut z = vec![F::zero(); d_out];
                    let mut h = vec![F::zero(); d_out];
                    row(i, &mut x, &mut z, &mut h);
                    (i, x, z, h)
                })
                .collect();
            for (i, x, z, h) in rows {
                x_m.row_mut(i).copy_from_slice(&x);
                z_m.row_mut(i).copy_from_slice(&z);
                h_m.row_mut(i).copy_from_slice(&h);
            }
        }
        inputs.push(x_m);
        pre.push(z_m);
        hidden.push(h_m);
    }
    ForwardTape {
        hidden,
        inputs,
        pre,
        active,
    }
}

/// h^{(K)} for every node using full neighborhoods.
pub fn encode<F: Scalar>(graph: &InteractionGraph, params: &PcfParams<F>) -> EncodeOutput<F> {
    encode_with(graph, params)
}

pub fn encode_with<F: Scalar, N: Neighborhood>(nbr: &N, params: &PcfParams<F>) -> EncodeOutput<F> {
    let mut tape = forward(nbr, params, None);
    EncodeOutput {
        embeddings: tape.hidden.pop().expect("h0 present"),
    }
}

/// CrossNet input vector for a pair.
pub fn cross_input<F: Scalar>(h_u: &[F], h_v: &[F], mode: CrossNetInput) -> Vec<F> {
    let mut phi = Vec::with_capacity(mode.width(h_u.len()));
    phi.extend_from_slice(h_u);
    phi.extend_from_slice(h_v);
    if mode == CrossNetInput::ConcatProduct {
        phi.extend(h_u.iter().zip(h_v).map(|(a, b)| *a * *b));
    }
    phi
}

pub fn cross_logit<F: Scalar>(h_u: &[F], h_v: &[F], params: &PcfParams<F>) -> F {
    let phi = cross_input(h_u, h_v, params.cross_input);
    dot(&params.cross_weight, &phi) + params.cross_bias
}

/// p_{u,v}: predicted click rate of the pair.
pub fn cross_predict<F: Scalar>(h_u: &[F], h_v: &[F], params: &PcfParams<F>) -> F {
    sigmoid(cross_logit(h_u, h_v, params))
}

/// Accumulates CrossNet gradients for one pair given dLoss/dlogit, and adds
/// the embedding gradients into `dh_u` / `dh_v`.
pub fn cross_backward<F: Scalar>(
    h_u: &[F],
    h_v: &[F],
    params: &PcfParams<F>,
    d_logit: F,
    grads: &mut GradientSet<F>,
    dh_u: &mut [F],
    dh_v: &mut [F],
) {
    let d = h_u.len();
    let phi = cross_input(h_u, h_v, params.cross_input);
    for (g, x) in grads.cross_weight.iter_mut().zip(&phi) {
        *g += d_logit * *x;
    }
    grads.cross_bias += d_logit;
    let w = &params.cross_weight;
    for a in 0..d {
        dh_u[a] += d_logit * w[a];
        dh_v[a] += d_logit * w[d + a];
        if params.cross_input == CrossNetInput::ConcatProduct {
            dh_u[a] += d_logit * w[2 * d + a] * h_v[a];
            dh_v[a] += d_logit * w[2 * d + a] * h_u[a];
        }
    }
}

/// Back-propagates `d_out` (dLoss/dh^{(K)}) through the encoder layers into
/// `grads`. Accumulation runs in ascending node order.
pub fn encoder_backward<F: Scalar, N: Neighborhood>(
    nbr: &N,
    params: &PcfParams<F>,
    tape: &ForwardTape<F>,
    d_out: Matrix<F>,
    grads: &mut GradientSet<F>,
) {
    let rels = params.relation_count();
    let mut dh = d_out;
    for k in (0..params.layers.len()).rev() {
        let layer = &params.layers[k];
        let d_in = tape.hidden[k].cols();
        let d_o = layer.bias.len();
        let mut d_prev = Matrix::zeros(dh.rows(), d_in);
        let mut dz = vec![F::zero(); d_o];
        let mut dx = vec![F::zero(); (rels + 1) * d_in];
        let gl = &mut grads.layers[k];
        for &i in &tape.active[k + 1] {
            let pre = tape.pre[k].row(i);
            let mut any = false;
            for ((g, up), z) in dz.iter_mut().zip(dh.row(i)).zip(pre) {
                *g = if *z > F::zero() { *up } else { F::zero() };
                any |= *g != F::zero();
            }
            if !any {
                continue;
            }
            let x = tape.inputs[k].row(i);
            for (a, xa) in x.iter().enumerate() {
                if *xa != F::zero() {
                    for (g, dzo) in gl.weight.row_mut(a).iter_mut().zip(&dz) {
                        *g += *xa * *dzo;
                    }
                }
                dx[a] = dot(layer.weight.row(a), &dz);
            }
            for (g, dzo) in gl.bias.iter_mut().zip(&dz) {
                *g += *dzo;
            }
            for (p, v) in d_prev.row_mut(i).iter_mut().zip(&dx[..d_in]) {
                *p += *v;
            }
            for r in 0..rels {
                let nb = nbr.neighbors_of(i, r);
                if nb.is_empty() {
                    continue;
                }
                let deg = F::of(nb.len() as f64);
                let block = &dx[(r + 1) * d_in..(r + 2) * d_in];
                for j in nb {
                    for (p, v) in d_prev.row_mut(j.index()).iter_mut().zip(block) {
                        *p += *v / deg;
                    }
                }
            }
        }
        dh = d_prev;
    }
    for (g, v) in grads.embeddings.as_mut_slice().iter_mut().zip(dh.as_slice()) {
        *g += *v;
    }
}

/// Node index with its layer input, pre-activation and output rows.
type ActiveRow<F> = (usize, Vec<F>, Vec<F>, Vec<F>);

/// Infers the cross-feature value of `(u, v)` from already-encoded nodes.
/// `None` when either feature is not a node of the graph.
pub fn infer_with<F: Scalar>(
    graph: &InteractionGraph,
    params: &PcfParams<F>,
    encoded: &EncodeOutput<F>,
    u: &FeatureRef,
    v: &FeatureRef,
) -> Option<F> {
    let (nu, nv) = (graph.node_of(u)?, graph.node_of(v)?);
    // keep the relation's declared orientation when the caller passes (v, u)
    let (nu, nv) = match graph.schema().relation_between(&u.field, &v.field) {
        Some((_, true)) => (nv, nu),
        _ => (nu, nv),
    };
    Some(cross_predict(encoded.row(nu), encoded.row(nv), params))
}

/// Encodes the graph and infers `(u, v)`; works for pairs never observed together.
pub fn infer_pair<F: Scalar>(
    graph: &InteractionGraph,
    params: &PcfParams<F>,
    u: &FeatureRef,
    v: &FeatureRef,
) -> Option<F> {
    graph.node_of(u)?;
    graph.node_of(v)?;
    let enc = encode(graph, params);
    infer_with(graph, params, &enc, u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;
    use crate::ingest::RelationSchema;
    use crate::rng::substream;

    fn line_graph() -> InteractionGraph {
        // a0 - b1 - a2 - b3 - a4 alternating fields so every edge is a valid `a,b` pair
        let schema = RelationSchema::new(&["a", "b"], &[("a", "b")]).unwrap();
        let nodes = vec![
            FeatureRef::new("a", "0"),
            FeatureRef::new("b", "1"),
            FeatureRef::new("a", "2"),
            FeatureRef::new("b", "3"),
            FeatureRef::new("a", "4"),
        ];
        let e = |u: u32, v: u32| Edge {
            u: NodeId(u),
            v: NodeId(v),
            relation: 0,
            count: 2,
            attribute: 0.5,
        };
        InteractionGraph::from_parts(schema, nodes, vec![e(0, 1), e(2, 1), e(2, 3), e(4, 3)]).unwrap()
    }

    #[test]
    fn aggregate_mean_and_empty() {
        let g = line_graph();
        let h = Matrix::from_vec(5, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(aggregate(&g, &h, NodeId(0), 0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(aggregate(&g, &h, NodeId(1), 0).unwrap(), vec![3.0, 4.0]);
        // node 2 sees 1 and 3
        assert_eq!(aggregate(&g, &h, NodeId(2), 0).unwrap(), vec![5.0, 6.0]);
        let lonely = InteractionGraph::from_parts(
            RelationSchema::new(&["a", "b"], &[("a", "b")]).unwrap(),
            vec![FeatureRef::new("a", "x")],
            vec![],
        )
        .unwrap();
        let h1 = Matrix::from_vec(1, 2, vec![1.0, 1.0]);
        assert_eq!(aggregate(&lonely, &h1, NodeId(0), 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn combine_edge_cases() {
        let zero = Layer {
            weight: Matrix::<f64>::zeros(4, 3),
            bias: vec![0.0; 3],
        };
        assert_eq!(combine(&[1.0, -2.0], &[vec![3.0, 4.0]], &zero).unwrap(), vec![0.0; 3]);
        // identity on the self block
        let mut w = Matrix::zeros(4, 2);
        w.row_mut(0)[0] = 1.0;
        w.row_mut(1)[1] = 1.0;
        let id = Layer { weight: w, bias: vec![0.0; 2] };
        assert_eq!(combine(&[0.7, 0.2], &[vec![9.0, 9.0]], &id).unwrap(), vec![0.7, 0.2]);
        assert!(combine(&[0.7], &[vec![9.0, 9.0]], &id).is_err());
    }

    #[test]
    fn k0_is_identity() {
        let g = line_graph();
        let cfg = ModelConfig {
            layer_widths: vec![],
            ..ModelConfig::default()
        };
        let p = PcfParams::<f64>::init(5, 1, &cfg, &mut substream(1, "init"));
        assert_eq!(encode(&g, &p).embeddings, p.embeddings);
    }

    #[test]
    fn hand_computed_single_layer() {
        // d=1, K=1 width 1, W = [w_self; w_msg], b
        let g = line_graph();
        let cfg = ModelConfig {
            embed_dim: 1,
            layer_widths: vec![1],
            cross_input: CrossNetInput::Concat,
            fanout: None,
        };
        let mut p = PcfParams::<f64>::init(5, 1, &cfg, &mut substream(1, "init"));
        p.embeddings = Matrix::from_vec(5, 1, vec![1.0, 2.0, 3.0, 4.0, -5.0]);
        p.layers[0].weight = Matrix::from_vec(2, 1, vec![0.5, 2.0]);
        p.layers[0].bias = vec![-1.0];
        let out = encode(&g, &p);
        let expect: [f64; 5] = [
            0.5 * 1.0 + 2.0 * 2.0 - 1.0,            // nbrs {1}
            0.5 * 2.0 + 2.0 * ((1.0 + 3.0) / 2.0) - 1.0, // nbrs {0,2}
            0.5 * 3.0 + 2.0 * ((2.0 + 4.0) / 2.0) - 1.0, // nbrs {1,3}
            0.5 * 4.0 + 2.0 * ((3.0 - 5.0) / 2.0) - 1.0, // nbrs {2,4} -> -1 -> relu 0
            -2.5 + 2.0 * 4.0 - 1.0,                 // nbrs {3}
        ];
        for (i, e) in expect.iter().enumerate() {
            assert!((out.embeddings.row(i)[0] - e.max(0.0)).abs() < 1e-12, "node {i}");
        }
    }

    #[test]
    fn cross_predict_cases() {
        let cfg = ModelConfig {
            embed_dim: 3,
            layer_widths: vec![],
            ..ModelConfig::default()
        };
        let mut p = PcfParams::<f64>::init(2, 1, &cfg, &mut substream(3, "init"));
        p.cross_weight.iter_mut().for_each(|w| *w = 0.0);
        assert_eq!(cross_predict(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &p), 0.5);
        p.cross_bias = 20.0;
        assert!((cross_predict(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &p) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn infer_pair_known_unknown() {
        let g = line_graph();
        let p = PcfParams::<f32>::init(5, 1, &ModelConfig::default(), &mut substream(2, "init"));
        let seen = infer_pair(&g, &p, &FeatureRef::new("a", "0"), &FeatureRef::new("b", "1")).unwrap();
        let unseen = infer_pair(&g, &p, &FeatureRef::new("a", "0"), &FeatureRef::new("b", "3")).unwrap();
        for x in [seen, unseen] {
            assert!(x > 0.0 && x < 1.0);
        }
        assert!(infer_pair(&g, &p, &FeatureRef::new("a", "0"), &FeatureRef::new("b", "zzz")).is_none());
        // argument order does not matter
        let rev = infer_pair(&g, &p, &FeatureRef::new("b", "3"), &FeatureRef::new("a", "0")).unwrap();
        assert_eq!(rev.to_bits(), unseen.to_bits());
    }

    #[test]
    fn checkpoint_roundtrip_and_determinism() {
        let cfg = ModelConfig::default();
        let a = PcfParams::<f32>::init(7, 2, &cfg, &mut substream(9, "init"));
        let b = PcfParams::<f32>::init(7, 2, &cfg, &mut substream(9, "init"));
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(PcfParams::from_bytes(&a.to_bytes()).unwrap(), a);
        let mut bytes = a.to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(PcfParams::from_bytes(&bytes).is_err());
    }

    #[test]
    fn partial_forward_matches_full_on_targets() {
        let g = line_graph();
        let p = PcfParams::<f64>::init(5, 1, &ModelConfig::default(), &mut substream(4, "init"));
        let full = forward(&g, &p, None);
        let part = forward(&g, &p, Some(&[0]));
        assert_eq!(part.active[2], vec![0]);
        assert_eq!(part.active[1], vec![0, 1]);
        assert_eq!(part.active[0], vec![0, 1, 2]);
        assert_eq!(part.output().row(0), full.output().row(0));
    }
}
