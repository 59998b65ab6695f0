//! Self-supervised pre-training: fit every observed edge's click rate with a
//! count-weighted square loss, back-propagating through CrossNet and the
//! encoder layers.

use std::io::Write;

use rand::seq::SliceRandom;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::graph::InteractionGraph;
use crate::model::{
    cross_backward, cross_logit, encoder_backward, forward, GradientSet, ModelConfig, Neighborhood,
    PcfParams, SampledNeighborhood,
};
use crate::rng::{substream, Rng};
use crate::tensor::{sigmoid, Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Edges per minibatch; `None` trains full-batch.
    pub batch: Option<usize>,
    /// Smoothing constant inside the log weight.
    pub t: f64,
    pub weighted_loss: bool,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.01,
            batch: None,
            t: 1.0,
            weighted_loss: true,
            optimizer: Optimizer::adam(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning_rate", "must be a positive finite number");
        }
        if self.weighted_loss && (self.t.is_nan() || self.t <= 0.0) {
            return bad("t", "must be positive when weighted_loss is on");
        }
        if self.batch == Some(0) {
            return bad("batch", "must be positive or FULL");
        }
        Ok(())
    }

    /// Keys: `epochs`, `learning_rate`, `batch` (integer or FULL), `t`,
    /// `weighted_loss`, `optimizer` (adam|sgd), `adam_beta1`, `adam_beta2`,
    /// `adam_eps`, `seed`.
    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        if let Some(v) = cfg.parsed("epochs")? {
            self.epochs = v;
        }
        if let Some(v) = cfg.parsed("learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(b) = cfg.get("batch") {
            self.batch = if b.eq_ignore_ascii_case("full") {
                None
            } else {
                Some(cfg.parsed("batch")?.expect("present"))
            };
        }
        if let Some(v) = cfg.parsed("t")? {
            self.t = v;
        }
        if let Some(v) = cfg.parsed("weighted_loss")? {
            self.weighted_loss = v;
        }
        if let Some(o) = cfg.get("optimizer") {
            self.optimizer = match o {
                "sgd" => Optimizer::Sgd,
                "adam" => Optimizer::adam(),
                other => {
                    return Err(Error::Config {
                        key: "optimizer".into(),
                        message: format!("expected adam|sgd, got `{other}`"),
                    })
                }
            };
        }
        if let Optimizer::Adam { beta1, beta2, eps } = &mut self.optimizer {
            if let Some(v) = cfg.parsed("adam_beta1")? {
                *beta1 = v;
            }
            if let Some(v) = cfg.parsed("adam_beta2")? {
                *beta2 = v;
            }
            if let Some(v) = cfg.parsed("adam_eps")? {
                *eps = v;
            }
        }
        if let Some(v) = cfg.parsed("seed")? {
            self.seed = v;
        }
        self.validate()
    }

    pub fn write(&self, cfg: &mut KvConfig) {
        cfg.set("epochs", self.epochs);
        cfg.set("learning_rate", self.learning_rate);
        cfg.set(
            "batch",
            self.batch.map_or_else(|| "FULL".to_string(), |b| b.to_string()),
        );
        cfg.set("t", self.t);
        cfg.set("weighted_loss", self.weighted_loss);
        match self.optimizer {
            Optimizer::Sgd => cfg.set("optimizer", "sgd"),
            Optimizer::Adam { beta1, beta2, eps } => {
                cfg.set("optimizer", "adam");
                cfg.set("adam_beta1", beta1);
                cfg.set("adam_beta2", beta2);
                cfg.set("adam_eps", eps);
            }
        }
        cfg.set("seed", self.seed);
    }

    fn weight(&self, count: u64) -> f64 {
        if self.weighted_loss {
            edge_weight(count, self.t).expect("t validated")
        } else {
            1.0
        }
    }
}

/// ln(count + t).
pub fn edge_weight(count: u64, t: f64) -> Result<f64> {
    if t.is_nan() || t <= 0.0 {
        return Err(Error::contract(format!("edge weight needs t > 0, got {t}")));
    }
    Ok((count as f64 + t).ln())
}

fn targets_of(graph: &InteractionGraph, edges: &[usize]) -> Option<Vec<usize>> {
    if edges.len() == graph.edge_count() {
        return None;
    }
    let es = graph.edges();
    Some(
        edges
            .iter()
            .flat_map(|&e| [es[e].u.index(), es[e].v.index()])
            .collect(),
    )
}

/// Σ_e weight(e) · (p_e − a_e)² over `edges` (indices into the graph's edge list).
pub fn loss<F: Scalar>(
    graph: &InteractionGraph,
    params: &PcfParams<F>,
    edges: &[usize],
    cfg: &TrainConfig,
) -> F {
    let targets = targets_of(graph, edges);
    let tape = forward(graph, params, targets.as_deref());
    let h = tape.output();
    let mut total = F::zero();
    for &ei in edges {
        let e = &graph.edges()[ei];
        let p = sigmoid(cross_logit(h.row(e.u.index()), h.row(e.v.index()), params));
        let r = p - F::of(f64::from(e.attribute));
        total += F::of(cfg.weight(e.count)) * r * r;
    }
    total
}

/// Loss and its exact gradient with respect to every parameter tensor.
pub fn backward<F: Scalar>(
    graph: &InteractionGraph,
    params: &PcfParams<F>,
    edges: &[usize],
    cfg: &TrainConfig,
) -> (F, GradientSet<F>) {
    backward_with(graph, graph, params, edges, cfg)
}

/// [`backward`] over an arbitrary neighborhood (e.g. a fanout sample).
pub fn backward_with<F: Scalar, N: Neighborhood>(
    nbr: &N,
    graph: &InteractionGraph,
    params: &PcfParams<F>,
    edges: &[usize],
    cfg: &TrainConfig,
) -> (F, GradientSet<F>) {
    let targets = targets_of(graph, edges);
    let tape = forward(nbr, params, targets.as_deref());
    let h = tape.output();
    let mut grads = params.zeros_like();
    let mut dh = Matrix::zeros(h.rows(), h.cols());
    let d = h.cols();
    let mut du = vec![F::zero(); d];
    let mut dv = vec![F::zero(); d];
    let mut total = F::zero();
    for &ei in edges {
        let e = &graph.edges()[ei];
        let (hu, hv) = (h.row(e.u.index()), h.row(e.v.index()));
        let p = sigmoid(cross_logit(hu, hv, params));
        let w = F::of(cfg.weight(e.count));
        let r = p - F::of(f64::from(e.attribute));
        total += w * r * r;
        let d_logit = F::of(2.0) * w * r * p * (F::one() - p);
        du.iter_mut().for_each(|x| *x = F::zero());
        dv.iter_mut().for_each(|x| *x = F::zero());
        cross_backward(hu, hv, params, d_logit, &mut grads, &mut du, &mut dv);
        for (a, b) in dh.row_mut(e.u.index()).iter_mut().zip(&du) {
            *a += *b;
        }
        for (a, b) in dh.row_mut(e.v.index()).iter_mut().zip(&dv) {
            *a += *b;
        }
    }
    encoder_backward(nbr, params, &tape, dh, &mut grads);
    (total, grads)
}

/// First-order optimizer state over a parameter set.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    kind: Optimizer,
    lr: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(kind: Optimizer, lr: f64, params: &PcfParams<F>) -> Self {
        let shape = |p: &PcfParams<F>| p.tensors().iter().map(|t| vec![F::zero(); t.len()]).collect();
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (shape(params), shape(params)),
        };
        Self {
            kind,
            lr,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut PcfParams<F>, grads: &GradientSet<F>) {
        self.step += 1;
        let lr = F::of(self.lr);
        let gs = grads.tensors();
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(gs) {
                    for (x, dx) in p.iter_mut().zip(g) {
                        *x -= lr * *dx;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (F::of(beta1), F::of(beta2), F::of(eps));
                let c1 = F::one() - F::of(beta1.powi(self.step as i32));
                let c2 = F::one() - F::of(beta2.powi(self.step as i32));
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(gs)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F = f32> {
    pub params: PcfParams<F>,
    /// Sum of the epoch's minibatch losses, one entry per epoch.
    pub loss_trace: Vec<f64>,
}

/// Initializes parameters from `cfg.seed` and trains on all observed edges.
pub fn train(graph: &InteractionGraph, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = PcfParams::init(
        graph.node_count(),
        graph.relation_count(),
        model,
        &mut substream(cfg.seed, "pretrain/init"),
    );
    train_from(graph, params, model, cfg)
}

/// Trains starting from the given parameters.
pub fn train_from<F: Scalar>(
    graph: &InteractionGraph,
    mut params: PcfParams<F>,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    model.validate()?;
    if graph.edge_count() == 0 {
        return Err(Error::contract("cannot pre-train on a graph without edges"));
    }
    params.check_graph(graph)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &params);
    let mut shuffle_rng: Rng = substream(cfg.seed, "pretrain/shuffle");
    let mut fanout_rng: Rng = substream(cfg.seed, "pretrain/fanout");
    let mut order: Vec<usize> = (0..graph.edge_count()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let sampled = model
            .fanout
            .map(|f| SampledNeighborhood::sample(graph, f, &mut fanout_rng));
        let batches: Vec<Vec<usize>> = match cfg.batch {
            None => vec![(0..graph.edge_count()).collect()],
            Some(b) => {
                order.shuffle(&mut shuffle_rng);
                order
                    .chunks(b)
                    .map(|c| {
                        let mut c = c.to_vec();
                        c.sort_unstable();
                        c
                    })
                    .collect()
            }
        };
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let (l, grads) = match &sampled {
                Some(s) => backward_with(s, graph, &params, batch, cfg),
                None => backward(graph, &params, batch, cfg),
            };
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    message: format!(
                        "loss is {} (learning rate {} too high?)",
                        l.f64(),
                        cfg.learning_rate
                    ),
                });
            }
            epoch_loss += l.f64();
            opt.step(&mut params, &grads);
            if !params.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    message: format!(
                        "parameters became non-finite (learning rate {} too high?)",
                        cfg.learning_rate
                    ),
                });
            }
        }
        trace.push(epoch_loss);
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

/// `epoch<TAB>loss` lines, epochs counted from 1.
pub fn write_loss_trace<W: Write>(mut out: W, trace: &[f64]) -> Result<()> {
    writeln!(out, "epoch\tloss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "{}\t{}", i + 1, l)?;
    }
    Ok(())
}
