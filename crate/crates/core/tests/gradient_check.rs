mod common;

use common::{gradient_check, random_graph, random_model, rng};
use pcfgnn::model::{CrossNetInput, PcfParams};
use pcfgnn::pretrain::{backward, TrainConfig};
use pcfgnn::rng::substream;
use rand::Rng;

fn check(seed: u64, k: usize, relations: usize, cross: CrossNetInput, weighted: bool) {
    let mut r = rng(seed);
    let graph = random_graph(&mut r, 10, relations);
    let mut model = random_model(&mut r, k);
    model.cross_input = cross;
    let mut params = PcfParams::<f64>::init(graph.node_count(), relations, &model, &mut substream(seed, "init"));
    // nonzero biases so ReLU units are not all at the same regime
    for l in &mut params.layers {
        l.bias.iter_mut().for_each(|b| *b = r.random_range(-0.1..0.3));
    }
    params.cross_bias = r.random_range(-0.5..0.5);
    let cfg = TrainConfig {
        weighted_loss: weighted,
        ..TrainConfig::default()
    };
    let rep = gradient_check(&graph, &params, &cfg, 1e-4, 1e-4, 1e-6);
    assert!(
        rep.failures.is_empty(),
        "seed {seed} K={k} R={relations}: {:?}",
        rep.failures
    );
    assert!(rep.checked > 0);
}

#[test]
fn random_small_graphs_match_central_differences() {
    let mut seed = 100;
    for k in 0..=2 {
        for relations in 1..=2 {
            for cross in [CrossNetInput::Concat, CrossNetInput::ConcatProduct] {
                check(seed, k, relations, cross, true);
                seed += 1;
            }
        }
    }
}

#[test]
fn unweighted_loss_gradients() {
    check(7, 2, 2, CrossNetInput::ConcatProduct, false);
}

#[test]
fn minibatch_gradients_sum_to_full_batch() {
    let mut r = rng(5);
    let graph = random_graph(&mut r, 10, 2);
    let model = random_model(&mut r, 2);
    let params = PcfParams::<f64>::init(graph.node_count(), 2, &model, &mut substream(5, "init"));
    let cfg = TrainConfig::default();
    let all: Vec<usize> = (0..graph.edge_count()).collect();
    let (full_loss, full) = backward(&graph, &params, &all, &cfg);
    let mut acc = params.zeros_like();
    let mut acc_loss = 0.0;
    for chunk in all.chunks(3) {
        let (l, g) = backward(&graph, &params, chunk, &cfg);
        acc_loss += l;
        for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
    assert!((acc_loss - full_loss).abs() <= 1e-5 * full_loss.abs().max(1e-12));
    for (a, b) in acc.tensors().iter().zip(full.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1e-9), "{x} vs {y}");
        }
    }
}
