//! Analytic gradients of every layer against central finite differences.
//!
//! Each check contracts the layer output with a random probe matrix `P`, so
//! the scalar objective is `Σ P ⊙ f(x)` and its analytic gradient is the
//! layer's backward pass fed with `P`.

use chunkspeech::infomine::{FeaturePair, FusionParams};
use chunkspeech::numcore::gradcheck::{central_difference, relative_error, EPSILON};
use chunkspeech::numcore::rng::Rng;
use chunkspeech::numcore::{
    flatten, load_flat, param_names, FeedForward, LayerNorm, Linear, Matrix, MultiHeadAttention, Params,
    TransformerBlock,
};
use chunkspeech::speechlm::{LaneTargets, PadEmbedding, SpeechLm, SpeechLmConfig};
use chunkspeech::vocab::{ExtendedVocab, SpeechSlot, StepTokens, TextSlot};

pub const LAYERS: [&str; 7] = ["linear", "layernorm", "attention", "block", "feedforward", "fusion", "lane_heads"];

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Relative error, or zero when both values are below the rounding noise of
/// a central difference of an objective of size `|f|`. Such entries are exact
/// zeros analytically (e.g. key biases under softmax shift invariance).
fn entry_error(analytic: f64, numeric: f64, f: f64) -> f64 {
    let noise = 4.0 * f.abs().max(1.0) * f64::EPSILON / EPSILON;
    if analytic.abs().max(numeric.abs()) <= noise {
        0.0
    } else {
        relative_error(analytic, numeric)
    }
}

/// Worst relative error over all parameters and all input entries.
fn check_layer<P: Params + Clone>(
    layer: &P,
    x: &Matrix,
    probe: &Matrix,
    forward: impl Fn(&P, &Matrix) -> Matrix,
    backward: impl Fn(&P, &Matrix, &Matrix) -> (Matrix, P),
) -> f64 {
    let (dx, grads) = backward(layer, x, probe);
    let analytic = flatten(&grads);
    let f0 = dot(&forward(layer, x), probe);
    let mut values = flatten(layer);
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let numeric = central_difference(&mut values, i, |v| {
            let mut l = layer.clone();
            load_flat(&mut l, v).unwrap();
            dot(&forward(&l, x), probe)
        });
        worst = worst.max(entry_error(analytic[i], numeric, f0));
    }
    let mut xs = x.data().to_vec();
    for i in 0..xs.len() {
        let numeric = central_difference(&mut xs, i, |v| {
            let input = Matrix::from_vec(x.rows(), x.cols(), v.to_vec()).unwrap();
            dot(&forward(layer, &input), probe)
        });
        worst = worst.max(entry_error(dx.data()[i], numeric, f0));
    }
    worst
}

fn randomize<P: Params>(layer: &mut P, rng: &mut Rng, scale: f64) {
    let n = flatten(layer).len();
    let values: Vec<f64> = (0..n).map(|_| rng.normal() * scale).collect();
    load_flat(layer, &values).unwrap();
}

pub fn linear(seed: u64) -> f64 {
    let mut rng = Rng::seed(seed);
    let layer = Linear::new(4, 3, &mut rng);
    let x = rng.normal_matrix(3, 4, 1.0);
    let probe = rng.normal_matrix(3, 3, 1.0);
    check_layer(&layer, &x, &probe, |l, x| l.apply(x).unwrap(), |l, x, g| {
        let (_, tape) = l.forward(x).unwrap();
        l.backward(&tape, g).unwrap()
    })
}

pub fn layernorm(seed: u64) -> f64 {
    let mut rng = Rng::seed(seed);
    let mut layer = LayerNorm::new(5);
    randomize(&mut layer, &mut rng, 1.0);
    let x = rng.normal_matrix(3, 5, 1.0);
    let probe = rng.normal_matrix(3, 5, 1.0);
    check_layer(&layer, &x, &probe, |l, x| l.apply(x).unwrap(), |l, x, g| {
        let (_, tape) = l.forward(x).unwrap();
        l.backward(&tape, g).unwrap()
    })
}

pub fn attention(seed: u64) -> f64 {
    let mut rng = Rng::seed(seed);
    let causal = seed % 2 == 0;
    let layer = MultiHeadAttention::new(6, 2, causal, true, seed % 3 != 0, &mut rng);
    let x = rng.normal_matrix(4, 6, 1.0);
    let probe = rng.normal_matrix(4, 6, 1.0);
    check_layer(&layer, &x, &probe, |l, x| l.forward(x).unwrap().0, |l, x, g| {
        let (_, tape) = l.forward(x).unwrap();
        l.backward(&tape, g).unwrap()
    })
}

pub fn block(seed: u64) -> f64 {
    let mut rng = Rng::seed(seed);
    let mut layer = TransformerBlock::new(4, 2, seed % 2 == 0, &mut rng);
    randomize(&mut layer, &mut rng, 0.5);
    let x = rng.normal_matrix(3, 4, 1.0);
    let probe = rng.normal_matrix(3, 4, 1.0);
    check_layer(&layer, &x, &probe, |l, x| l.forward(x).unwrap().0, |l, x, g| {
        let (_, tape) = l.forward(x).unwrap();
        l.backward(&tape, g).unwrap()
    })
}

pub fn feedforward(seed: u64) -> f64 {
    let mut rng = Rng::seed(seed);
    let layer = FeedForward::new(3, 12, &mut rng);
    let x = rng.normal_matrix(2, 3, 1.0);
    let probe = rng.normal_matrix(2, 3, 1.0);
    check_layer(&layer, &x, &probe, |l, x| l.apply(x).unwrap(), |l, x, g| {
        let (_, tape) = l.forward(x).unwrap();
        l.backward(&tape, g).unwrap()
    })
}

/// Fusion layer including its MLP; the input is `[X_main; X_aux]` stacked.
pub fn fusion(seed: u64) -> f64 {
    let mut rng = Rng::seed(seed);
    let layer = FusionParams::new(3, &mut rng);
    let x = rng.normal_matrix(6, 3, 1.0);
    let probe = rng.normal_matrix(3, 3, 1.0);
    let split = |x: &Matrix| FeaturePair { main: x.slice_rows(0, 3), aux: x.slice_rows(3, 6) };
    check_layer(&layer, &x, &probe, |l, x| l.forward(&split(x)).unwrap().0, |l, x, g| {
        let (_, tape) = l.forward(&split(x)).unwrap();
        let (d, grads) = l.backward(&tape, g).unwrap();
        let mut dx = d.main.clone();
        for r in 0..3 {
            dx.push_row(d.aux.row(r));
        }
        (dx, grads)
    })
}

/// Cross-entropy through the per-lane output heads of a tiny model; only the
/// head parameters are perturbed. Alternates tied and untied heads.
pub fn lane_heads(seed: u64) -> f64 {
    let mut rng = Rng::seed(seed);
    let config = SpeechLmConfig {
        d_model: 4,
        n_layers_base: 1,
        n_layers_adapter: 1,
        n_heads: 2,
        max_seq_len: 8,
        vocab: ExtendedVocab::new(3, 4, 2).unwrap(),
        tie_heads: seed % 2 == 1,
        recency_bias: true,
        pad_embedding: PadEmbedding::Learned,
    };
    let model = SpeechLm::new(config.clone(), seed).unwrap();
    let classes = config.vocab.lane_classes();
    let steps: Vec<StepTokens> = (0..4)
        .map(|_| StepTokens {
            text: TextSlot::Token(rng.below(3) as u32),
            speech: (0..2).map(|_| SpeechSlot::Code(rng.below(4) as u32)).collect(),
        })
        .collect();
    let positions: Vec<usize> = (0..4).collect();
    let targets: Vec<LaneTargets> = (0..4).map(|_| (0..2).map(|_| Some(rng.below(classes))).collect()).collect();
    let (_, grads) = model.loss_and_grad(&steps, &positions, &targets).unwrap();
    let analytic = flatten(&grads);
    let names = param_names(&model);
    let sizes: Vec<usize> = chunkspeech::numcore::params(&model).iter().map(|m| m.data().len()).collect();
    let f0 = model.loss(&steps, &positions, &targets).unwrap();
    let mut values = flatten(&model);
    let mut offset = 0;
    let mut worst: f64 = 0.0;
    for (name, size) in names.iter().zip(sizes) {
        if name.starts_with("head.") {
            for i in offset..offset + size {
                let numeric = central_difference(&mut values, i, |v| {
                    let mut m = model.clone();
                    load_flat(&mut m, v).unwrap();
                    m.loss(&steps, &positions, &targets).unwrap()
                });
                worst = worst.max(entry_error(analytic[i], numeric, f0));
            }
        }
        offset += size;
    }
    worst
}

pub fn run(layer: &str, seed: u64) -> f64 {
    match layer {
        "linear" => linear(seed),
        "layernorm" => layernorm(seed),
        "attention" => attention(seed),
        "block" => block(seed),
        "feedforward" => feedforward(seed),
        "fusion" => fusion(seed),
        "lane_heads" => lane_heads(seed),
        other => panic!("unknown layer {other}"),
    }
}
