use lanechange::qnet::{Checkpoint, Network, Optimizer, QSample};
use lanechange::seed;
use rand::Rng as _;

/// Naive triple-loop forward pass, independent of the crate's kernels.
fn naive_forward(net: &Network, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    let last = net.layers.len() - 1;
    for (li, l) in net.layers.iter().enumerate() {
        let mut y = vec![0.0; l.outputs];
        for o in 0..l.outputs {
            let mut z = l.biases[o];
            for i in 0..l.inputs {
                z += l.weights[o * l.inputs + i] * x[i];
            }
            y[o] = if li < last { z.max(0.0) } else { z };
        }
        x = y;
    }
    x
}

struct Sample {
    input: Vec<f64>,
    action: usize,
    target: f64,
}

fn naive_loss(net: &Network, samples: &[Sample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| (naive_forward(net, &s.input)[s.action] - s.target).powi(2))
        .sum();
    total / samples.len() as f64
}

fn random_samples(n: usize, in_dim: usize, out_dim: usize, seed_: u64) -> Vec<Sample> {
    let mut rng = seed::rng_for(seed_, "gradcheck-samples");
    (0..n)
        .map(|_| Sample {
            input: (0..in_dim).map(|_| rng.random_range(1e-6..1.0)).collect(),
            action: rng.random_range(0..out_dim),
            target: rng.random_range(-2.0..3.0),
        })
        .collect()
}

fn as_q(samples: &[Sample]) -> Vec<QSample<'_>> {
    samples
        .iter()
        .map(|s| QSample {
            input: &s.input,
            action: s.action,
            target: s.target,
        })
        .collect()
}

/// (layer, is_bias, index) for every parameter.
fn all_params(net: &Network) -> Vec<(usize, bool, usize)> {
    let mut out = Vec::new();
    for (li, l) in net.layers.iter().enumerate() {
        out.extend((0..l.weights.len()).map(|i| (li, false, i)));
        out.extend((0..l.biases.len()).map(|i| (li, true, i)));
    }
    out
}

fn param(net: &mut Network, p: (usize, bool, usize)) -> &mut f64 {
    let l = &mut net.layers[p.0];
    if p.1 { &mut l.biases[p.2] } else { &mut l.weights[p.2] }
}

fn central_difference(net: &Network, samples: &[Sample], p: (usize, bool, usize), h: f64) -> f64 {
    let mut plus = net.clone();
    *param(&mut plus, p) += h;
    let mut minus = net.clone();
    *param(&mut minus, p) -= h;
    (naive_loss(&plus, samples) - naive_loss(&minus, samples)) / (2.0 * h)
}

fn check(net: &Network, samples: &[Sample], params: &[(usize, bool, usize)]) -> (usize, f64) {
    let (grads, loss) = net.backward(&as_q(samples)).unwrap();
    assert!((loss - naive_loss(net, samples)).abs() <= 1e-10 * loss.max(1.0));
    let mut g = grads;
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for &p in params {
        let analytic = *param(&mut g, p);
        let numeric = central_difference(net, samples, p, 1e-5);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            assert!((analytic - numeric).abs() < 1e-9, "{p:?}: {analytic} vs {numeric}");
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
        checked += 1;
    }
    (checked, worst)
}

#[test]
fn forward_matches_naive_oracle() {
    let net = Network::init(3);
    let samples = random_samples(50, 8, 2, 1);
    let batch: Vec<f64> = samples.iter().flat_map(|s| s.input.clone()).collect();
    let out = net.forward_batch(&batch, samples.len()).unwrap();
    for (k, s) in samples.iter().enumerate() {
        let want = naive_forward(&net, &s.input);
        for a in 0..2 {
            assert!((out[2 * k + a] - want[a]).abs() <= 1e-12 * want[a].abs().max(1.0));
        }
    }
}

#[test]
fn small_network_every_parameter_matches_finite_differences() {
    let mut rng = seed::rng_for(5, "gradcheck-net");
    let net = Network::init_with_dims(&[8, 6, 5, 2], &mut rng);
    let samples = random_samples(20, 8, 2, 2);
    let params = all_params(&net);
    let (checked, worst) = check(&net, &samples, &params);
    assert!(checked > params.len() / 2, "only {checked} of {} checked", params.len());
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn production_network_subsampled_parameters_match_finite_differences() {
    let net = Network::init(11);
    let samples = random_samples(20, 8, 2, 3);
    let mut rng = seed::rng_for(7, "gradcheck-pick");
    let every = all_params(&net);
    let mut picked = Vec::new();
    // Every bias of the output layer plus a random draw from each layer.
    for (li, l) in net.layers.iter().enumerate() {
        let layer: Vec<_> = every.iter().copied().filter(|p| p.0 == li).collect();
        for _ in 0..60 {
            picked.push(layer[rng.random_range(0..layer.len())]);
        }
        if li == net.layers.len() - 1 {
            picked.extend((0..l.outputs).map(|i| (li, true, i)));
        }
    }
    let (checked, worst) = check(&net, &samples, &picked);
    assert!(checked >= 150, "only {checked} parameters had a usable gradient");
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn adam_step_reduces_loss_on_fixed_batch() {
    let mut net = Network::init(21);
    let samples = random_samples(32, 8, 2, 4);
    let mut opt = Optimizer::adam(1e-3, &net);
    let before = naive_loss(&net, &samples);
    for _ in 0..50 {
        let (g, _) = net.backward(&as_q(&samples)).unwrap();
        opt.apply_update(&mut net, &g).unwrap();
    }
    assert!(naive_loss(&net, &samples) < before);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = Network::init(99);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    net.save(&path).unwrap();
    let back = Network::load(&path).unwrap();
    assert!(net.values().zip(back.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.into_network().unwrap(), net);
}
