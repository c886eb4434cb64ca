//! Contract tests for the segmentation network: parameter budget against
//! an independent tally, whole-network gradients against finite
//! differences, and checkpoint round trips.

mod common;

use sliceseg::autodiff::Graph;
use sliceseg::checkpoint::{self, Model};
use sliceseg::clstm::attach_clstm;
use sliceseg::network::{SegNet, SegNetConfig};
use sliceseg::rng::{self, uniform_tensor};
use sliceseg::Tensor;

/// Counts trainable scalars straight from the topology description,
/// without touching the parameter store.
fn tally(config: &SegNetConfig) -> usize {
    let mut total = 0;
    let mut in_channels = config.input_channels;
    for block in &config.scale_blocks {
        for _ in 0..block.cbr_count {
            let c = block.channels;
            total += c * in_channels * 9 + c; // 3x3 conv kernel and bias
            total += 2 * c; // batch-norm gamma and beta
            in_channels = c;
        }
        total += block.channels + 1; // 1x1 side head
    }
    total += config.scale_blocks.len() + 1; // 1x1 fusion over side scores
    total
}

#[test]
fn parameter_budget_64() {
    let config = SegNetConfig::jac64();
    let net = SegNet::build(config.clone(), 0).unwrap();
    assert_eq!(net.count_parameters(), tally(&config));
    assert_eq!(net.count_parameters(), 705_163);
    assert!(net.count_parameters() < 3_000_000);
}

#[test]
fn parameter_budget_128() {
    let config = SegNetConfig::jac128();
    let net = SegNet::build(config.clone(), 0).unwrap();
    assert_eq!(net.count_parameters(), tally(&config));
    assert_eq!(net.count_parameters(), 2_811_147);
    assert!(net.count_parameters() < 3_000_000);
}

#[test]
fn tally_tracks_arbitrary_configs() {
    for (scales, cbr, channels) in [(1, 1, 2), (2, 3, 5), (4, 2, 8)] {
        let config = SegNetConfig::uniform(scales, cbr, channels);
        let net = SegNet::build(config.clone(), 3).unwrap();
        assert_eq!(net.count_parameters(), tally(&config));
    }
}

/// Copies every parameter tensor from `store` into `net`, relying on
/// clone-stable parameter ids.
fn overwrite_params(net: &mut SegNet, store: &sliceseg::autodiff::ParamStore) {
    for (id, _, tensor) in store.iter() {
        *net.params_mut().get_mut(id) = tensor.clone();
    }
}

/// Sum of every output map (all side probabilities plus the fused one)
/// after a training-mode forward pass.
fn output_sum(base: &SegNet, store: &sliceseg::autodiff::ParamStore, image: &Tensor) -> f64 {
    let mut net = base.clone();
    overwrite_params(&mut net, store);
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let out = net.forward_graph(&mut g, x, true).unwrap();
    let mut total = 0.0;
    for &side in &out.side_probs {
        total += g.value(side).sum();
    }
    total + g.value(out.fused_prob).sum()
}

#[test]
fn whole_net_gradients_match_finite_differences() {
    let base = SegNet::build(SegNetConfig::uniform(2, 1, 3), 11).unwrap();
    let mut r = rng::seeded(42);
    let image = uniform_tensor(&mut r, &[1, 1, 8, 8], -1.0, 1.0);

    let mut net = base.clone();
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let out = net.forward_graph(&mut g, x, true).unwrap();
    let mut seeds = Vec::new();
    for &side in &out.side_probs {
        seeds.push((side, Tensor::full(g.value(side).shape(), 1.0)));
    }
    seeds.push((
        out.fused_prob,
        Tensor::full(g.value(out.fused_prob).shape(), 1.0),
    ));
    let grads = g.backward(seeds).unwrap();

    let mut store = base.params().clone();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let name = store.name(id).to_string();
        let numeric = common::fd_grad(&mut store, id, 1e-6, |s| output_sum(&base, s, &image));
        let analytic = grads
            .get(id)
            .unwrap_or_else(|| panic!("no grad for {name}"));
        common::assert_grads_close(analytic, &numeric, 1e-4, &name);
    }
}

#[test]
fn training_forward_moves_bn_stats_inference_does_not() {
    let mut net = SegNet::build(SegNetConfig::uniform(2, 1, 3), 1).unwrap();
    let mut r = rng::seeded(9);
    let image = uniform_tensor(&mut r, &[1, 1, 8, 8], 0.0, 2.0);
    let before = net.bn_stats().to_vec();

    net.infer(&image).unwrap();
    assert_eq!(net.bn_stats(), &before[..]);

    let mut g = Graph::new();
    let x = g.constant(image.clone());
    net.forward_graph(&mut g, x, true).unwrap();
    assert_ne!(net.bn_stats(), &before[..]);
}

/// Builds a small trained-looking CNN: random-ish parameters from the
/// seed plus batch-norm buffers moved off their initial values.
fn warmed_net(seed: u64) -> SegNet {
    let mut net = SegNet::build(SegNetConfig::uniform(3, 2, 4), seed).unwrap();
    let mut r = rng::seeded(seed ^ 0x5eed);
    for _ in 0..3 {
        let image = uniform_tensor(&mut r, &[2, 1, 16, 16], -1.0, 3.0);
        let mut g = Graph::new();
        let x = g.constant(image);
        net.forward_graph(&mut g, x, true).unwrap();
    }
    net
}

fn assert_same_params(a: &SegNet, b: &SegNet) {
    assert_eq!(a.params().len(), b.params().len());
    for ((ia, na, ta), (ib, nb, tb)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(ia, ib);
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape(), "{na}");
        assert_eq!(ta.data(), tb.data(), "{na}");
    }
    assert_eq!(a.bn_stats(), b.bn_stats());
}

#[test]
fn checkpoint_round_trip_cnn() {
    let net = warmed_net(21);
    let bytes = checkpoint::to_bytes(&Model::Cnn(net.clone())).unwrap();
    let loaded = match checkpoint::from_bytes(&bytes, "mem").unwrap() {
        Model::Cnn(n) => n,
        Model::Rnn(_) => panic!("kind changed in round trip"),
    };
    assert_same_params(&net, &loaded);
    assert_eq!(
        checkpoint::to_bytes(&Model::Cnn(loaded.clone())).unwrap(),
        bytes
    );

    let mut r = rng::seeded(77);
    let image = uniform_tensor(&mut r, &[1, 1, 16, 16], 0.0, 1.0);
    assert_eq!(
        net.infer(&image).unwrap().fused_prob.data(),
        loaded.infer(&image).unwrap().fused_prob.data()
    );
}

#[test]
fn checkpoint_round_trip_rnn() {
    let mut rnn = attach_clstm(warmed_net(22), 3, 5).unwrap();
    rnn.window = 3;
    rnn.reverse = true;
    let bytes = checkpoint::to_bytes(&Model::Rnn(rnn.clone())).unwrap();
    let loaded = match checkpoint::from_bytes(&bytes, "mem").unwrap() {
        Model::Rnn(m) => m,
        Model::Cnn(_) => panic!("kind changed in round trip"),
    };
    assert_eq!(loaded.window, 3);
    assert!(loaded.reverse);
    assert_eq!(loaded.cell.hidden_channels, 3);
    assert_same_params(&rnn.cnn, &loaded.cnn);

    let mut r = rng::seeded(78);
    let slices: Vec<Tensor> = (0..4)
        .map(|_| uniform_tensor(&mut r, &[1, 1, 16, 16], 0.0, 1.0))
        .collect();
    let a = rnn.run_sequence(&slices).unwrap();
    let b = loaded.run_sequence(&slices).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn checkpoint_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.segn");
    let net = warmed_net(23);
    checkpoint::save(&Model::Cnn(net.clone()), &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_same_params(&net, loaded.cnn());
}

#[test]
fn checkpoint_rejects_malformed_bytes() {
    let net = warmed_net(24);
    let bytes = checkpoint::to_bytes(&Model::Cnn(net)).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(checkpoint::from_bytes(&bad_magic, "mem").is_err());

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(checkpoint::from_bytes(&bad_version, "mem").is_err());

    let truncated = &bytes[..bytes.len() - 5];
    assert!(checkpoint::from_bytes(truncated, "mem").is_err());

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(checkpoint::from_bytes(&trailing, "mem").is_err());
}
