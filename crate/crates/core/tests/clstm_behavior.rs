//! Behavior tests for the recurrent extension: backpropagation through
//! time against finite differences, unroll/inference consistency, and
//! state dynamics.

mod common;

use sliceseg::autodiff::{Graph, ParamStore};
use sliceseg::clstm::{attach_clstm, RnnSegNet};
use sliceseg::network::{SegNet, SegNetConfig};
use sliceseg::rng::{self, uniform_tensor};
use sliceseg::Tensor;

fn tiny_rnn(seed: u64) -> RnnSegNet {
    let net = SegNet::build(SegNetConfig::uniform(2, 1, 2), seed).unwrap();
    attach_clstm(net, 2, seed + 1).unwrap()
}

/// A freshly attached model keeps its readout hidden weights and
/// peepholes at zero, which blocks every gradient path through the
/// recurrent state. Gradient-flow tests need those weights moved off
/// the identity point first.
fn perturbed_rnn(seed: u64) -> RnnSegNet {
    let mut rnn = tiny_rnn(seed);
    let mut r = rng::seeded(seed ^ 0xabcd);
    let mut scatter = |rnn: &mut RnnSegNet, name: &str, span: f64| {
        let id = rnn.cnn.params().lookup(name).unwrap();
        let shape = rnn.cnn.params().get(id).shape().to_vec();
        *rnn.cnn.params_mut().get_mut(id) = uniform_tensor(&mut r, &shape, -span, span);
    };
    scatter(&mut rnn, "readout.weight", 0.5);
    scatter(&mut rnn, "clstm.peephole.input", 0.3);
    scatter(&mut rnn, "clstm.peephole.forget", 0.3);
    scatter(&mut rnn, "clstm.peephole.output", 0.3);
    rnn
}

fn overwrite_params(net: &mut SegNet, store: &ParamStore) {
    for (id, _, tensor) in store.iter() {
        *net.params_mut().get_mut(id) = tensor.clone();
    }
}

/// Sum of the last step's probability map after a training-mode unroll
/// over three slices.
fn last_prob_sum(base: &RnnSegNet, store: &ParamStore, slices: &[Tensor]) -> f64 {
    let mut rnn = base.clone();
    overwrite_params(&mut rnn.cnn, store);
    let mut g = Graph::new();
    let refs: Vec<&Tensor> = slices.iter().collect();
    let outs = rnn.unroll_graph(&mut g, &refs, true).unwrap();
    g.value(outs.last().unwrap().1).sum()
}

#[test]
fn bptt_gradients_match_finite_differences() {
    let base = perturbed_rnn(51);
    let mut r = rng::seeded(52);
    let slices: Vec<Tensor> = (0..3)
        .map(|_| uniform_tensor(&mut r, &[1, 1, 8, 8], -1.0, 1.0))
        .collect();

    let mut rnn = base.clone();
    let mut g = Graph::new();
    let refs: Vec<&Tensor> = slices.iter().collect();
    let outs = rnn.unroll_graph(&mut g, &refs, true).unwrap();
    let last = outs.last().unwrap().1;
    let seed = Tensor::full(g.value(last).shape(), 1.0);
    let grads = g.backward(vec![(last, seed)]).unwrap();

    let mut store = base.cnn.params().clone();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let name = store.name(id).to_string();
        let numeric = common::fd_grad(&mut store, id, 1e-6, |s| last_prob_sum(&base, s, &slices));
        if name.starts_with("fusion.") {
            // The readout bypasses the fusion layer, so no gradient may
            // reach it and the objective must not move with it.
            assert!(grads.get(id).is_none(), "{name} received a gradient");
            assert!(numeric.data().iter().all(|&v| v == 0.0), "{name} moved");
            continue;
        }
        let analytic = grads
            .get(id)
            .unwrap_or_else(|| panic!("no grad for {name}"));
        common::assert_grads_close(analytic, &numeric, 1e-4, &name);
    }
}

#[test]
fn gradient_reaches_the_first_slice() {
    let mut probed = perturbed_rnn(55);
    let mut r = rng::seeded(56);
    let first = uniform_tensor(&mut r, &[1, 1, 8, 8], -1.0, 1.0);
    let rest: Vec<Tensor> = (0..2)
        .map(|_| uniform_tensor(&mut r, &[1, 1, 8, 8], -1.0, 1.0))
        .collect();
    let input_id = probed.cnn.params_mut().add("probe.input", first).unwrap();
    let base = probed.clone();

    // Hand-rolled three-step unroll whose first image is a parameter.
    let run = |rnn: &mut RnnSegNet, g: &mut Graph| {
        let x0 = g.param(rnn.cnn.params(), input_id);
        let mut cats = Vec::new();
        let nodes = rnn.cnn.forward_graph(g, x0, true).unwrap();
        cats.push(g.concat_c(&nodes.side_scores).unwrap());
        for slice in &rest {
            let x = g.constant(slice.clone());
            let nodes = rnn.cnn.forward_graph(g, x, true).unwrap();
            cats.push(g.concat_c(&nodes.side_scores).unwrap());
        }
        let mut hn = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let mut cn = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
        for &cat in &cats {
            (hn, cn) = rnn.step_graph(g, cat, hn, cn).unwrap();
        }
        let (_, prob) = rnn.readout_graph(g, *cats.last().unwrap(), hn).unwrap();
        prob
    };

    let mut rnn = base.clone();
    let mut g = Graph::new();
    let prob = run(&mut rnn, &mut g);
    let seed = Tensor::full(g.value(prob).shape(), 1.0);
    let grads = g.backward(vec![(prob, seed)]).unwrap();
    let analytic = grads.get(input_id).expect("input gradient");
    assert!(
        analytic.data().iter().any(|&v| v.abs() > 1e-9),
        "no signal reached the first slice"
    );

    let mut store = base.cnn.params().clone();
    let numeric = common::fd_grad(&mut store, input_id, 1e-6, |s| {
        let mut m = base.clone();
        overwrite_params(&mut m.cnn, s);
        let mut g = Graph::new();
        let prob = run(&mut m, &mut g);
        g.value(prob).sum()
    });
    common::assert_grads_close(analytic, &numeric, 1e-4, "probe.input");
}

#[test]
fn unroll_matches_run_sequence_under_full_window() {
    let mut rnn = tiny_rnn(61);
    // Move the readout's hidden weights off zero so the recurrent state
    // actually shapes the output being compared.
    let (w_id, _) = rnn.readout_ids();
    let mut r = rng::seeded(62);
    let shape = rnn.cnn.params().get(w_id).shape().to_vec();
    *rnn.cnn.params_mut().get_mut(w_id) = uniform_tensor(&mut r, &shape, -0.5, 0.5);
    rnn.window = 16;

    let slices: Vec<Tensor> = (0..4)
        .map(|_| uniform_tensor(&mut r, &[1, 1, 8, 8], -1.0, 1.0))
        .collect();
    let maps = rnn.run_sequence(&slices).unwrap();

    let mut g = Graph::new();
    let refs: Vec<&Tensor> = slices.iter().collect();
    let outs = rnn.clone().unroll_graph(&mut g, &refs, false).unwrap();
    for (map, &(_, prob)) in maps.iter().zip(&outs) {
        assert_eq!(map.data(), g.value(prob).data());
    }
}

#[test]
fn first_slice_ignores_the_window_length() {
    let mut rnn = tiny_rnn(63);
    let (w_id, _) = rnn.readout_ids();
    let mut r = rng::seeded(64);
    let shape = rnn.cnn.params().get(w_id).shape().to_vec();
    *rnn.cnn.params_mut().get_mut(w_id) = uniform_tensor(&mut r, &shape, -0.5, 0.5);

    let slices: Vec<Tensor> = (0..4)
        .map(|_| uniform_tensor(&mut r, &[1, 1, 8, 8], -1.0, 1.0))
        .collect();
    rnn.window = 1;
    let narrow = rnn.run_sequence(&slices).unwrap();
    rnn.window = 4;
    let wide = rnn.run_sequence(&slices).unwrap();

    assert_eq!(narrow[0].data(), wide[0].data());
    let drift: f64 = narrow[3]
        .data()
        .iter()
        .zip(wide[3].data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(drift > 1e-9, "window length never mattered");
}

#[test]
fn constant_input_drives_state_to_a_fixed_point() {
    let rnn = tiny_rnn(65);
    let x_val = Tensor::full(&[1, 2, 8, 8], 0.4);
    let mut g = Graph::new();
    let x = g.constant(x_val);
    let mut hn = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
    let mut cn = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
    let mut prev = Tensor::zeros(&[1, 2, 8, 8]);
    let mut diffs = Vec::new();
    for _ in 0..10 {
        (hn, cn) = rnn.step_graph(&mut g, x, hn, cn).unwrap();
        let h = g.value(hn).clone();
        let diff: f64 = h
            .data()
            .iter()
            .zip(prev.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        diffs.push(diff);
        prev = h;
    }
    assert!(
        diffs[9] < diffs[1] * 0.5,
        "state is not settling: {diffs:?}"
    );
}
