//! Reverse-mode autodiff over a flat tape of operator nodes.
//!
//! A [`Graph`] is built once per forward pass. Parameter nodes copy the
//! current value out of the [`ParamStore`], so the graph owns everything
//! the backward sweep needs and the store stays free for the optimizer.
//! Backward runs at most once per graph and accepts multiple seed
//! gradients, which lets a sum of losses over several output maps
//! propagate in a single reverse sweep.

use std::collections::HashMap;

use crate::autodiff::batchnorm::{self, BnStats};
use crate::autodiff::ops;
use crate::autodiff::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to one node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
struct BnSaved {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    from_batch: bool,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: Box<BnSaved>,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Tanh {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Hadamard {
        a: NodeId,
        b: NodeId,
    },
    ChannelScale {
        input: NodeId,
        scale: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample {
        input: NodeId,
        factor: usize,
    },
    ConcatC {
        inputs: Vec<NodeId>,
        channels: Vec<usize>,
    },
}

/// Wengert tape: nodes in construction order, values alongside.
#[derive(Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    param_nodes: HashMap<ParamId, NodeId>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        id
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Leaf holding data that needs no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    /// Leaf bound to a trainable parameter. Repeated calls with the same
    /// id return the same node, so shared weights accumulate gradients
    /// through a single entry point.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(Op::Param(id), store.get(id).clone());
        self.param_nodes.insert(id, node);
        node
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
    ) -> Result<NodeId> {
        let out = ops::conv2d(
            &self.values[input.0],
            &self.values[weight.0],
            &self.values[bias.0],
            pad,
        )?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            out,
        ))
    }

    /// Batch normalization with batch statistics; updates `stats` in place.
    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut BnStats,
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        let fwd = batchnorm::batchnorm_train(
            &self.values[input.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            stats,
            eps,
            momentum,
        )?;
        Ok(self.push_bn(input, gamma, beta, fwd))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batchnorm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &BnStats,
        eps: f64,
    ) -> Result<NodeId> {
        let fwd = batchnorm::batchnorm_infer(
            &self.values[input.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            stats,
            eps,
        )?;
        Ok(self.push_bn(input, gamma, beta, fwd))
    }

    fn push_bn(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        fwd: batchnorm::BnForward,
    ) -> NodeId {
        let saved = Box::new(BnSaved {
            x_hat: fwd.x_hat,
            inv_std: fwd.inv_std,
            from_batch: fwd.from_batch,
        });
        self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            fwd.output,
        )
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.values[input.0].map(|v| v.max(0.0));
        self.push(Op::Relu { input }, out)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.values[input.0].map(sigmoid);
        self.push(Op::Sigmoid { input }, out)
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let out = self.values[input.0].map(f64::tanh);
        self.push(Op::Tanh { input }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y)?;
        Ok(self.push(Op::Hadamard { a, b }, out))
    }

    /// Multiplies each channel plane of `input` by the matching entry of
    /// the rank-1 `scale` vector.
    pub fn channel_scale(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let x = &self.values[input.0];
        let s = &self.values[scale.0];
        let (n, c, h, w) = x.dims4()?;
        if s.shape() != [c] {
            return Err(Error::ShapeMismatch {
                context: "channel_scale",
                expected: vec![c],
                got: s.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(x.shape());
        let plane = h * w;
        for b in 0..n {
            for ch in 0..c {
                let base = x.idx4(b, ch, 0, 0);
                let k = s.data()[ch];
                for i in base..base + plane {
                    out.data_mut()[i] = x.data()[i] * k;
                }
            }
        }
        Ok(self.push(Op::ChannelScale { input, scale }, out))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool2(&self.values[input.0])?;
        Ok(self.push(Op::MaxPool { input, argmax }, out))
    }

    pub fn upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let out = ops::upsample_bilinear(&self.values[input.0], factor)?;
        Ok(self.push(Op::Upsample { input, factor }, out))
    }

    pub fn concat_c(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<&Tensor> = inputs.iter().map(|id| &self.values[id.0]).collect();
        let out = ops::concat_channels(&parts)?;
        let channels = parts.iter().map(|p| p.shape()[1]).collect();
        Ok(self.push(
            Op::ConcatC {
                inputs: inputs.to_vec(),
                channels,
            },
            out,
        ))
    }

    /// Reverse sweep from the given seed gradients. Each seed pairs a node
    /// with the gradient of the scalar objective with respect to that
    /// node's value; seeds for the same node accumulate. Returns the
    /// gradients of every parameter reached by the sweep. A graph can run
    /// backward only once.
    pub fn backward(&mut self, seeds: Vec<(NodeId, Tensor)>) -> Result<Grads> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph"));
        }
        self.backward_done = true;
        if seeds.is_empty() {
            return Err(Error::Graph("backward needs at least one seed"));
        }

        let mut slots: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        for (node, seed) in seeds {
            if seed.shape() != self.values[node.0].shape() {
                return Err(Error::ShapeMismatch {
                    context: "backward seed",
                    expected: self.values[node.0].shape().to_vec(),
                    got: seed.shape().to_vec(),
                });
            }
            accumulate(&mut slots[node.0], seed);
        }

        let mut grads = Grads::new();
        for i in (0..self.ops.len()).rev() {
            let Some(grad) = slots[i].take() else {
                continue;
            };
            match &self.ops[i] {
                Op::Const => {}
                Op::Param(pid) => grads.accumulate(*pid, grad),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                } => {
                    let (gi, gw, gb) = ops::conv2d_backward(
                        &self.values[input.0],
                        &self.values[weight.0],
                        &self.values[bias.0],
                        *pad,
                        &grad,
                    )?;
                    accumulate(&mut slots[input.0], gi);
                    accumulate(&mut slots[weight.0], gw);
                    accumulate(&mut slots[bias.0], gb);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (gi, gg, gb) = batchnorm::batchnorm_backward(
                        &saved.x_hat,
                        &saved.inv_std,
                        saved.from_batch,
                        &self.values[gamma.0],
                        &grad,
                    )?;
                    accumulate(&mut slots[input.0], gi);
                    accumulate(&mut slots[gamma.0], gg);
                    accumulate(&mut slots[beta.0], gb);
                }
                Op::Relu { input } => {
                    let gi = grad.zip_map(&self.values[i], |g, y| if y > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut slots[input.0], gi);
                }
                Op::Sigmoid { input } => {
                    let gi = grad.zip_map(&self.values[i], |g, y| g * y * (1.0 - y))?;
                    accumulate(&mut slots[input.0], gi);
                }
                Op::Tanh { input } => {
                    let gi = grad.zip_map(&self.values[i], |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut slots[input.0], gi);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut slots[a.0], grad.clone());
                    accumulate(&mut slots[b.0], grad);
                }
                Op::Hadamard { a, b } => {
                    let ga = grad.zip_map(&self.values[b.0], |g, v| g * v)?;
                    let gb = grad.zip_map(&self.values[a.0], |g, v| g * v)?;
                    accumulate(&mut slots[a.0], ga);
                    accumulate(&mut slots[b.0], gb);
                }
                Op::ChannelScale { input, scale } => {
                    let x = &self.values[input.0];
                    let s = &self.values[scale.0];
                    let (n, c, h, w) = x.dims4()?;
                    let plane = h * w;
                    let mut gi = Tensor::zeros(x.shape());
                    let mut gs = Tensor::zeros(&[c]);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = x.idx4(b, ch, 0, 0);
                            let k = s.data()[ch];
                            let mut acc = 0.0;
                            for j in base..base + plane {
                                gi.data_mut()[j] = grad.data()[j] * k;
                                acc += grad.data()[j] * x.data()[j];
                            }
                            gs.data_mut()[ch] += acc;
                        }
                    }
                    accumulate(&mut slots[input.0], gi);
                    accumulate(&mut slots[scale.0], gs);
                }
                Op::MaxPool { input, argmax } => {
                    let gi = ops::maxpool2_backward(self.values[input.0].shape(), argmax, &grad)?;
                    accumulate(&mut slots[input.0], gi);
                }
                Op::Upsample { input, factor } => {
                    let gi = ops::upsample_bilinear_backward(
                        self.values[input.0].shape(),
                        *factor,
                        &grad,
                    )?;
                    accumulate(&mut slots[input.0], gi);
                }
                Op::ConcatC { inputs, channels } => {
                    let parts = ops::concat_channels_backward(&grad, channels)?;
                    for (node, part) in inputs.clone().into_iter().zip(parts) {
                        accumulate(&mut slots[node.0], part);
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), grad.shape());
            for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                *e += g;
            }
        }
        None => *slot = Some(grad),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_runs_only_once() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::from_vec(&[1], vec![3.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let y = g.relu(w);
        let seed = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        g.backward(vec![(y, seed.clone())]).unwrap();
        assert!(g.backward(vec![(y, seed)]).is_err());
    }

    #[test]
    fn shared_param_grads_accumulate() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::from_vec(&[1], vec![2.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        // y = w * w, dy/dw = 2w = 4
        let y = g.hadamard(w1, w2).unwrap();
        let grads = g
            .backward(vec![(y, Tensor::from_vec(&[1], vec![1.0]).unwrap())])
            .unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[4.0]);
    }

    #[test]
    fn sigmoid_matches_symmetry() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn multiple_seeds_sum_objectives() {
        // y1 = relu(w), y2 = tanh(w); seeding both equals d(y1 + y2)/dw.
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::from_vec(&[1], vec![0.5]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let y1 = g.relu(w);
        let y2 = g.tanh(w);
        let one = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let grads = g.backward(vec![(y1, one.clone()), (y2, one)]).unwrap();
        let expected = 1.0 + (1.0 - 0.5f64.tanh().powi(2));
        assert!((grads.get(id).unwrap().data()[0] - expected).abs() < 1e-12);
    }
}
