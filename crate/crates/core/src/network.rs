//! The compact deeply supervised segmentation CNN.
//!
//! The network is a chain of Scale blocks separated by 2x2 max poolings.
//! Each Scale block stacks conv/batchnorm/relu (CBR) units at one
//! resolution and ends in a 1x1 side head whose score map is bilinearly
//! upsampled back to input resolution. A learned 1x1 fusion convolution
//! over the concatenated side scores produces the primary output; every
//! map passes through a sigmoid to become a probability.
//!
//! Side heads are structural: they always exist and always feed the
//! fusion layer. Disabling a block's auxiliary supervision only removes
//! its side loss term, so no shapes change.

use crate::autodiff::{BnStats, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Batch-norm epsilon used throughout the network.
pub const BN_EPS: f64 = 1e-5;
/// Batch-norm running-average momentum: `r <- 0.9 r + 0.1 batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// One conv/batchnorm/relu unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CbrConfig {
    pub in_channels: usize,
    pub out_channels: usize,
}

/// One resolution level: a stack of CBR units plus a side head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleBlockConfig {
    pub cbr_count: usize,
    pub channels: usize,
    /// Whether this block's side output receives an auxiliary loss term.
    pub has_aux_head: bool,
}

/// Topology of a [`SegNet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegNetConfig {
    pub input_channels: usize,
    pub scale_blocks: Vec<ScaleBlockConfig>,
}

impl SegNetConfig {
    /// A network of `scales` blocks, each with `cbr_per_scale` CBR units
    /// of constant `channels` width and auxiliary supervision enabled.
    pub fn uniform(scales: usize, cbr_per_scale: usize, channels: usize) -> SegNetConfig {
        SegNetConfig {
            input_channels: 1,
            scale_blocks: (0..scales)
                .map(|_| ScaleBlockConfig {
                    cbr_count: cbr_per_scale,
                    channels,
                    has_aux_head: true,
                })
                .collect(),
        }
    }

    /// The 64-channel variant: five Scale blocks of four CBR units.
    pub fn jac64() -> SegNetConfig {
        SegNetConfig::uniform(5, 4, 64)
    }

    /// The 128-channel variant.
    pub fn jac128() -> SegNetConfig {
        SegNetConfig::uniform(5, 4, 128)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::invalid("input_channels must be at least 1"));
        }
        if self.scale_blocks.is_empty() {
            return Err(Error::invalid("network needs at least one scale block"));
        }
        for (i, block) in self.scale_blocks.iter().enumerate() {
            if block.cbr_count == 0 {
                return Err(Error::invalid(format!(
                    "scale block {} has zero CBR units",
                    i + 1
                )));
            }
            if block.channels == 0 {
                return Err(Error::invalid(format!(
                    "scale block {} has zero channels",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Spatial extents must divide this: one 2x2 pooling sits between
    /// consecutive scale blocks.
    pub fn required_divisor(&self) -> usize {
        1 << (self.scale_blocks.len() - 1)
    }

    /// Per-side-output loss weights followed by the fused weight, as
    /// used for deep supervision: 1.0 where the auxiliary head is
    /// enabled, 0.0 where it is not, and 1.0 for the fused map.
    pub fn supervision_weights(&self) -> Vec<f64> {
        let mut w: Vec<f64> = self
            .scale_blocks
            .iter()
            .map(|b| if b.has_aux_head { 1.0 } else { 0.0 })
            .collect();
        w.push(1.0);
        w
    }
}

#[derive(Debug, Clone)]
struct CbrIds {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct ScaleIds {
    cbrs: Vec<CbrIds>,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Output nodes of one forward pass, all at input resolution.
/// Scores are pre-sigmoid; probabilities are their sigmoids.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub side_scores: Vec<NodeId>,
    pub side_probs: Vec<NodeId>,
    pub fused_score: NodeId,
    pub fused_prob: NodeId,
}

/// A built network: parameters, batch-norm buffers, and topology.
#[derive(Debug, Clone)]
pub struct SegNet {
    config: SegNetConfig,
    params: ParamStore,
    bn: Vec<Vec<BnStats>>,
    scales: Vec<ScaleIds>,
    fusion_weight: ParamId,
    fusion_bias: ParamId,
}

impl SegNet {
    /// Builds and deterministically initializes a network: He fan-in
    /// scaling for conv kernels, zero biases, unit gamma, zero beta, and
    /// a fusion kernel that starts as a uniform average of the side
    /// scores.
    pub fn build(config: SegNetConfig, seed: u64) -> Result<SegNet> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let mut scales = Vec::new();

        let mut in_ch = config.input_channels;
        for (bi, block) in config.scale_blocks.iter().enumerate() {
            let mut cbrs = Vec::new();
            let mut stats = Vec::new();
            for ci in 0..block.cbr_count {
                let prefix = format!("scale{}.cbr{}", bi + 1, ci + 1);
                let fan_in = (in_ch * 9) as f64;
                let weight = params.add(
                    format!("{prefix}.conv.weight"),
                    rng::randn_tensor(
                        &mut rng,
                        &[block.channels, in_ch, 3, 3],
                        (2.0 / fan_in).sqrt(),
                    ),
                )?;
                let bias = params.add(
                    format!("{prefix}.conv.bias"),
                    Tensor::zeros(&[block.channels]),
                )?;
                let gamma = params.add(
                    format!("{prefix}.bn.gamma"),
                    Tensor::full(&[block.channels], 1.0),
                )?;
                let beta = params.add(
                    format!("{prefix}.bn.beta"),
                    Tensor::zeros(&[block.channels]),
                )?;
                cbrs.push(CbrIds {
                    weight,
                    bias,
                    gamma,
                    beta,
                });
                stats.push(BnStats::new(block.channels));
                in_ch = block.channels;
            }
            let head_fan_in = block.channels as f64;
            let head_weight = params.add(
                format!("scale{}.head.weight", bi + 1),
                rng::randn_tensor(
                    &mut rng,
                    &[1, block.channels, 1, 1],
                    (2.0 / head_fan_in).sqrt(),
                ),
            )?;
            let head_bias =
                params.add(format!("scale{}.head.bias", bi + 1), Tensor::zeros(&[1]))?;
            scales.push(ScaleIds {
                cbrs,
                head_weight,
                head_bias,
            });
            bn.push(stats);
        }

        let sides = config.scale_blocks.len();
        let fusion_weight = params.add(
            "fusion.weight",
            Tensor::full(&[1, sides, 1, 1], 1.0 / sides as f64),
        )?;
        let fusion_bias = params.add("fusion.bias", Tensor::zeros(&[1]))?;

        Ok(SegNet {
            config,
            params,
            bn,
            scales,
            fusion_weight,
            fusion_bias,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batch-norm running statistics, indexed `[block][cbr]`.
    pub fn bn_stats(&self) -> &[Vec<BnStats>] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [Vec<BnStats>] {
        &mut self.bn
    }

    /// Exact count of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: vec![0, self.config.input_channels, 0, 0],
                got: shape.to_vec(),
            });
        }
        let d = self.config.required_divisor();
        if shape[2] % d != 0 || shape[3] % d != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} not divisible by {} for {} scale blocks",
                shape[2],
                shape[3],
                d,
                self.config.scale_blocks.len()
            )));
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        image: NodeId,
        training: bool,
        bn: &mut [Vec<BnStats>],
    ) -> Result<ForwardNodes> {
        self.check_input(g.value(image).shape())?;
        let mut x = image;
        let mut side_scores = Vec::with_capacity(self.scales.len());
        for (bi, scale) in self.scales.iter().enumerate() {
            if bi > 0 {
                x = g.maxpool2(x)?;
            }
            for (ci, cbr) in scale.cbrs.iter().enumerate() {
                let w = g.param(&self.params, cbr.weight);
                let b = g.param(&self.params, cbr.bias);
                let gamma = g.param(&self.params, cbr.gamma);
                let beta = g.param(&self.params, cbr.beta);
                let conv = g.conv2d(x, w, b, 1)?;
                let normed = if training {
                    g.batchnorm_train(conv, gamma, beta, &mut bn[bi][ci], BN_EPS, BN_MOMENTUM)?
                } else {
                    g.batchnorm_infer(conv, gamma, beta, &bn[bi][ci], BN_EPS)?
                };
                x = g.relu(normed);
            }
            let hw = g.param(&self.params, scale.head_weight);
            let hb = g.param(&self.params, scale.head_bias);
            let score = g.conv2d(x, hw, hb, 0)?;
            let factor = 1 << bi;
            let score = if factor > 1 {
                g.upsample(score, factor)?
            } else {
                score
            };
            side_scores.push(score);
        }

        let cat = g.concat_c(&side_scores)?;
        let fw = g.param(&self.params, self.fusion_weight);
        let fb = g.param(&self.params, self.fusion_bias);
        let fused_score = g.conv2d(cat, fw, fb, 0)?;
        let side_probs = side_scores.iter().map(|&s| g.sigmoid(s)).collect();
        let fused_prob = g.sigmoid(fused_score);
        Ok(ForwardNodes {
            side_scores,
            side_probs,
            fused_score,
            fused_prob,
        })
    }

    /// Records a forward pass on an existing graph. In training mode the
    /// batch-norm running statistics are updated in place.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph,
        image: NodeId,
        training: bool,
    ) -> Result<ForwardNodes> {
        if training {
            // Split borrows: the graph reads parameters while the
            // running statistics are updated.
            let mut bn = std::mem::take(&mut self.bn);
            let result = self.forward_impl(g, image, true, &mut bn);
            self.bn = bn;
            result
        } else {
            let mut bn = self.bn.clone();
            self.forward_impl(g, image, false, &mut bn)
        }
    }

    /// Pure inference with frozen batch-norm statistics.
    pub fn infer(&self, image: &Tensor) -> Result<InferOutput> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let mut bn = self.bn.clone();
        let nodes = self.forward_impl(&mut g, x, false, &mut bn)?;
        Ok(InferOutput {
            side_scores: nodes
                .side_scores
                .iter()
                .map(|&n| g.value(n).clone())
                .collect(),
            side_probs: nodes
                .side_probs
                .iter()
                .map(|&n| g.value(n).clone())
                .collect(),
            fused_score: g.value(nodes.fused_score).clone(),
            fused_prob: g.value(nodes.fused_prob).clone(),
        })
    }
}

/// Materialized outputs of [`SegNet::infer`], all at input resolution.
#[derive(Debug, Clone)]
pub struct InferOutput {
    pub side_scores: Vec<Tensor>,
    pub side_probs: Vec<Tensor>,
    pub fused_score: Tensor,
    pub fused_prob: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_preserves_shape() {
        let mut net = SegNet::build(SegNetConfig::uniform(1, 1, 4), 1).unwrap();
        let image = Tensor::zeros(&[1, 1, 16, 16]);
        let mut g = Graph::new();
        let x = g.constant(image);
        let out = net.forward_graph(&mut g, x, false).unwrap();
        assert_eq!(g.value(out.fused_prob).shape(), &[1, 1, 16, 16]);
        assert_eq!(out.side_probs.len(), 1);
    }

    #[test]
    fn outputs_are_probabilities() {
        let mut net = SegNet::build(SegNetConfig::uniform(2, 2, 4), 2).unwrap();
        let mut rng = rng::seeded(9);
        let image = rng::randn_tensor(&mut rng, &[2, 1, 8, 8], 1.0);
        let mut g = Graph::new();
        let x = g.constant(image);
        let out = net.forward_graph(&mut g, x, true).unwrap();
        for node in out.side_probs.iter().chain([&out.fused_prob]) {
            assert!(g
                .value(*node)
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SegNet::build(SegNetConfig::uniform(2, 2, 4), 7).unwrap();
        let b = SegNet::build(SegNetConfig::uniform(2, 2, 4), 7).unwrap();
        for ((_, name_a, va), (_, name_b, vb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(va.data(), vb.data());
        }
        let c = SegNet::build(SegNetConfig::uniform(2, 2, 4), 8).unwrap();
        let first = |n: &SegNet| n.params().iter().next().map(|(_, _, v)| v.data().to_vec());
        assert_ne!(first(&a), first(&c));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut net = SegNet::build(SegNetConfig::uniform(3, 1, 2), 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 10, 10]));
        assert!(net.forward_graph(&mut g, x, false).is_err());
    }

    #[test]
    fn fusion_starts_as_uniform_average() {
        let net = SegNet::build(SegNetConfig::uniform(4, 1, 2), 5).unwrap();
        let id = net.params().lookup("fusion.weight").unwrap();
        assert!(net
            .params()
            .get(id)
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn inference_is_repeatable_and_leaves_stats_alone() {
        let net = SegNet::build(SegNetConfig::uniform(2, 1, 3), 11).unwrap();
        let mut rng = rng::seeded(12);
        let image = rng::randn_tensor(&mut rng, &[1, 1, 8, 8], 1.0);
        let before = net.bn_stats().to_vec();
        let a = net.infer(&image).unwrap();
        let b = net.infer(&image).unwrap();
        assert_eq!(a.fused_prob.data(), b.fused_prob.data());
        assert_eq!(net.bn_stats(), &before[..]);
    }

    #[test]
    fn supervision_weights_follow_aux_flags() {
        let mut config = SegNetConfig::uniform(3, 1, 2);
        config.scale_blocks[1].has_aux_head = false;
        assert_eq!(config.supervision_weights(), vec![1.0, 0.0, 1.0, 1.0]);
    }
}
