//! Convolutional LSTM contextual regularization.
//!
//! A trained segmentation CNN is extended with a recurrent cell that
//! consumes the stacked pre-sigmoid side-output score maps of each slice
//! and a 1x1 readout that blends those scores with the hidden state into
//! the final per-slice probability map. The attachment is identity
//! preserving: the readout starts as a copy of the CNN's fusion layer
//! with zero weight on the hidden channels, so predictions are unchanged
//! until fine-tuning moves them.
//!
//! Gate equations follow the convolutional LSTM with per-channel
//! peephole products: `i`, `f`, and `o` gates are sigmoids of 3x3
//! convolutions over `[x, h]` plus a peephole term, the candidate is a
//! tanh convolution, `c' = f.c + i.g`, `h' = o.tanh(c')`. The input and
//! forget peepholes read the previous cell state; the output peephole
//! reads the updated one.

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::network::SegNet;
use crate::rng;
use crate::tensor::Tensor;

/// Parameter handles of one convolutional LSTM cell.
#[derive(Debug, Clone)]
pub struct ClstmCell {
    pub in_channels: usize,
    pub hidden_channels: usize,
    input_w: ParamId,
    input_b: ParamId,
    forget_w: ParamId,
    forget_b: ParamId,
    output_w: ParamId,
    output_b: ParamId,
    cand_w: ParamId,
    cand_b: ParamId,
    peep_input: ParamId,
    peep_forget: ParamId,
    peep_output: ParamId,
}

/// Recurrent state: hidden and cell activations for one sequence.
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

impl SequenceState {
    /// Zeroed state for a fresh sequence.
    pub fn zeros(batch: usize, hidden_channels: usize, h: usize, w: usize) -> SequenceState {
        SequenceState {
            hidden: Tensor::zeros(&[batch, hidden_channels, h, w]),
            cell: Tensor::zeros(&[batch, hidden_channels, h, w]),
        }
    }
}

/// A segmentation CNN with an attached convolutional LSTM and readout.
/// All parameters, including the recurrent ones, live in the wrapped
/// network's store, so optimizer steps and checkpoints see one flat
/// parameter list.
#[derive(Debug, Clone)]
pub struct RnnSegNet {
    pub cnn: SegNet,
    pub cell: ClstmCell,
    readout_w: ParamId,
    readout_b: ParamId,
    /// Truncated unroll length: the current slice plus `window - 1`
    /// predecessors feed each prediction.
    pub window: usize,
    /// Process slices in descending index order when set.
    pub reverse: bool,
}

/// Default truncated unroll: the current slice and three predecessors.
pub const DEFAULT_WINDOW: usize = 4;
/// Default hidden width of the recurrent cell.
pub const DEFAULT_HIDDEN: usize = 8;

/// Extends a network with a freshly initialized recurrent cell and an
/// identity-preserving readout. Gate kernels are small random, gate
/// biases zero except the forget gate's `+1`, peepholes zero. The
/// readout's side-score weights and bias are copied from the fusion
/// layer and its hidden-state weights start at zero, so the attached
/// model reproduces the source network's fused predictions exactly.
pub fn attach_clstm(mut net: SegNet, hidden_channels: usize, seed: u64) -> Result<RnnSegNet> {
    if hidden_channels == 0 {
        return Err(Error::invalid("hidden_channels must be at least 1"));
    }
    let sides = net.config().scale_blocks.len();
    let in_channels = sides;
    let cat = in_channels + hidden_channels;
    let mut rng = rng::seeded(seed);
    let gate_std = (1.0 / (cat * 9) as f64).sqrt();

    let fusion_w = net
        .params()
        .get(net.params().lookup("fusion.weight").expect("built network"))
        .clone();
    let fusion_b = net
        .params()
        .get(net.params().lookup("fusion.bias").expect("built network"))
        .clone();

    let params = net.params_mut();
    let mut gate =
        |name: &str, bias: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Result<(ParamId, ParamId)> {
            let w = params.add(
                format!("clstm.{name}.weight"),
                rng::randn_tensor(rng, &[hidden_channels, cat, 3, 3], gate_std),
            )?;
            let b = params.add(
                format!("clstm.{name}.bias"),
                Tensor::full(&[hidden_channels], bias),
            )?;
            Ok((w, b))
        };
    let (input_w, input_b) = gate("input", 0.0, &mut rng)?;
    let (forget_w, forget_b) = gate("forget", 1.0, &mut rng)?;
    let (output_w, output_b) = gate("output", 0.0, &mut rng)?;
    let (cand_w, cand_b) = gate("cand", 0.0, &mut rng)?;
    // Seed the candidate gate with a centre-tap passthrough of the side
    // scores so the cell state starts out as a decayed moving average
    // of recent predictions. The readout ignores the hidden state at
    // attach time, but its gradient then sees usable context from the
    // first update instead of having to discover it from random noise.
    {
        let w = params.get_mut(cand_w);
        for k in 0..hidden_channels {
            w.set4(k, k % in_channels, 1, 1, 0.5);
        }
    }
    let peep_input = params.add("clstm.peephole.input", Tensor::zeros(&[hidden_channels]))?;
    let peep_forget = params.add("clstm.peephole.forget", Tensor::zeros(&[hidden_channels]))?;
    let peep_output = params.add("clstm.peephole.output", Tensor::zeros(&[hidden_channels]))?;

    let mut readout_init = Tensor::zeros(&[1, cat, 1, 1]);
    for s in 0..sides {
        let v = fusion_w.data()[s];
        readout_init.set4(0, s, 0, 0, v);
    }
    let readout_w = params.add("readout.weight", readout_init)?;
    let readout_b = params.add("readout.bias", fusion_b)?;

    Ok(RnnSegNet {
        cnn: net,
        cell: ClstmCell {
            in_channels,
            hidden_channels,
            input_w,
            input_b,
            forget_w,
            forget_b,
            output_w,
            output_b,
            cand_w,
            cand_b,
            peep_input,
            peep_forget,
            peep_output,
        },
        readout_w,
        readout_b,
        window: DEFAULT_WINDOW,
        reverse: false,
    })
}

impl RnnSegNet {
    /// One recurrent update on an existing graph. `x` is the stacked
    /// side-score map for the slice, `h`/`c` the previous state nodes.
    /// Returns the new `(h, c)` nodes.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let params = self.cnn.params();
        let cat = g.concat_c(&[x, h])?;

        let gate = |g: &mut Graph, w, b, peep: Option<(ParamId, NodeId)>| -> Result<NodeId> {
            let wn = g.param(params, w);
            let bn = g.param(params, b);
            let conv = g.conv2d(cat, wn, bn, 1)?;
            let pre = match peep {
                Some((pw, state)) => {
                    let pn = g.param(params, pw);
                    let scaled = g.channel_scale(state, pn)?;
                    g.add(conv, scaled)?
                }
                None => conv,
            };
            Ok(g.sigmoid(pre))
        };

        let i = gate(
            g,
            self.cell.input_w,
            self.cell.input_b,
            Some((self.cell.peep_input, c)),
        )?;
        let f = gate(
            g,
            self.cell.forget_w,
            self.cell.forget_b,
            Some((self.cell.peep_forget, c)),
        )?;
        let cand = {
            let wn = g.param(params, self.cell.cand_w);
            let bn = g.param(params, self.cell.cand_b);
            let conv = g.conv2d(cat, wn, bn, 1)?;
            g.tanh(conv)
        };
        let keep = g.hadamard(f, c)?;
        let write = g.hadamard(i, cand)?;
        let c_new = g.add(keep, write)?;
        let o = gate(
            g,
            self.cell.output_w,
            self.cell.output_b,
            Some((self.cell.peep_output, c_new)),
        )?;
        let c_act = g.tanh(c_new);
        let h_new = g.hadamard(o, c_act)?;
        Ok((h_new, c_new))
    }

    /// Readout on an existing graph: 1x1 convolution over the
    /// concatenated side scores and hidden state, then sigmoid.
    /// Returns `(score, probability)` nodes.
    pub fn readout_graph(
        &self,
        g: &mut Graph,
        side_cat: NodeId,
        h: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let params = self.cnn.params();
        let cat = g.concat_c(&[side_cat, h])?;
        let w = g.param(params, self.readout_w);
        let b = g.param(params, self.readout_b);
        let score = g.conv2d(cat, w, b, 0)?;
        let prob = g.sigmoid(score);
        Ok((score, prob))
    }

    /// Records a full unroll over one window of slices on a single
    /// graph: the CNN forward for every slice, the recurrent steps, and
    /// a readout per step. Returns `(score, probability)` nodes per
    /// step. Shared parameters enter the graph once, so one backward
    /// pass accumulates gradients across the whole window. Slices must
    /// already be in processing order; the initial state is zero.
    pub fn unroll_graph(
        &mut self,
        g: &mut Graph,
        slices: &[&Tensor],
        training: bool,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        if slices.is_empty() {
            return Err(Error::invalid("unroll_graph on empty slice window"));
        }
        let mut side_cats = Vec::with_capacity(slices.len());
        for slice in slices {
            let x = g.constant((*slice).clone());
            let nodes = self.cnn.forward_graph(g, x, training)?;
            let cat = g.concat_c(&nodes.side_scores)?;
            side_cats.push(cat);
        }
        let (n, _, h, w) = g.value(side_cats[0]).dims4()?;
        let state = SequenceState::zeros(n, self.cell.hidden_channels, h, w);
        let mut hn = g.constant(state.hidden);
        let mut cn = g.constant(state.cell);
        let mut outs = Vec::with_capacity(side_cats.len());
        for &cat in &side_cats {
            (hn, cn) = self.step_graph(g, cat, hn, cn)?;
            outs.push(self.readout_graph(g, cat, hn)?);
        }
        Ok(outs)
    }

    /// Per-slice probability maps for an ordered stack of slices.
    ///
    /// Each slice's prediction is regularized by its `window - 1`
    /// predecessors: the state is rebuilt from zeros over that window,
    /// so sequences and volumes never leak state into one another.
    /// `reverse` processes the stack in descending slice order (the
    /// predecessors of slice `t` are then `t+1, t+2, ...`).
    pub fn run_sequence(&self, slices: &[Tensor]) -> Result<Vec<Tensor>> {
        if slices.is_empty() {
            return Err(Error::invalid("run_sequence on empty slice stack"));
        }
        if self.window == 0 {
            return Err(Error::invalid("unroll window must be at least 1"));
        }
        let ordered: Vec<&Tensor> = if self.reverse {
            slices.iter().rev().collect()
        } else {
            slices.iter().collect()
        };

        // The CNN is depth-invariant, so side scores are computed once
        // per slice and reused by every window that contains the slice.
        let mut side_cats = Vec::with_capacity(ordered.len());
        for slice in &ordered {
            let out = self.cnn.infer(slice)?;
            let mut g = Graph::new();
            let nodes: Vec<NodeId> = out
                .side_scores
                .iter()
                .map(|s| g.constant(s.clone()))
                .collect();
            let cat = g.concat_c(&nodes)?;
            side_cats.push(g.value(cat).clone());
        }

        let mut maps = Vec::with_capacity(ordered.len());
        for t in 0..ordered.len() {
            let start = (t + 1).saturating_sub(self.window);
            let mut g = Graph::new();
            let (n, _, h, w) = side_cats[t].dims4()?;
            let state = SequenceState::zeros(n, self.cell.hidden_channels, h, w);
            let mut hn = g.constant(state.hidden);
            let mut cn = g.constant(state.cell);
            for s in start..=t {
                let x = g.constant(side_cats[s].clone());
                (hn, cn) = self.step_graph(&mut g, x, hn, cn)?;
            }
            let x_t = g.constant(side_cats[t].clone());
            let (_, prob) = self.readout_graph(&mut g, x_t, hn)?;
            maps.push(g.value(prob).clone());
        }

        if self.reverse {
            maps.reverse();
        }
        Ok(maps)
    }

    /// Total trainable scalars, recurrent parameters included.
    pub fn count_parameters(&self) -> usize {
        self.cnn.count_parameters()
    }

    pub fn readout_ids(&self) -> (ParamId, ParamId) {
        (self.readout_w, self.readout_b)
    }
}
