//! Binary model checkpoints.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "SEGN"
//! version  u16      currently 1
//! kind     u8       0 = plain CNN, 1 = CNN with recurrent extension
//! config   u32 length, then that many UTF-8 bytes of key=value lines
//! count    u32      number of tensor records
//! record   u16 name length, name bytes,
//!          u8 rank, u32 dim per axis,
//!          f64 per element, row-major
//! ```
//!
//! Records hold every trainable parameter in declaration order followed
//! by the batch-norm running buffers (`...bn.running_mean` /
//! `...bn.running_var`). Loading rebuilds the topology from the config
//! block and overwrites each tensor by name, so a round trip is
//! byte-exact.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::clstm::{attach_clstm, RnnSegNet};
use crate::error::{Error, Result};
use crate::network::{ScaleBlockConfig, SegNet, SegNetConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SEGN";
const VERSION: u16 = 1;

/// A loadable model: either the plain CNN or its recurrent extension.
#[derive(Debug, Clone)]
pub enum Model {
    Cnn(SegNet),
    Rnn(RnnSegNet),
}

impl Model {
    pub fn count_parameters(&self) -> usize {
        match self {
            Model::Cnn(net) => net.count_parameters(),
            Model::Rnn(rnn) => rnn.count_parameters(),
        }
    }

    pub fn cnn(&self) -> &SegNet {
        match self {
            Model::Cnn(net) => net,
            Model::Rnn(rnn) => &rnn.cnn,
        }
    }
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::invalid("tensor name too long"));
    }
    push_u16(buf, name.len() as u16);
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        push_u32(buf, d as u32);
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn config_block(net: &SegNet, rnn: Option<&RnnSegNet>) -> String {
    let cfg = net.config();
    let join = |f: &dyn Fn(&ScaleBlockConfig) -> String| {
        cfg.scale_blocks
            .iter()
            .map(|b| f(b))
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut lines = vec![
        format!("input_channels={}", cfg.input_channels),
        format!("cbr_counts={}", join(&|b| b.cbr_count.to_string())),
        format!("channels={}", join(&|b| b.channels.to_string())),
        format!(
            "aux={}",
            join(&|b| if b.has_aux_head { "1" } else { "0" }.to_string())
        ),
    ];
    if let Some(rnn) = rnn {
        lines.push(format!("hidden_channels={}", rnn.cell.hidden_channels));
        lines.push(format!("window={}", rnn.window));
        lines.push(format!("reverse={}", if rnn.reverse { 1 } else { 0 }));
    }
    lines.join("\n")
}

fn bn_buffers(net: &SegNet) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (bi, block) in net.bn_stats().iter().enumerate() {
        for (ci, stats) in block.iter().enumerate() {
            let prefix = format!("scale{}.cbr{}.bn", bi + 1, ci + 1);
            out.push((
                format!("{prefix}.running_mean"),
                Tensor::from_vec(&[stats.mean.len()], stats.mean.clone()).expect("buffer shape"),
            ));
            out.push((
                format!("{prefix}.running_var"),
                Tensor::from_vec(&[stats.var.len()], stats.var.clone()).expect("buffer shape"),
            ));
        }
    }
    out
}

/// Serializes a model to its on-disk byte form.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let (net, rnn) = match model {
        Model::Cnn(net) => (net, None),
        Model::Rnn(rnn) => (&rnn.cnn, Some(rnn)),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u16(&mut buf, VERSION);
    buf.push(if rnn.is_some() { 1 } else { 0 });
    let config = config_block(net, rnn);
    push_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(config.as_bytes());

    let buffers = bn_buffers(net);
    push_u32(&mut buf, (net.params().len() + buffers.len()) as u32);
    for (_, name, tensor) in net.params().iter() {
        push_tensor(&mut buf, name, tensor)?;
    }
    for (name, tensor) in &buffers {
        push_tensor(&mut buf, name, tensor)?;
    }
    Ok(buf)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(&self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse_usize_list(path: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad integer list entry {v:?}")))
        })
        .collect()
}

fn parse_config(path: &str, text: &str) -> Result<(SegNetConfig, Option<(usize, usize, bool)>)> {
    let mut input_channels = None;
    let mut cbr_counts = None;
    let mut channels = None;
    let mut aux = None;
    let mut hidden = None;
    let mut window = None;
    let mut reverse = None;
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(path, format!("bad config line {line:?}")));
        };
        match key {
            "input_channels" => {
                input_channels =
                    Some(value.parse::<usize>().map_err(|_| {
                        Error::format(path, format!("bad input_channels {value:?}"))
                    })?)
            }
            "cbr_counts" => cbr_counts = Some(parse_usize_list(path, value)?),
            "channels" => channels = Some(parse_usize_list(path, value)?),
            "aux" => aux = Some(parse_usize_list(path, value)?),
            "hidden_channels" => hidden = Some(parse_usize_list(path, value)?[0]),
            "window" => window = Some(parse_usize_list(path, value)?[0]),
            "reverse" => reverse = Some(parse_usize_list(path, value)?[0] != 0),
            other => {
                return Err(Error::format(path, format!("unknown config key {other:?}")));
            }
        }
    }
    let input_channels =
        input_channels.ok_or_else(|| Error::format(path, "missing input_channels"))?;
    let cbr_counts = cbr_counts.ok_or_else(|| Error::format(path, "missing cbr_counts"))?;
    let channels = channels.ok_or_else(|| Error::format(path, "missing channels"))?;
    let aux = aux.ok_or_else(|| Error::format(path, "missing aux"))?;
    if cbr_counts.len() != channels.len() || cbr_counts.len() != aux.len() {
        return Err(Error::format(path, "scale block lists disagree in length"));
    }
    let config = SegNetConfig {
        input_channels,
        scale_blocks: cbr_counts
            .into_iter()
            .zip(channels)
            .zip(aux)
            .map(|((cbr_count, channels), aux)| ScaleBlockConfig {
                cbr_count,
                channels,
                has_aux_head: aux != 0,
            })
            .collect(),
    };
    let rnn = match (hidden, window, reverse) {
        (Some(h), Some(w), Some(r)) => Some((h, w, r)),
        (None, None, None) => None,
        _ => {
            return Err(Error::format(
                path,
                "recurrent config keys must appear together",
            ))
        }
    };
    Ok((config, rnn))
}

/// Deserializes a model from its on-disk byte form. `path` only labels
/// error messages.
pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Model> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: path.to_string(),
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, not a SEGN checkpoint"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let kind = r.u8()?;
    if kind > 1 {
        return Err(Error::format(path, format!("unknown model kind {kind}")));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::format(path, "config block is not UTF-8"))?;
    let (config, rnn_cfg) = parse_config(path, config_text)?;
    match (kind, rnn_cfg.is_some()) {
        (0, false) | (1, true) => {}
        _ => {
            return Err(Error::format(
                path,
                "model kind disagrees with config block",
            ))
        }
    }

    let net = SegNet::build(config, 0)?;
    let mut model = match rnn_cfg {
        None => Model::Cnn(net),
        Some((hidden, window, reverse)) => {
            let mut rnn = attach_clstm(net, hidden, 0)?;
            rnn.window = window;
            rnn.reverse = reverse;
            Model::Rnn(rnn)
        }
    };

    let net = match &mut model {
        Model::Cnn(net) => net,
        Model::Rnn(rnn) => &mut rnn.cnn,
    };
    let count = r.u32()? as usize;
    let expected = net.params().len() + 2 * net.bn_stats().iter().map(Vec::len).sum::<usize>();
    if count != expected {
        return Err(Error::format(
            path,
            format!("checkpoint holds {count} tensors, topology needs {expected}"),
        ));
    }

    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        if rank > 4 {
            return Err(Error::format(
                path,
                format!("tensor {name} has rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        let tensor = Tensor::from_vec(&shape, data)?;
        tensor
            .check_finite("checkpoint tensor")
            .map_err(|_| Error::format(path, format!("tensor {name} holds non-finite values")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }

        if let Some(id) = net.params().lookup(&name) {
            if net.params().get(id).shape() != tensor.shape() {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor {name} shape {:?} does not match topology {:?}",
                        tensor.shape(),
                        net.params().get(id).shape()
                    ),
                ));
            }
            *net.params_mut().get_mut(id) = tensor;
        } else if let Some((block, cbr, is_mean)) = parse_buffer_name(&name) {
            let stats = net
                .bn_stats_mut()
                .get_mut(block)
                .and_then(|b| b.get_mut(cbr))
                .ok_or_else(|| {
                    Error::format(path, format!("tensor {name} addresses a missing layer"))
                })?;
            let target = if is_mean {
                &mut stats.mean
            } else {
                &mut stats.var
            };
            if tensor.len() != target.len() {
                return Err(Error::format(
                    path,
                    format!("tensor {name} length {} mismatch", tensor.len()),
                ));
            }
            target.copy_from_slice(tensor.data());
        } else {
            return Err(Error::format(path, format!("unknown tensor {name}")));
        }
    }
    if !r.done() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(model)
}

/// Parses `scale{B}.cbr{C}.bn.running_(mean|var)` into zero-based
/// indices and a mean/var flag.
fn parse_buffer_name(name: &str) -> Option<(usize, usize, bool)> {
    let rest = name.strip_prefix("scale")?;
    let (block, rest) = rest.split_once(".cbr")?;
    let (cbr, suffix) = rest.split_once(".bn.running_")?;
    let is_mean = match suffix {
        "mean" => true,
        "var" => false,
        _ => return None,
    };
    Some((
        block.parse::<usize>().ok()?.checked_sub(1)?,
        cbr.parse::<usize>().ok()?.checked_sub(1)?,
        is_mean,
    ))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}
