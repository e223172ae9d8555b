//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RCAP" | version: u32 | provenance: u32 len + UTF-8
//! | block count: u32
//! | per block: name (u32 len + UTF-8) | ndim: u32 | dims: u32 × ndim | f32 × Π dims
//! | CRC-32 of everything above: u32
//! ```
//!
//! Architecture and optimizer metadata travel as ordinary blocks. Small
//! integers are stored as exact f32 values; 64-bit scalars are split into two
//! raw 32-bit words and carried bit-for-bit through `f32::from_bits`.

use std::path::Path;

use super::adam::{AdamConfig, OptimizerState};
use super::network::{Activation, Network, ParamBlock};
use super::{ApproxError, Result};

pub const MAGIC: &[u8; 4] = b"RCAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub provenance: String,
    pub blocks: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self {
            provenance: provenance.into(),
            blocks: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, &self.provenance);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            write_str(&mut out, &b.name);
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &b.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ApproxError::Format("bad magic".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(ApproxError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let provenance = r.string()?;
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1024));
        for _ in 0..n_blocks {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or(ApproxError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push(ParamBlock { name, shape, data });
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(ApproxError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(ApproxError::ChecksumMismatch {
                stored,
                computed: actual,
            });
        }
        Ok(Self { provenance, blocks })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ApproxError::Io(e.to_string()))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ApproxError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn block(&self, name: &str) -> Result<&ParamBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| ApproxError::Format(format!("missing block {name}")))
    }

    /// Appends a network's architecture and parameters under `prefix`.
    pub fn push_network(&mut self, prefix: &str, net: &Network) {
        let mut arch = vec![net.sizes().len() as f32];
        arch.extend(net.sizes().iter().map(|&s| s as f32));
        arch.extend(net.activations().iter().map(|a| a.code() as f32));
        self.blocks.push(ParamBlock::new(
            format!("{prefix}arch"),
            vec![arch.len()],
            arch,
        ));
        for b in net.blocks() {
            let mut b = b.clone();
            b.name = format!("{prefix}{}", b.name);
            self.blocks.push(b);
        }
    }

    pub fn network(&self, prefix: &str) -> Result<Network> {
        let arch = &self.block(&format!("{prefix}arch"))?.data;
        let n = *arch.first().ok_or_else(|| bad_arch(prefix))? as usize;
        if n < 2 || arch.len() != 1 + n + (n - 1) {
            return Err(bad_arch(prefix));
        }
        let sizes: Vec<usize> = arch[1..=n].iter().map(|&s| s as usize).collect();
        let activations = arch[n + 1..]
            .iter()
            .map(|&c| Activation::from_code(c as u32).ok_or_else(|| bad_arch(prefix)))
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::new();
        for i in 0..n - 1 {
            for kind in ["weight", "bias"] {
                let mut b = self.block(&format!("{prefix}layer{i}.{kind}"))?.clone();
                b.name = format!("layer{i}.{kind}");
                blocks.push(b);
            }
        }
        Network::from_parts(sizes, activations, blocks)
    }

    /// Appends optimizer moments and scalars under `prefix`.
    pub fn push_optimizer(&mut self, prefix: &str, net: &Network, state: &OptimizerState) {
        let mut meta = split_u64(state.step).to_vec();
        for x in [
            state.config.lr,
            state.config.beta1,
            state.config.beta2,
            state.config.eps,
        ] {
            meta.extend(split_u64(x.to_bits()));
        }
        self.blocks.push(ParamBlock::new(
            format!("{prefix}adam.meta"),
            vec![meta.len()],
            meta,
        ));
        for (i, b) in net.blocks().iter().enumerate() {
            self.blocks.push(ParamBlock::new(
                format!("{prefix}adam.m.{}", b.name),
                b.shape.clone(),
                state.first_moment[i].clone(),
            ));
            self.blocks.push(ParamBlock::new(
                format!("{prefix}adam.v.{}", b.name),
                b.shape.clone(),
                state.second_moment[i].clone(),
            ));
        }
    }

    pub fn optimizer(&self, prefix: &str, net: &Network) -> Result<OptimizerState> {
        let meta = &self.block(&format!("{prefix}adam.meta"))?.data;
        if meta.len() != 10 {
            return Err(ApproxError::Format("optimizer metadata length".into()));
        }
        let word = |i: usize| join_u64(meta[i], meta[i + 1]);
        let config = AdamConfig {
            lr: f64::from_bits(word(2)),
            beta1: f64::from_bits(word(4)),
            beta2: f64::from_bits(word(6)),
            eps: f64::from_bits(word(8)),
        };
        let mut first_moment = Vec::new();
        let mut second_moment = Vec::new();
        for b in net.blocks() {
            let m = self.block(&format!("{prefix}adam.m.{}", b.name))?;
            let v = self.block(&format!("{prefix}adam.v.{}", b.name))?;
            if m.shape != b.shape || v.shape != b.shape {
                return Err(ApproxError::ShapeMismatch(format!(
                    "moments for {}",
                    b.name
                )));
            }
            first_moment.push(m.data.clone());
            second_moment.push(v.data.clone());
        }
        Ok(OptimizerState {
            config,
            step: word(0),
            first_moment,
            second_moment,
        })
    }
}

/// Serializes a single network with its optimizer state.
pub fn encode_network_checkpoint(
    net: &Network,
    state: &OptimizerState,
    provenance: &str,
) -> Vec<u8> {
    let mut ckpt = Checkpoint::new(provenance);
    ckpt.push_network("", net);
    ckpt.push_optimizer("", net, state);
    ckpt.to_bytes()
}

pub fn decode_network_checkpoint(bytes: &[u8]) -> Result<(Network, OptimizerState, String)> {
    let ckpt = Checkpoint::from_bytes(bytes)?;
    let net = ckpt.network("")?;
    let state = ckpt.optimizer("", &net)?;
    Ok((net, state, ckpt.provenance))
}

fn bad_arch(prefix: &str) -> ApproxError {
    ApproxError::Format(format!("malformed architecture block {prefix}arch"))
}

fn split_u64(x: u64) -> [f32; 2] {
    [f32::from_bits(x as u32), f32::from_bits((x >> 32) as u32)]
}

fn join_u64(lo: f32, hi: f32) -> u64 {
    lo.to_bits() as u64 | ((hi.to_bits() as u64) << 32)
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(ApproxError::Truncated)?;
        if end > self.bytes.len() {
            return Err(ApproxError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ApproxError::Format("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{Gradients, SquaredError};

    fn trained_pair() -> (Network, OptimizerState) {
        let mut net = Network::new(&[3, 5, 2], Activation::Tanh, Activation::Identity, 9).unwrap();
        let mut state = OptimizerState::new(&net, AdamConfig::default());
        for i in 0..3 {
            let x = vec![i as f64 * 0.1, -0.2, 0.5];
            let (_, g) = net
                .loss_and_gradients(&[(
                    x,
                    SquaredError {
                        target: vec![1.0, -1.0],
                    },
                )])
                .unwrap();
            state.step(&mut net, &g).unwrap();
        }
        (net, state)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (net, state) = trained_pair();
        let bytes = encode_network_checkpoint(&net, &state, "recap-2 init=pretrain");
        let (net2, state2, prov) = decode_network_checkpoint(&bytes).unwrap();
        assert_eq!(prov, "recap-2 init=pretrain");
        for (a, b) in net.blocks().iter().zip(net2.blocks()) {
            let bits_a: Vec<u32> = a.data.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(state, state2);
        assert_eq!(net, net2);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let (net, state) = trained_pair();
        let mut bytes = encode_network_checkpoint(&net, &state, "pretrain");
        bytes[0] = b'X';
        assert!(matches!(
            decode_network_checkpoint(&bytes),
            Err(ApproxError::Format(_))
        ));
    }

    #[test]
    fn wrong_version_is_a_format_error() {
        let (net, state) = trained_pair();
        let mut bytes = encode_network_checkpoint(&net, &state, "pretrain");
        bytes[4] = 7;
        assert!(matches!(
            decode_network_checkpoint(&bytes),
            Err(ApproxError::Format(_))
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let (net, state) = trained_pair();
        let bytes = encode_network_checkpoint(&net, &state, "pretrain");
        for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(ApproxError::Truncated)
            ));
        }
    }

    #[test]
    fn flipped_parameter_byte_fails_checksum() {
        let (net, state) = trained_pair();
        let bytes = encode_network_checkpoint(&net, &state, "pretrain");
        // locate the payload of layer0.weight by its name
        let name = b"layer0.weight";
        let at = bytes
            .windows(name.len())
            .position(|w| w == name)
            .expect("block name present");
        // name, ndim, two dims, then the first float
        let payload = at + name.len() + 4 + 8;
        let mut corrupt = bytes.clone();
        corrupt[payload + 1] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&corrupt),
            Err(ApproxError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn gradients_shape_survives_reload() {
        let (net, _) = trained_pair();
        let mut ckpt = Checkpoint::new("x");
        ckpt.push_network("trunk.", &net);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes())
            .unwrap()
            .network("trunk.")
            .unwrap();
        assert_eq!(Gradients::zeros_like(&back).blocks.len(), 4);
    }
}
