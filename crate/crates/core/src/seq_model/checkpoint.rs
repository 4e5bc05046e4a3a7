//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `TYPRNK01`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::model::{tensor_specs, Dims, SeqModelParams};
use super::tensor::Tensor;
use super::vocab::Vocab;
use super::ModelError;

const MAGIC: &[u8; 8] = b"TYPRNK01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dims: Dims,
    vocab: Vocab,
    seed: u64,
    tensors: Vec<TensorHeader>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint(params: &SeqModelParams, out: &mut impl Write) -> Result<(), ModelError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dims: params.dims,
        vocab: params.vocab.clone(),
        seed: params.seed,
        tensors: params
            .specs()
            .into_iter()
            .map(|s| TensorHeader { name: s.name, rows: s.rows, cols: s.cols })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.n_params() * 4);
    for t in &params.tensors {
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn checkpoint_bytes(params: &SeqModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(params, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<SeqModelParams, ModelError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(bad("header too large"));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let mut header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    header.vocab.reindex();
    let expected = tensor_specs(&header.dims, header.vocab.size());
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|(e, t)| e.name != t.name || e.rows != t.rows || e.cols != t.cols)
    {
        return Err(bad("tensor table does not match dims and vocabulary"));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for spec in &expected {
        let mut raw = vec![0u8; spec.rows * spec.cols * 4];
        input.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        tensors.push(Tensor::from_vec(spec.rows, spec.cols, data));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(SeqModelParams { vocab: header.vocab, dims: header.dims, tensors, seed: header.seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reload_is_bit_exact() {
        let vocab = Vocab::build(["def f(x: int) -> str: pass"], 1, 4);
        let dims = Dims { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq_len: 16 };
        let p = SeqModelParams::init(vocab, dims, 11);
        let bytes = checkpoint_bytes(&p);
        let q = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(bytes, checkpoint_bytes(&q));
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&mut &b"NOTACKPT\0\0\0\0\0\0\0\0"[..]).is_err());
        let vocab = Vocab::build(["a"], 1, 0);
        let dims = Dims { d_model: 4, n_layers: 1, n_heads: 1, d_ff: 4, max_seq_len: 4 };
        let mut bytes = checkpoint_bytes(&SeqModelParams::init(vocab, dims, 0));
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint(&mut bytes.as_slice()).is_err());
    }
}
