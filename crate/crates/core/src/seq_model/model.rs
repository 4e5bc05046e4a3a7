//! Pre-LayerNorm transformer encoder-decoder.
//!
//! Token embeddings are shared between encoder, decoder and the output
//! projection; positions use separate learned tables. Every forward pass goes through [`Graph`], so the
//! same code computes inference values and training gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::{cosine, softmax, Tensor};
use super::vocab::{Vocab, BOS, EOS};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_model: usize,
    /// Layers in the encoder and, separately, in the decoder.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { d_model: 64, n_layers: 2, n_heads: 4, d_ff: 256, max_seq_len: 256 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct LnIdx {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: LnIdx,
    attn: AttnIdx,
    ln2: LnIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: LnIdx,
    self_attn: AttnIdx,
    ln2: LnIdx,
    cross: AttnIdx,
    ln3: LnIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    enc_ln: LnIdx,
    dec: Vec<DecLayer>,
    dec_ln: LnIdx,
    head_b: usize,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(TensorSpec { name, rows, cols, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.add(name, fan_in, fan_out, Init::Uniform(1.0 / (fan_in as f64).sqrt()))
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{prefix}.g"), 1, d, Init::Ones),
            b: self.add(format!("{prefix}.b"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.linear(format!("{prefix}.wq"), d, d),
            wk: self.linear(format!("{prefix}.wk"), d, d),
            wv: self.linear(format!("{prefix}.wv"), d, d),
            wo: self.linear(format!("{prefix}.wo"), d, d),
            bo: self.add(format!("{prefix}.bo"), 1, d, Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIdx {
        FfnIdx {
            w1: self.linear(format!("{prefix}.w1"), d, d_ff),
            b1: self.add(format!("{prefix}.b1"), 1, d_ff, Init::Zeros),
            w2: self.linear(format!("{prefix}.w2"), d_ff, d),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }
}

fn build_layout(dims: &Dims, vocab_size: usize) -> (Layout, Vec<TensorSpec>) {
    let d = dims.d_model;
    let emb = (3.0 / d as f64).sqrt();
    let mut b = LayoutBuilder { specs: Vec::new() };
    let tok_emb = b.add("tok_emb".into(), vocab_size, d, Init::Uniform(emb));
    let enc_pos = b.add("enc_pos".into(), dims.max_seq_len, d, Init::Uniform(emb));
    let dec_pos = b.add("dec_pos".into(), dims.max_seq_len, d, Init::Uniform(emb));
    let enc = (0..dims.n_layers)
        .map(|l| EncLayer {
            ln1: b.ln(&format!("enc.{l}.ln1"), d),
            attn: b.attn(&format!("enc.{l}.attn"), d),
            ln2: b.ln(&format!("enc.{l}.ln2"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, dims.d_ff),
        })
        .collect();
    let enc_ln = b.ln("enc.ln", d);
    let dec = (0..dims.n_layers)
        .map(|l| DecLayer {
            ln1: b.ln(&format!("dec.{l}.ln1"), d),
            self_attn: b.attn(&format!("dec.{l}.self"), d),
            ln2: b.ln(&format!("dec.{l}.ln2"), d),
            cross: b.attn(&format!("dec.{l}.cross"), d),
            ln3: b.ln(&format!("dec.{l}.ln3"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, dims.d_ff),
        })
        .collect();
    let dec_ln = b.ln("dec.ln", d);
    let head_b = b.add("head.b".into(), 1, vocab_size, Init::Zeros);
    let layout = Layout { tok_emb, enc_pos, dec_pos, enc, enc_ln, dec, dec_ln, head_b };
    (layout, b.specs)
}

/// Names and shapes of every tensor, in storage order.
pub fn tensor_specs(dims: &Dims, vocab_size: usize) -> Vec<TensorSpec> {
    build_layout(dims, vocab_size).1
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModelParams {
    pub vocab: Vocab,
    pub dims: Dims,
    pub tensors: Vec<Tensor>,
    pub seed: u64,
}

/// Encoder output plus the per-layer cross-attention keys and values.
struct Memory {
    h: NodeId,
    kv: Vec<(NodeId, NodeId)>,
}

impl SeqModelParams {
    /// Fresh weights: linear maps uniform in `±1/sqrt(fan_in)`, token and
    /// position embeddings in `±sqrt(3/d)`, LayerNorm gains one and all
    /// biases zero. Values are rounded to `f32` so that a saved checkpoint reloads bit-exactly.
    pub fn init(vocab: Vocab, dims: Dims, seed: u64) -> Self {
        assert!(dims.d_model.is_multiple_of(dims.n_heads), "d_model must be divisible by n_heads");
        let specs = tensor_specs(&dims, vocab.size());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Uniform(a) => {
                    Tensor::from_vec(s.rows, s.cols, (0..s.rows * s.cols).map(|_| rng.gen_range(-a..a)).collect())
                }
                Init::Ones => Tensor::filled(s.rows, s.cols, 1.0),
                Init::Zeros => Tensor::zeros(s.rows, s.cols),
            })
            .collect();
        let mut p = SeqModelParams { vocab, dims, tensors, seed };
        p.snap_to_f32();
        p
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        tensor_specs(&self.dims, self.vocab.size())
    }

    fn layout(&self) -> Layout {
        build_layout(&self.dims, self.vocab.size()).0
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.specs().iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.specs().iter().position(|s| s.name == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn snap_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.dims.max_seq_len {
            Err(ModelError::SequenceTooLong { len, max: self.dims.max_seq_len })
        } else {
            Ok(())
        }
    }

    /// Tokenizes `text` for the encoder, truncating around `<TYPE>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.vocab.tokenize(text, self.dims.max_seq_len)
    }

    /// Ids of a type text as a decoder target: pieces followed by EOS.
    pub fn type_target(&self, type_text: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode_pieces(type_text);
        ids.push(EOS);
        ids
    }

    // ---- graph construction ----

    fn attention(&self, g: &mut Graph, a: &AttnIdx, q_in: NodeId, k: NodeId, v: NodeId, causal: bool) -> NodeId {
        let wq = g.param(a.wq);
        let q = g.matmul(q_in, wq);
        let dh = self.dims.d_model / self.dims.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<NodeId> = (0..self.dims.n_heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let s = g.matmul_t(qh, kh);
                let s = g.scale(s, scale);
                let p = g.softmax(s, causal);
                g.matmul(p, vh)
            })
            .collect();
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let wo = g.param(a.wo);
        let out = g.matmul(ctx, wo);
        let bo = g.param(a.bo);
        g.add_row(out, bo)
    }

    fn self_attention(&self, g: &mut Graph, a: &AttnIdx, x: NodeId, causal: bool) -> NodeId {
        let (wk, wv) = (g.param(a.wk), g.param(a.wv));
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        self.attention(g, a, x, k, v, causal)
    }

    fn layer_norm(g: &mut Graph, ln: &LnIdx, x: NodeId) -> NodeId {
        let (gamma, beta) = (g.param(ln.g), g.param(ln.b));
        g.layer_norm(x, gamma, beta)
    }

    fn ffn(g: &mut Graph, f: &FfnIdx, x: NodeId) -> NodeId {
        let (w1, b1, w2, b2) = (g.param(f.w1), g.param(f.b1), g.param(f.w2), g.param(f.b2));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }

    fn embed(g: &mut Graph, lay: &Layout, pos_table: usize, ids: &[usize]) -> NodeId {
        let table = g.param(lay.tok_emb);
        let x = g.embed(table, ids);
        let pos = g.param(pos_table);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.embed(pos, &positions);
        let x = g.add(x, p);
        g.dropout(x)
    }

    fn encoder_graph(&self, g: &mut Graph, lay: &Layout, ids: &[usize]) -> NodeId {
        let mut x = Self::embed(g, lay, lay.enc_pos, ids);
        for l in &lay.enc {
            let h = Self::layer_norm(g, &l.ln1, x);
            let a = self.self_attention(g, &l.attn, h, false);
            let a = g.dropout(a);
            x = g.add(x, a);
            let h = Self::layer_norm(g, &l.ln2, x);
            let f = Self::ffn(g, &l.ffn, h);
            let f = g.dropout(f);
            x = g.add(x, f);
        }
        Self::layer_norm(g, &lay.enc_ln, x)
    }

    fn memory(g: &mut Graph, lay: &Layout, h: NodeId) -> Memory {
        let kv = lay
            .dec
            .iter()
            .map(|l| {
                let (wk, wv) = (g.param(l.cross.wk), g.param(l.cross.wv));
                (g.matmul(h, wk), g.matmul(h, wv))
            })
            .collect();
        Memory { h, kv }
    }

    /// Final decoder states for decoder input `ids` (starting with BOS).
    fn decoder_graph(&self, g: &mut Graph, lay: &Layout, mem: &Memory, ids: &[usize]) -> NodeId {
        let mut x = Self::embed(g, lay, lay.dec_pos, ids);
        for (l, &(k, v)) in lay.dec.iter().zip(&mem.kv) {
            let h = Self::layer_norm(g, &l.ln1, x);
            let a = self.self_attention(g, &l.self_attn, h, true);
            let a = g.dropout(a);
            x = g.add(x, a);
            let h = Self::layer_norm(g, &l.ln2, x);
            let c = self.attention(g, &l.cross, h, k, v, false);
            let c = g.dropout(c);
            x = g.add(x, c);
            let h = Self::layer_norm(g, &l.ln3, x);
            let f = Self::ffn(g, &l.ffn, h);
            let f = g.dropout(f);
            x = g.add(x, f);
        }
        Self::layer_norm(g, &lay.dec_ln, x)
    }

    fn logits_graph(g: &mut Graph, lay: &Layout, states: NodeId) -> NodeId {
        // the output projection is the transposed token embedding table
        let (w, b) = (g.param(lay.tok_emb), g.param(lay.head_b));
        let z = g.matmul_t(states, w);
        g.add_row(z, b)
    }

    fn decoder_input(target: &[usize]) -> Vec<usize> {
        std::iter::once(BOS).chain(target.iter().copied()).collect()
    }

    // ---- inference ----

    /// Encoder hidden states, one row per input id.
    pub fn encode(&self, ids: &[usize]) -> Result<Tensor, ModelError> {
        self.check_len(ids.len())?;
        let lay = self.layout();
        let mut g = Graph::new(&self.tensors);
        let h = self.encoder_graph(&mut g, &lay, ids);
        Ok(g.value(h).clone())
    }

    /// A decoder bound to one encoder output; reuses cross-attention keys
    /// and values across calls.
    pub fn decoder<'a>(&'a self, hidden: &Tensor) -> Decoder<'a> {
        let lay = self.layout();
        let mut g = Graph::new(&self.tensors);
        let h = g.input(hidden.clone());
        let mem = Self::memory(&mut g, &lay, h);
        let mark = g.mark();
        Decoder { params: self, lay, graph: g, mem, mark }
    }

    /// Next-token distribution after `prefix` (which starts with BOS).
    pub fn decode_step(&self, hidden: &Tensor, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        self.decoder(hidden).step(prefix)
    }

    /// Product of teacher-forced probabilities of `target` (include EOS to
    /// score a complete sequence).
    pub fn sequence_likelihood(&self, hidden: &Tensor, target: &[usize]) -> Result<f64, ModelError> {
        Ok(self.decoder(hidden).step_probs(target)?.iter().product())
    }

    /// Generative likelihood of `type_text` filling the placeholder in `func_text`.
    pub fn likelihood(&self, func_text: &str, type_text: &str) -> Result<f64, ModelError> {
        let h = self.encode(&self.tokenize(func_text))?;
        self.sequence_likelihood(&h, &self.type_target(type_text))
    }

    /// Cosine between the mean encoder state and the mean decoder state over
    /// `[BOS, type ids...]`.
    pub fn similarity_ids(&self, hidden: &Tensor, type_ids: &[usize]) -> Result<f64, ModelError> {
        let states = self.decoder(hidden).states(type_ids)?;
        Ok(cosine(&hidden.mean_rows(), &states.mean_rows()))
    }

    pub fn similarity(&self, func_text: &str, type_text: &str) -> Result<f64, ModelError> {
        let h = self.encode(&self.tokenize(func_text))?;
        self.similarity_ids(&h, &self.vocab.encode_pieces(type_text))
    }

    // ---- training losses ----

    fn generative_graph(&self, g: &mut Graph, enc_ids: &[usize], target: &[usize]) -> Result<NodeId, ModelError> {
        self.check_len(enc_ids.len())?;
        self.check_len(target.len())?;
        let lay = self.layout();
        let h = self.encoder_graph(g, &lay, enc_ids);
        let mem = Self::memory(g, &lay, h);
        let s = self.decoder_graph(g, &lay, &mem, &Self::decoder_input(&target[..target.len() - 1]));
        let logits = Self::logits_graph(g, &lay, s);
        Ok(g.cross_entropy(logits, target))
    }

    /// Summed next-token cross-entropy of `target` (ending in EOS).
    pub fn generative_loss(&self, enc_ids: &[usize], target: &[usize]) -> Result<f64, ModelError> {
        let mut g = Graph::new(&self.tensors);
        let loss = self.generative_graph(&mut g, enc_ids, target)?;
        Ok(g.value(loss).data[0])
    }

    pub fn generative_loss_grad(&self, enc_ids: &[usize], target: &[usize]) -> Result<(f64, Vec<Tensor>), ModelError> {
        self.generative_loss_grad_dropout(enc_ids, target, 0.0, 0)
    }

    /// As [`Self::generative_loss_grad`], with residual and embedding dropout
    /// at `rate` drawn from `seed`.
    pub fn generative_loss_grad_dropout(
        &self,
        enc_ids: &[usize],
        target: &[usize],
        rate: f64,
        seed: u64,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut g = Graph::new(&self.tensors).with_dropout(rate, seed);
        let loss = self.generative_graph(&mut g, enc_ids, target)?;
        Ok((g.value(loss).data[0], g.backward(loss)))
    }

    fn contrastive_graph(
        &self,
        g: &mut Graph,
        enc_ids: &[usize],
        positive: &[usize],
        negatives: &[Vec<usize>],
    ) -> Result<NodeId, ModelError> {
        if negatives.is_empty() {
            return Err(ModelError::EmptyNegatives);
        }
        self.check_len(enc_ids.len())?;
        let lay = self.layout();
        let h = self.encoder_graph(g, &lay, enc_ids);
        let anchor = g.mean_rows(h);
        let mem = Self::memory(g, &lay, h);
        let mut sims = Vec::with_capacity(negatives.len() + 1);
        for ids in std::iter::once(positive).chain(negatives.iter().map(Vec::as_slice)) {
            self.check_len(ids.len() + 1)?;
            let s = self.decoder_graph(g, &lay, &mem, &Self::decoder_input(ids));
            let m = g.mean_rows(s);
            sims.push(g.cosine(anchor, m));
        }
        let row = g.concat_cols(&sims);
        Ok(g.cross_entropy(row, &[0]))
    }

    /// InfoNCE loss of one anchor against a positive and its negatives
    /// (type ids without sentinels).
    pub fn contrastive_loss(
        &self,
        enc_ids: &[usize],
        positive: &[usize],
        negatives: &[Vec<usize>],
    ) -> Result<f64, ModelError> {
        let mut g = Graph::new(&self.tensors);
        let loss = self.contrastive_graph(&mut g, enc_ids, positive, negatives)?;
        Ok(g.value(loss).data[0])
    }

    pub fn contrastive_loss_grad(
        &self,
        enc_ids: &[usize],
        positive: &[usize],
        negatives: &[Vec<usize>],
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        self.contrastive_loss_grad_dropout(enc_ids, positive, negatives, 0.0, 0)
    }

    pub fn contrastive_loss_grad_dropout(
        &self,
        enc_ids: &[usize],
        positive: &[usize],
        negatives: &[Vec<usize>],
        rate: f64,
        seed: u64,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut g = Graph::new(&self.tensors).with_dropout(rate, seed);
        let loss = self.contrastive_graph(&mut g, enc_ids, positive, negatives)?;
        Ok((g.value(loss).data[0], g.backward(loss)))
    }
}

pub struct Decoder<'a> {
    params: &'a SeqModelParams,
    lay: Layout,
    graph: Graph<'a>,
    mem: Memory,
    mark: usize,
}

impl Decoder<'_> {
    /// Final decoder states for `[BOS, type_ids...]`.
    pub fn states(&mut self, type_ids: &[usize]) -> Result<Tensor, ModelError> {
        self.params.check_len(type_ids.len() + 1)?;
        let input = SeqModelParams::decoder_input(type_ids);
        let s = self.params.decoder_graph(&mut self.graph, &self.lay, &self.mem, &input);
        let out = self.graph.value(s).clone();
        self.graph.truncate(self.mark);
        Ok(out)
    }

    /// Next-token distribution after `prefix`, which must start with BOS.
    pub fn step(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        assert_eq!(prefix.first(), Some(&BOS), "decoder prefix must start with BOS");
        self.params.check_len(prefix.len())?;
        let s = self.params.decoder_graph(&mut self.graph, &self.lay, &self.mem, prefix);
        let logits = SeqModelParams::logits_graph(&mut self.graph, &self.lay, s);
        let z = self.graph.value(logits);
        let probs = softmax(z.row(z.rows - 1));
        self.graph.truncate(self.mark);
        Ok(probs)
    }

    /// Probability of each `target[t]` given `BOS, target[..t]`, from one
    /// teacher-forced pass.
    pub fn step_probs(&mut self, target: &[usize]) -> Result<Vec<f64>, ModelError> {
        if target.is_empty() {
            return Ok(Vec::new());
        }
        self.params.check_len(target.len())?;
        let input = SeqModelParams::decoder_input(&target[..target.len() - 1]);
        let s = self.params.decoder_graph(&mut self.graph, &self.lay, &self.mem, &input);
        let logits = SeqModelParams::logits_graph(&mut self.graph, &self.lay, s);
        let z = self.graph.value(logits);
        let probs = target.iter().enumerate().map(|(t, &id)| softmax(z.row(t))[id]).collect();
        self.graph.truncate(self.mark);
        Ok(probs)
    }

    /// Mean encoder state this decoder attends to.
    pub fn memory_mean(&self) -> Vec<f64> {
        self.graph.value(self.mem.h).mean_rows()
    }
}
