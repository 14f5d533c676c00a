//! Forward pass: pre-norm transformer encoder, mean-pool bottleneck and
//! causal decoder over packed (unpadded) batches.

use std::rc::Rc;

use rand::Rng as _;

use super::{Context, CrossAttnIdx, EmbeddingVector, FeedForwardIdx, LayerNormIdx, Model, SelfAttnIdx};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{log_softmax, Graph, Real, Segment, Tensor, Var};

/// One supervised example: the decoder is conditioned on `input` and scored on `target`.
#[derive(Debug, Clone, Copy)]
pub struct TokenPair<'a> {
    pub input: &'a [TokenId],
    pub target: &'a [TokenId],
}

/// Teacher-forced log-likelihood of a sentence, with its per-position terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihood {
    pub total: f64,
    pub per_token: Vec<f64>,
}

pub(crate) enum Memory<'c> {
    Vectors(&'c [&'c EmbeddingVector]),
    Sources(&'c [&'c [TokenId]]),
}

/// Records one forward pass of a model on a graph.
pub(crate) struct Forward<'m, T: Real> {
    pub g: Graph<'m, T>,
    model: &'m Model<T>,
    p: Vec<Var>,
    dropout: Option<(T, Rng)>,
}

fn segments(lens: impl IntoIterator<Item = usize>) -> Rc<Vec<Segment>> {
    let mut start = 0;
    Rc::new(
        lens.into_iter()
            .map(|len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect(),
    )
}

impl<'m, T: Real> Forward<'m, T> {
    pub fn new(model: &'m Model<T>, dropout_rng: Option<Rng>) -> Self {
        let mut g = Graph::new();
        let p = model.params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let rate = model.config().dropout_rate;
        let dropout = dropout_rng.filter(|_| rate > 0.0).map(|r| (T::from_f64(rate), r));
        Self { g, model, p, dropout }
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Var {
        let h = self.g.matmul(x, self.p[w]);
        self.g.add_row(h, self.p[b])
    }

    fn ln(&mut self, x: Var, idx: LayerNormIdx) -> Var {
        self.g.layer_norm(x, self.p[idx.gain], self.p[idx.bias])
    }

    fn drop(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let keep = T::ONE / (T::ONE - *rate);
        let p = rate.to_f64();
        let mask = (0..self.g.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep })
            .collect();
        self.g.dropout(x, mask)
    }

    /// Scaled token embeddings plus sinusoidal positions for packed sequences.
    fn embed(&mut self, table: usize, ids: &[TokenId], positions: &[usize]) -> Var {
        let d = self.model.config().d_model;
        let e = self.g.embed(self.p[table], ids);
        let e = self.g.scale(e, T::from_f64((d as f64).sqrt()));
        let mut pos = Tensor::zeros(positions.len(), d);
        for (r, &p) in positions.iter().enumerate() {
            pos.row_mut(r).copy_from_slice(self.model.positions.row(p));
        }
        let pos = self.g.input(pos);
        let x = self.g.add(e, pos);
        self.drop(x)
    }

    fn self_attention(&mut self, x: Var, idx: SelfAttnIdx, segs: &Rc<Vec<Segment>>, causal: bool) -> Var {
        let cfg = self.model.config();
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let qkv = self.linear(x, idx.w_qkv, idx.b_qkv);
        let a = self.g.attention((qkv, 0), (qkv, d), (qkv, 2 * d), d, heads, segs.clone(), segs.clone(), causal);
        let o = self.linear(a, idx.w_o, idx.b_o);
        self.drop(o)
    }

    fn cross_attention(
        &mut self,
        x: Var,
        idx: CrossAttnIdx,
        q_segs: &Rc<Vec<Segment>>,
        memory: Var,
        mem_segs: &Rc<Vec<Segment>>,
    ) -> Var {
        let cfg = self.model.config();
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let q = self.linear(x, idx.w_q, idx.b_q);
        let kv = self.linear(memory, idx.w_kv, idx.b_kv);
        let a = self.g.attention((q, 0), (kv, 0), (kv, d), d, heads, q_segs.clone(), mem_segs.clone(), false);
        let o = self.linear(a, idx.w_o, idx.b_o);
        self.drop(o)
    }

    fn feed_forward(&mut self, x: Var, idx: FeedForwardIdx) -> Var {
        let h = self.linear(x, idx.w1, idx.b1);
        let h = self.g.gelu(h);
        let o = self.linear(h, idx.w2, idx.b2);
        self.drop(o)
    }

    /// Encoder states for packed source sentences (EOS included, no padding).
    pub fn encoder(&mut self, srcs: &[&[TokenId]]) -> (Var, Rc<Vec<Segment>>) {
        let segs = segments(srcs.iter().map(|s| s.len()));
        let ids: Vec<TokenId> = srcs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = srcs.iter().flat_map(|s| 0..s.len()).collect();
        let layout = &self.model.layout;
        let mut x = self.embed(layout.enc_embed, &ids, &positions);
        for layer in &layout.enc_layers {
            let h = self.ln(x, layer.ln_attn);
            let a = self.self_attention(h, layer.attn, &segs, false);
            x = self.g.add(x, a);
            let h = self.ln(x, layer.ln_ff);
            let f = self.feed_forward(h, layer.ff);
            x = self.g.add(x, f);
        }
        (self.ln(x, layout.enc_ln), segs)
    }

    /// Mean over token positions followed by the bottleneck projection.
    pub fn bottleneck(&mut self, enc: Var, segs: Rc<Vec<Segment>>) -> Var {
        let idx = self.model.layout.bottleneck.expect("bottleneck enabled");
        let pooled = self.g.segment_mean(enc, segs);
        self.g.matmul(pooled, self.p[idx.proj])
    }

    fn vector_memory(&mut self, e: Var) -> Var {
        let idx = self.model.layout.bottleneck.expect("bottleneck enabled");
        self.linear(e, idx.up_w, idx.up_b)
    }

    /// Decoder memory and its per-sequence segments.
    pub fn memory(&mut self, mem: &Memory<'_>) -> (Var, Rc<Vec<Segment>>) {
        match mem {
            Memory::Vectors(vs) => {
                let d = self.model.config().bottleneck_dim;
                let mut t = Tensor::zeros(vs.len(), d);
                for (r, v) in vs.iter().enumerate() {
                    for (o, &x) in t.row_mut(r).iter_mut().zip(v.values()) {
                        *o = T::from_f64(x);
                    }
                }
                let e = self.g.input(t);
                let m = self.vector_memory(e);
                (m, segments(vs.iter().map(|_| 1)))
            }
            Memory::Sources(srcs) => {
                let (enc, segs) = self.encoder(srcs);
                if self.model.layout.bottleneck.is_some() {
                    let e = self.bottleneck(enc, segs.clone());
                    let m = self.vector_memory(e);
                    (m, segments(srcs.iter().map(|_| 1)))
                } else {
                    (enc, segs)
                }
            }
        }
    }

    /// Decoder hidden states; `inputs[i]` starts with the start row id.
    /// Query sequence `i` reads memory segment `mem_of[i]`.
    pub fn decoder(
        &mut self,
        memory: Var,
        mem_segs: &Rc<Vec<Segment>>,
        mem_of: &[usize],
        inputs: &[Vec<TokenId>],
    ) -> (Var, Rc<Vec<Segment>>) {
        let segs = segments(inputs.iter().map(Vec::len));
        let mem_segs = Rc::new(mem_of.iter().map(|&m| mem_segs[m]).collect::<Vec<_>>());
        let ids: Vec<TokenId> = inputs.iter().flatten().copied().collect();
        let positions: Vec<usize> = inputs.iter().flat_map(|s| 0..s.len()).collect();
        let layout = &self.model.layout;
        let mut x = self.embed(layout.dec_embed, &ids, &positions);
        for layer in &layout.dec_layers {
            let h = self.ln(x, layer.ln_self);
            let a = self.self_attention(h, layer.self_attn, &segs, true);
            x = self.g.add(x, a);
            let h = self.ln(x, layer.ln_cross);
            let c = self.cross_attention(h, layer.cross, &segs, memory, &mem_segs);
            x = self.g.add(x, c);
            let h = self.ln(x, layer.ln_ff);
            let f = self.feed_forward(h, layer.ff);
            x = self.g.add(x, f);
        }
        (x, segs)
    }

    /// Final layer norm and output projection.
    pub fn logits(&mut self, hidden: Var) -> Var {
        let layout = &self.model.layout;
        let (ln, w, b) = (layout.dec_ln, layout.out_w, layout.out_b);
        let h = self.ln(hidden, ln);
        self.linear(h, w, b)
    }

    /// Teacher-forced logits for each pair: one row per target position.
    pub fn teacher_forced(&mut self, pairs: &[TokenPair<'_>]) -> Var {
        let srcs: Vec<&[TokenId]> = pairs.iter().map(|p| p.input).collect();
        let (memory, mem_segs) = self.memory(&Memory::Sources(&srcs));
        let start = self.model.config().vocab_size as TokenId;
        let inputs: Vec<Vec<TokenId>> = pairs.iter().map(|p| shifted(start, p.target)).collect();
        let mem_of: Vec<usize> = (0..pairs.len()).collect();
        let (h, _) = self.decoder(memory, &mem_segs, &mem_of, &inputs);
        self.logits(h)
    }
}

fn shifted(start: TokenId, target: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(target.len());
    v.push(start);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

impl<T: Real> Model<T> {
    pub(crate) fn check_tokens(&self, ids: &[TokenId], max: usize, what: &str) -> Result<()> {
        let v = self.config().vocab_size;
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Data(format!("{what}: token id {bad} >= vocab size {v}")));
        }
        if ids.len() > max {
            return Err(Error::Data(format!("{what}: length {} exceeds {max}", ids.len())));
        }
        Ok(())
    }

    pub(crate) fn check_pairs(&self, pairs: &[TokenPair<'_>]) -> Result<()> {
        let max = self.config().max_len;
        for p in pairs {
            self.check_tokens(p.input, max, "input")?;
            self.check_tokens(p.target, max, "target")?;
            if p.input.is_empty() || p.target.is_empty() {
                return Err(Error::Data("empty token sequence (sentences end with EOS)".into()));
            }
        }
        Ok(())
    }

    fn require_bottleneck(&self, op: &str) -> Result<()> {
        if self.config().has_bottleneck() {
            Ok(())
        } else {
            Err(Error::Unsupported(format!(
                "{op} needs a bottleneck (bottleneck_dim > 0); use encode_full"
            )))
        }
    }

    fn check_context(&self, ctx: &Context) -> Result<()> {
        match ctx {
            Context::Embedding(e) => {
                self.require_bottleneck("decoding from an embedding")?;
                if e.dim() != self.config().bottleneck_dim {
                    return Err(Error::Shape(format!(
                        "embedding has {} entries, model expects {}",
                        e.dim(),
                        self.config().bottleneck_dim
                    )));
                }
                if !e.is_finite() {
                    return Err(Error::Data("non-finite embedding".into()));
                }
                Ok(())
            }
            Context::Source(s) => {
                self.check_tokens(s, self.config().max_len, "source")?;
                if s.is_empty() {
                    return Err(Error::Data("empty source sequence".into()));
                }
                Ok(())
            }
        }
    }

    /// Sentence embeddings `E(x)`: mean encoder state projected to `d` entries.
    pub fn encode_batch(&self, sentences: &[&[TokenId]]) -> Result<Vec<EmbeddingVector>> {
        self.require_bottleneck("encode")?;
        for s in sentences {
            self.check_tokens(s, self.config().max_len, "sentence")?;
            if s.is_empty() {
                return Err(Error::Data("empty token sequence".into()));
            }
        }
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let mut f = Forward::new(self, None);
        let (enc, segs) = f.encoder(sentences);
        let e = f.bottleneck(enc, segs);
        let t = f.g.value(e);
        Ok((0..t.rows())
            .map(|r| EmbeddingVector(t.row(r).iter().map(|x| x.to_f64()).collect()))
            .collect())
    }

    pub fn encode(&self, sentence: &[TokenId]) -> Result<EmbeddingVector> {
        Ok(self.encode_batch(&[sentence])?.remove(0))
    }

    /// Encoder states without pooling, one `d_model` row per token.
    pub fn encode_full(&self, sentence: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(sentence, self.config().max_len, "sentence")?;
        if sentence.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        let mut f = Forward::new(self, None);
        let (enc, _) = f.encoder(&[sentence]);
        let t = f.g.value(enc);
        Ok((0..t.rows()).map(|r| t.row(r).iter().map(|x| x.to_f64()).collect()).collect())
    }

    /// Logits for every position of `prefix`: row `i` scores the token that
    /// follows `prefix[..i]`, so there are `prefix.len() + 1` rows.
    pub fn decoder_logits(&self, ctx: &Context, prefix: &[TokenId]) -> Result<Tensor<T>> {
        self.check_context(ctx)?;
        self.check_tokens(prefix, self.config().max_len - 1, "prefix")?;
        let mut f = Forward::new(self, None);
        let (memory, segs) = context_memory(&mut f, ctx);
        let start = self.config().vocab_size as TokenId;
        let mut input = vec![start];
        input.extend_from_slice(prefix);
        let (h, _) = f.decoder(memory, &segs, &[0], &[input]);
        let logits = f.logits(h);
        Ok(f.g.value(logits).clone())
    }

    /// Log-probabilities of the next token after each prefix, all under one context.
    pub fn next_log_probs(&self, ctx: &Context, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        self.check_context(ctx)?;
        for p in prefixes {
            self.check_tokens(p, self.config().max_len - 1, "prefix")?;
        }
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let mut f = Forward::new(self, None);
        let (memory, segs) = context_memory(&mut f, ctx);
        let start = self.config().vocab_size as TokenId;
        let inputs: Vec<Vec<TokenId>> = prefixes
            .iter()
            .map(|p| {
                let mut v = vec![start];
                v.extend_from_slice(p);
                v
            })
            .collect();
        let mem_of = vec![0; inputs.len()];
        let (h, dsegs) = f.decoder(memory, &segs, &mem_of, &inputs);
        let last: Vec<usize> = dsegs.iter().map(|s| s.start + s.len - 1).collect();
        let h = f.g.select_rows(h, last);
        let logits = f.logits(h);
        let t = f.g.value(logits);
        Ok((0..t.rows()).map(|r| log_softmax(t.row(r))).collect())
    }

    /// Teacher-forced log-likelihoods of several sentences under one context.
    pub fn log_likelihoods(&self, ctx: &Context, sentences: &[&[TokenId]]) -> Result<Vec<LogLikelihood>> {
        self.check_context(ctx)?;
        for s in sentences {
            self.check_tokens(s, self.config().max_len, "sentence")?;
        }
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let mut f = Forward::new(self, None);
        let (memory, segs) = context_memory(&mut f, ctx);
        let start = self.config().vocab_size as TokenId;
        let inputs: Vec<Vec<TokenId>> = sentences.iter().map(|s| shifted(start, s)).collect();
        let mem_of = vec![0; inputs.len()];
        let (h, dsegs) = f.decoder(memory, &segs, &mem_of, &inputs);
        let logits = f.logits(h);
        let t = f.g.value(logits);
        Ok(sentences
            .iter()
            .zip(dsegs.iter())
            .map(|(s, seg)| {
                let per_token: Vec<f64> = s
                    .iter()
                    .enumerate()
                    .map(|(i, &tok)| log_softmax(t.row(seg.start + i))[tok as usize])
                    .collect();
                LogLikelihood {
                    total: per_token.iter().sum(),
                    per_token,
                }
            })
            .collect())
    }

    /// `Σ log p(t_i | context, t_<i)` including the final EOS.
    pub fn log_likelihood(&self, ctx: &Context, sentence: &[TokenId]) -> Result<LogLikelihood> {
        Ok(self.log_likelihoods(ctx, &[sentence])?.remove(0))
    }

    /// Fraction of target positions whose argmax prediction (ties to the lowest
    /// id) equals the target, teacher-forced, conditioned on the input sentence.
    pub fn token_accuracy(&self, pairs: &[TokenPair<'_>]) -> Result<f64> {
        let (correct, total) = self.token_accuracy_counts(pairs)?;
        Ok(correct as f64 / total as f64)
    }

    pub fn token_accuracy_counts(&self, pairs: &[TokenPair<'_>]) -> Result<(usize, usize)> {
        if pairs.is_empty() {
            return Err(Error::Data("token_accuracy needs at least one pair".into()));
        }
        self.check_pairs(pairs)?;
        let (mut correct, mut total) = (0, 0);
        for chunk in pairs.chunks(64) {
            let mut f = Forward::new(self, None);
            let logits = f.teacher_forced(chunk);
            let t = f.g.value(logits);
            let mut row = 0;
            for p in chunk {
                for &tok in p.target {
                    if argmax(t.row(row)) == tok as usize {
                        correct += 1;
                    }
                    total += 1;
                    row += 1;
                }
            }
        }
        Ok((correct, total))
    }

    /// Teacher-forced `log p(target | input)` for each pair, EOS included.
    pub fn pair_log_likelihoods(&self, pairs: &[TokenPair<'_>]) -> Result<Vec<f64>> {
        self.check_pairs(pairs)?;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(64) {
            let mut f = Forward::new(self, None);
            let logits = f.teacher_forced(chunk);
            let t = f.g.value(logits);
            let mut row = 0;
            for p in chunk {
                let mut total = 0.0;
                for &tok in p.target {
                    total += log_softmax(t.row(row))[tok as usize];
                    row += 1;
                }
                out.push(total);
            }
        }
        Ok(out)
    }
}

fn context_memory<T: Real>(f: &mut Forward<'_, T>, ctx: &Context) -> (Var, Rc<Vec<Segment>>) {
    match ctx {
        Context::Embedding(e) => f.memory(&Memory::Vectors(&[e])),
        Context::Source(s) => f.memory(&Memory::Sources(&[s.as_slice()])),
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
