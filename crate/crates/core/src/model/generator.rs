use rand::{Rng, RngCore};

use super::config::{AlignmentMode, ModelConfig};
use super::layers::{attention, block_keys, feed_forward, residual, sinusoid_table, AttnIds, Builder, Ctx, FfnIds, Packing};
use crate::align::{simple_alignment, validate_alignment, Alignment};
use crate::corpus::{Style, TokenSeq, EOS, MASK, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::numerics::{argmax, Graph, KeySets, ParamId, ParamStore, Tensor, Var};

/// Logit of tokens that must not appear in an output.
const BANNED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug)]
pub(crate) struct EncLayer {
    attn: AttnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayer {
    pub(crate) attn: AttnIds,
    pub(crate) cross: AttnIds,
    pub(crate) ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct PointerIds {
    layers: Vec<DecLayer>,
    query: ParamId,
    mask_slot: ParamId,
    stop: ParamId,
}

#[derive(Clone, Debug)]
struct GenIds {
    embed: ParamId,
    style: ParamId,
    out_bias: ParamId,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    pointer: Option<PointerIds>,
}

/// Source sentences as token ids, or as rows over the vocabulary (one-hot,
/// relaxed samples or probabilities) coming out of another pass.
#[derive(Clone, Copy)]
pub enum Source<'s> {
    Tokens(&'s [TokenSeq]),
    Rows { rows: Var, lens: &'s [usize] },
}

/// Encoder output for a packed batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Var,
    /// Scaled word embeddings of the source, before positions are added.
    pub words: Var,
    pub packing: Packing,
}

/// The two-step generator: encoder, pointer decoder for alignments, and a
/// parallel decoder. Both transfer directions share every weight except the
/// style embedding.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: GenIds,
    positions: Tensor,
}

pub(crate) fn enc_layer<R: Rng>(b: &mut Builder<R>, prefix: &str, cfg: &ModelConfig) -> Result<EncLayer> {
    let d = cfg.hidden_dim;
    Ok(EncLayer { attn: b.attn(&format!("{prefix}.attn"), d)?, ffn: b.ffn(&format!("{prefix}.ffn"), d, cfg.feedforward_dim)? })
}

pub(crate) fn dec_layer<R: Rng>(b: &mut Builder<R>, prefix: &str, cfg: &ModelConfig) -> Result<DecLayer> {
    let d = cfg.hidden_dim;
    Ok(DecLayer {
        attn: b.attn(&format!("{prefix}.attn"), d)?,
        cross: b.attn(&format!("{prefix}.cross"), d)?,
        ffn: b.ffn(&format!("{prefix}.ffn"), d, cfg.feedforward_dim)?,
    })
}

pub(crate) fn run_encoder(cx: &mut Ctx, cfg: &ModelConfig, layers: &[EncLayer], x: Var, p: &Packing) -> Result<Var> {
    let mask = block_keys(p, p, false);
    let mut h = x;
    for l in layers {
        let n = cx.norm(h);
        let a = attention(cx, &l.attn, cfg.num_heads, n, n, &mask)?;
        h = residual(cx, h, a)?;
        let n = cx.norm(h);
        let f = feed_forward(cx, &l.ffn, cfg.activation, n)?;
        h = residual(cx, h, f)?;
    }
    Ok(cx.norm(h))
}

/// Decoder stack. `self_mask = None` removes self-attention and
/// `memory = None` removes cross-attention.
pub(crate) fn run_decoder(
    cx: &mut Ctx,
    cfg: &ModelConfig,
    layers: &[DecLayer],
    x: Var,
    self_mask: Option<&std::rc::Rc<KeySets>>,
    memory: Option<(Var, &std::rc::Rc<KeySets>)>,
) -> Result<Var> {
    let mut h = x;
    for l in layers {
        if let Some(m) = self_mask {
            let n = cx.norm(h);
            let a = attention(cx, &l.attn, cfg.num_heads, n, n, m)?;
            h = residual(cx, h, a)?;
        }
        if let Some((mem, m)) = memory {
            let n = cx.norm(h);
            let a = attention(cx, &l.cross, cfg.num_heads, n, mem, m)?;
            h = residual(cx, h, a)?;
        }
        let n = cx.norm(h);
        let f = feed_forward(cx, &l.ffn, cfg.activation, n)?;
        h = residual(cx, h, f)?;
    }
    Ok(cx.norm(h))
}

impl Generator {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let v = config.vocab_size;
        let mut params = ParamStore::new();
        let mut b = Builder { ps: &mut params, rng };
        let embed = b.normal("embed", vec![v, d], 1.0 / (d as f64).sqrt())?;
        let style = b.normal("style", vec![2, d], 1.0)?;
        let out_bias = b.zeros("out_bias", vec![v])?;
        let enc = (0..config.num_layers).map(|l| enc_layer(&mut b, &format!("enc.{l}"), &config)).collect::<Result<_>>()?;
        let dec = (0..config.num_layers).map(|l| dec_layer(&mut b, &format!("dec.{l}"), &config)).collect::<Result<_>>()?;
        let pointer = match config.alignment {
            AlignmentMode::Simple => None,
            AlignmentMode::Learnable => Some(PointerIds {
                layers: (0..config.predictor_layers)
                    .map(|l| dec_layer(&mut b, &format!("ptr.{l}"), &config))
                    .collect::<Result<_>>()?,
                query: b.xavier("ptr.query", d, d)?,
                mask_slot: b.normal("ptr.mask_slot", vec![1, d], 1.0)?,
                stop: b.normal("ptr.stop", vec![1, d], 1.0)?,
            }),
        };
        let positions = sinusoid_table(config.max_len + config.max_slack + 2, d);
        Ok(Generator { config, params, ids: GenIds { embed, style, out_bias, enc, dec, pointer }, positions })
    }

    /// Word-embedding table, `vocab x hidden`.
    pub fn embeddings(&self) -> &Tensor {
        &self.params.get(self.ids.embed).value
    }

    pub fn embed_id(&self) -> ParamId {
        self.ids.embed
    }

    /// Parameters of the pointer decoder (empty in simple mode).
    pub fn pointer_param_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.name.starts_with("ptr.")).map(|(_, p)| p.name.clone()).collect()
    }

    fn emb_scale(&self) -> f64 {
        (self.config.hidden_dim as f64).sqrt()
    }

    pub fn embed_tokens(&self, cx: &mut Ctx, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::MissingEmbedding(bad));
        }
        let e = cx.w(self.ids.embed);
        let x = cx.g.gather(e, ids.to_vec())?;
        Ok(cx.g.scale(x, self.emb_scale()))
    }

    /// Embeds distributions over the vocabulary as convex combinations of
    /// embedding rows.
    pub fn embed_rows(&self, cx: &mut Ctx, rows: Var) -> Result<Var> {
        let e = cx.w(self.ids.embed);
        let x = cx.g.matmul(rows, e)?;
        Ok(cx.g.scale(x, self.emb_scale()))
    }

    pub(crate) fn position_rows(&self, cx: &mut Ctx, p: &Packing) -> Result<Var> {
        let d = self.config.hidden_dim;
        let mut data = Vec::with_capacity(p.total() * d);
        for (_, i) in p.rows() {
            if i >= self.positions.rows() {
                return Err(Error::TooLong { len: i + 1, max_len: self.positions.rows() });
            }
            data.extend_from_slice(self.positions.row_slice(i));
        }
        Ok(cx.g.constant(Tensor::matrix(p.total(), d, data)?))
    }

    pub(crate) fn style_rows(&self, cx: &mut Ctx, p: &Packing, styles: &[Style]) -> Result<Var> {
        let ids: Vec<usize> = p.rows().map(|(b, _)| styles[b].index()).collect();
        let s = cx.w(self.ids.style);
        cx.g.gather(s, ids)
    }

    pub fn encode(&self, cx: &mut Ctx, src: Source) -> Result<Encoded> {
        let (words, lens) = match src {
            Source::Tokens(seqs) => {
                let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
                (self.embed_tokens(cx, &ids)?, seqs.iter().map(|s| s.len()).collect::<Vec<_>>())
            }
            Source::Rows { rows, lens } => (self.embed_rows(cx, rows)?, lens.to_vec()),
        };
        for &l in &lens {
            if l == 0 {
                return Err(Error::Precondition("cannot encode an empty sentence".into()));
            }
            if l > self.config.max_len {
                return Err(Error::TooLong { len: l, max_len: self.config.max_len });
            }
        }
        let packing = Packing::new(lens);
        let pos = self.position_rows(cx, &packing)?;
        let x = cx.g.add(words, pos)?;
        let x = cx.dropout(x)?;
        let states = run_encoder(cx, &self.config, &self.ids.enc, x, &packing)?;
        Ok(Encoded { states, words, packing })
    }

    /// `[bos; mask; source words]`, so that any alignment entry becomes a row index.
    fn lookup_table(&self, cx: &mut Ctx, enc: &Encoded) -> Result<Var> {
        let special = self.embed_tokens(cx, &[EOS, MASK])?;
        cx.g.concat(&[special, enc.words], 0)
    }

    fn check_alignments(&self, enc: &Encoded, alignments: &[Alignment], styles: &[Style]) -> Result<()> {
        if alignments.len() != enc.packing.batch() || styles.len() != enc.packing.batch() {
            return Err(Error::LengthMismatch(format!(
                "{} sources, {} alignments, {} styles",
                enc.packing.batch(),
                alignments.len(),
                styles.len()
            )));
        }
        Ok(())
    }

    /// Decoder input rows: the aligned source word (or the mask embedding),
    /// plus position and style.
    pub fn decoder_input(&self, cx: &mut Ctx, enc: &Encoded, alignments: &[Alignment], styles: &[Style]) -> Result<(Var, Packing)> {
        self.check_alignments(enc, alignments, styles)?;
        for (b, t) in alignments.iter().enumerate() {
            if !validate_alignment(&t.0, enc.packing.len(b)) {
                return Err(Error::InvalidAlignment { targets: t.0.clone(), source_len: enc.packing.len(b) });
            }
        }
        let tp = Packing::new(alignments.iter().map(|t| t.len()).collect());
        let style = self.style_rows(cx, &tp, styles)?;
        if self.config.no_aligned_input {
            let pos = self.position_rows(cx, &tp)?;
            return Ok((cx.g.add(pos, style)?, tp));
        }
        let table = self.lookup_table(cx, enc)?;
        let idx: Vec<usize> = alignments
            .iter()
            .enumerate()
            .flat_map(|(b, t)| {
                let off = enc.packing.offset(b);
                t.0.iter().map(move |&p| if p == 0 { 1 } else { 2 + off + p - 1 })
            })
            .collect();
        let words = cx.g.gather(table, idx)?;
        let mut x = cx.g.add(words, style)?;
        if !self.config.no_cross_attention {
            let pos = self.position_rows(cx, &tp)?;
            x = cx.g.add(x, pos)?;
        }
        Ok((cx.dropout(x)?, tp))
    }

    /// Output logits for every target row, computed in one parallel pass.
    pub fn decode(&self, cx: &mut Ctx, enc: &Encoded, input: Var, tp: &Packing) -> Result<Var> {
        let h = if self.config.no_cross_attention {
            run_decoder(cx, &self.config, &self.ids.dec, input, None, None)?
        } else {
            let sm = block_keys(tp, tp, false);
            let cm = block_keys(tp, &enc.packing, false);
            run_decoder(cx, &self.config, &self.ids.dec, input, Some(&sm), Some((enc.states, &cm)))?
        };
        self.project(cx, h)
    }

    /// Tied output layer: hidden rows against the embedding table. Only
    /// vocabulary words can be generated. UNK is banned too: it never occurs
    /// in a corpus the vocabulary was built from, so emitting it only games
    /// the discriminator.
    pub(crate) fn project(&self, cx: &mut Ctx, h: Var) -> Result<Var> {
        let e = cx.w(self.ids.embed);
        let logits = cx.g.matmul_nt(h, e)?;
        let bias = cx.w(self.ids.out_bias);
        let logits = cx.g.add(logits, bias)?;
        let v = self.config.vocab_size;
        let rows = cx.g.value(logits).rows();
        let mask: Vec<bool> = (0..rows * v).map(|i| i % v < NUM_RESERVED).collect();
        cx.g.masked_fill(logits, mask, BANNED_LOGIT)
    }

    pub(crate) fn decoder_layers(&self) -> &[DecLayer] {
        &self.ids.dec
    }

    /// Pointer scores for every prefix row. Sentence `b` contributes
    /// `alignments[b].len() + 1` rows; columns are all packed source
    /// positions followed by the mask slot and stop. Unavailable actions are
    /// `-inf`.
    pub fn pointer_scores(&self, cx: &mut Ctx, enc: &Encoded, alignments: &[Alignment], styles: &[Style]) -> Result<(Var, Packing)> {
        let ptr = self
            .ids
            .pointer
            .as_ref()
            .ok_or_else(|| Error::Precondition("pointer decoder requires learnable alignment".into()))?;
        self.check_alignments(enc, alignments, styles)?;
        let src = &enc.packing;
        for (b, t) in alignments.iter().enumerate() {
            if t.0.iter().any(|&p| p > src.len(b)) {
                return Err(Error::InvalidAlignment { targets: t.0.clone(), source_len: src.len(b) });
            }
        }
        let rp = Packing::new(alignments.iter().map(|t| t.len() + 1).collect());
        let table = self.lookup_table(cx, enc)?;
        let idx: Vec<usize> = alignments
            .iter()
            .enumerate()
            .flat_map(|(b, t)| {
                let off = src.offset(b);
                std::iter::once(0).chain(t.0.iter().map(move |&p| if p == 0 { 1 } else { 2 + off + p - 1 }))
            })
            .collect();
        let words = cx.g.gather(table, idx)?;
        let style = self.style_rows(cx, &rp, styles)?;
        let pos = self.position_rows(cx, &rp)?;
        let x = cx.g.add(words, style)?;
        let x = cx.g.add(x, pos)?;
        let x = cx.dropout(x)?;
        let sm = block_keys(&rp, &rp, true);
        let cm = block_keys(&rp, src, false);
        let h = run_decoder(cx, &self.config, &ptr.layers, x, Some(&sm), Some((enc.states, &cm)))?;
        let wq = cx.w(ptr.query);
        let q = cx.g.matmul(h, wq)?;
        let (ms, st) = (cx.w(ptr.mask_slot), cx.w(ptr.stop));
        let keys = cx.g.concat(&[enc.states, ms, st], 0)?;
        let s = cx.g.matmul_nt(q, keys)?;
        let s = cx.g.scale(s, 1.0 / (self.config.hidden_dim as f64).sqrt());
        let cols = src.total() + 2;
        let mut blocked = vec![true; rp.total() * cols];
        for (row, (b, k)) in rp.rows().enumerate() {
            let n = src.len(b);
            let cap = n + self.config.max_slack;
            let r = &mut blocked[row * cols..(row + 1) * cols];
            r[cols - 1] = false;
            if k < cap {
                r[cols - 2] = false;
                let last = alignments[b].0[..k].iter().copied().max().unwrap_or(0);
                for j in last + 1..=n {
                    r[src.offset(b) + j - 1] = false;
                }
            }
        }
        Ok((cx.g.masked_fill(s, blocked, f64::NEG_INFINITY)?, rp))
    }

    /// Column index of every teacher action (`alignment` entries then stop).
    pub fn pointer_targets(src: &Packing, alignments: &[Alignment]) -> Vec<usize> {
        let (mask_col, stop_col) = (src.total(), src.total() + 1);
        alignments
            .iter()
            .enumerate()
            .flat_map(|(b, t)| {
                t.0.iter()
                    .map(move |&p| if p == 0 { mask_col } else { src.offset(b) + p - 1 })
                    .chain(std::iter::once(stop_col))
            })
            .collect()
    }

    /// Per-action negative log-probabilities of the given alignments.
    pub fn alignment_nll(&self, cx: &mut Ctx, enc: &Encoded, alignments: &[Alignment], styles: &[Style]) -> Result<Var> {
        let (scores, _) = self.pointer_scores(cx, enc, alignments, styles)?;
        let targets = Self::pointer_targets(&enc.packing, alignments);
        cx.g.cross_entropy(scores, targets)
    }

    /// Decodes alignments action by action: greedily, or by sampling from
    /// the pointer distribution when `rng` is given. Simple mode returns the
    /// identity alignment.
    pub fn predict_alignments(&self, xs: &[TokenSeq], styles: &[Style], mut rng: Option<&mut dyn RngCore>) -> Result<Vec<Alignment>> {
        if self.config.alignment == AlignmentMode::Simple {
            return Ok(xs.iter().map(|x| simple_alignment(x.len())).collect());
        }
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.params);
        let enc = self.encode(&mut cx, Source::Tokens(xs))?;
        let src = enc.packing.clone();
        let mut out: Vec<Alignment> = vec![Alignment::default(); xs.len()];
        let mut done = vec![false; xs.len()];
        while done.iter().any(|d| !d) {
            let (scores, rp) = self.pointer_scores(&mut cx, &enc, &out, styles)?;
            let cols = src.total() + 2;
            let values = cx.g.value(scores).data().to_vec();
            for b in 0..xs.len() {
                if done[b] {
                    continue;
                }
                let row = rp.offset(b) + rp.len(b) - 1;
                let r = &values[row * cols..(row + 1) * cols];
                let pick = match rng.as_deref_mut() {
                    None => argmax(r),
                    Some(rng) => sample_row(r, rng),
                };
                if pick == cols - 1 {
                    done[b] = true;
                } else if pick == cols - 2 {
                    out[b].0.push(0);
                } else {
                    out[b].0.push(pick - src.offset(b) + 1);
                }
            }
        }
        Ok(out)
    }

    /// Greedy two-step transfer: alignment first, then every output word in
    /// parallel.
    pub fn transfer(&self, xs: &[TokenSeq], target_styles: &[Style]) -> Result<Vec<(TokenSeq, Alignment)>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let alignments = self.predict_alignments(xs, target_styles, None)?;
        let tokens = self.decode_greedy(xs, &alignments, target_styles)?;
        Ok(tokens.into_iter().zip(alignments).collect())
    }

    /// Per-position argmax of the parallel decoder for given alignments.
    pub fn decode_greedy(&self, xs: &[TokenSeq], alignments: &[Alignment], styles: &[Style]) -> Result<Vec<TokenSeq>> {
        if alignments.iter().all(|t| t.is_empty()) {
            return Ok(vec![TokenSeq::default(); xs.len()]);
        }
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.params);
        let enc = self.encode(&mut cx, Source::Tokens(xs))?;
        let (input, tp) = self.decoder_input(&mut cx, &enc, alignments, styles)?;
        let logits = self.decode(&mut cx, &enc, input, &tp)?;
        let lv = cx.g.value(logits);
        Ok((0..xs.len())
            .map(|b| TokenSeq((0..tp.len(b)).map(|i| argmax(lv.row_slice(tp.offset(b) + i))).collect()))
            .collect())
    }

    /// Per-position output distributions (rows sum to one).
    pub fn output_distributions(&self, x: &TokenSeq, t: &Alignment, style: Style) -> Result<Tensor> {
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.params);
        let enc = self.encode(&mut cx, Source::Tokens(std::slice::from_ref(x)))?;
        let (input, tp) = self.decoder_input(&mut cx, &enc, std::slice::from_ref(t), &[style])?;
        let logits = self.decode(&mut cx, &enc, input, &tp)?;
        let p = cx.g.softmax(logits);
        Ok(cx.g.value(p).clone())
    }

    /// `log P(y | x, t)`: the sum of per-position log-probabilities.
    pub fn sequence_logprob(&self, x: &TokenSeq, t: &Alignment, y: &TokenSeq, style: Style) -> Result<f64> {
        if t.len() != y.len() {
            return Err(Error::LengthMismatch(format!("alignment of length {} for output of length {}", t.len(), y.len())));
        }
        if y.is_empty() {
            return Ok(0.0);
        }
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.params);
        let enc = self.encode(&mut cx, Source::Tokens(std::slice::from_ref(x)))?;
        let (input, tp) = self.decoder_input(&mut cx, &enc, std::slice::from_ref(t), &[style])?;
        let logits = self.decode(&mut cx, &enc, input, &tp)?;
        let nll = cx.g.cross_entropy(logits, y.to_vec())?;
        Ok(-cx.g.value(nll).data().iter().sum::<f64>())
    }

    /// `log P(t | x)`. In simple mode this is 0 for the identity alignment
    /// and `-inf` otherwise; in learnable mode invalid alignments get `-inf`
    /// through action masking.
    pub fn alignment_logprob(&self, x: &TokenSeq, t: &Alignment, style: Style) -> Result<f64> {
        match self.config.alignment {
            AlignmentMode::Simple => Ok(if *t == simple_alignment(x.len()) { 0.0 } else { f64::NEG_INFINITY }),
            AlignmentMode::Learnable => {
                if t.0.iter().any(|&p| p > x.len()) {
                    return Ok(f64::NEG_INFINITY);
                }
                let mut g = Graph::inference();
                let mut cx = Ctx::new(&mut g, &self.params);
                let enc = self.encode(&mut cx, Source::Tokens(std::slice::from_ref(x)))?;
                let nll = self.alignment_nll(&mut cx, &enc, std::slice::from_ref(t), &[style])?;
                Ok(-cx.g.value(nll).data().iter().sum::<f64>())
            }
        }
    }

    pub(crate) fn set_params(&mut self, params: ParamStore) {
        self.params = params;
    }
}

/// Draws an index from `softmax(scores)`; `-inf` entries are never chosen.
fn sample_row(scores: &[f64], rng: &mut dyn RngCore) -> usize {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            if u < wi {
                return i;
            }
            u -= wi;
        }
    }
    w.iter().rposition(|&wi| wi > 0.0).unwrap_or(0)
}
