use std::rc::Rc;

use rand::Rng;

use super::config::{AlignmentMode, ModelConfig};
use super::generator::{run_decoder, Encoded, Generator, Source};
use super::layers::{attention, block_keys, feed_forward, residual, Ctx, Packing};
use crate::corpus::{Style, TokenSeq, EOS};
use crate::error::{Error, Result};
use crate::numerics::{argmax, Graph, KeySets, Var};

/// What one generation step hands to the next: differentiable rows over the
/// vocabulary, or (when `rows` is `None`) just the hard tokens.
pub struct StepOutput {
    pub rows: Option<Var>,
    pub hard: Vec<usize>,
}

/// Left-to-right baseline with the same encoder and layer shapes as
/// [`Generator`]. The output length is given, so no end token is predicted.
#[derive(Clone, Debug)]
pub struct ArGenerator {
    pub inner: Generator,
}

impl ArGenerator {
    pub fn new<R: Rng>(mut config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.alignment = AlignmentMode::Simple;
        config.no_aligned_input = false;
        config.no_cross_attention = false;
        Ok(ArGenerator { inner: Generator::new(config, rng)? })
    }

    pub fn encode(&self, cx: &mut Ctx, src: Source) -> Result<Encoded> {
        self.inner.encode(cx, src)
    }

    fn bos_rows(&self, cx: &mut Ctx, n: usize) -> Result<Var> {
        self.inner.embed_tokens(cx, &vec![EOS; n])
    }

    /// Logits for every position of `targets` given the true previous words.
    pub fn teacher_forced_logits(&self, cx: &mut Ctx, enc: &Encoded, targets: Source, styles: &[Style]) -> Result<(Var, Packing)> {
        let (words, lens) = match targets {
            Source::Tokens(seqs) => {
                let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
                (self.inner.embed_tokens(cx, &ids)?, seqs.iter().map(|s| s.len()).collect::<Vec<_>>())
            }
            Source::Rows { rows, lens } => (self.inner.embed_rows(cx, rows)?, lens.to_vec()),
        };
        if lens.len() != enc.packing.batch() || styles.len() != lens.len() {
            return Err(Error::LengthMismatch("targets, sources and styles differ in count".into()));
        }
        let tp = Packing::new(lens);
        let bos = self.bos_rows(cx, 1)?;
        let table = cx.g.concat(&[bos, words], 0)?;
        let idx: Vec<usize> = tp.rows().map(|(b, i)| if i == 0 { 0 } else { 1 + tp.offset(b) + i - 1 }).collect();
        let x = cx.g.gather(table, idx)?;
        let pos = self.inner.position_rows(cx, &tp)?;
        let style = self.inner.style_rows(cx, &tp, styles)?;
        let x = cx.g.add(x, pos)?;
        let x = cx.g.add(x, style)?;
        let x = cx.dropout(x)?;
        let sm = block_keys(&tp, &tp, true);
        let cm = block_keys(&tp, &enc.packing, false);
        let h = run_decoder(cx, &self.inner.config, self.inner.decoder_layers(), x, Some(&sm), Some((enc.states, &cm)))?;
        Ok((self.inner.project(cx, h)?, tp))
    }

    /// Generates `lens[b]` words for every sentence, one step at a time.
    /// `pick` turns each step's logits (`batch x vocab`) into the value fed
    /// to the next step. Returns the chosen rows in sentence-major order
    /// (when `pick` produced rows) and the hard tokens.
    pub fn generate<F>(&self, cx: &mut Ctx, enc: &Encoded, lens: &[usize], styles: &[Style], mut pick: F) -> Result<(Option<Var>, Vec<TokenSeq>)>
    where
        F: FnMut(&mut Ctx, Var, usize) -> Result<StepOutput>,
    {
        let b = lens.len();
        let steps = lens.iter().copied().max().unwrap_or(0);
        if b != enc.packing.batch() || styles.len() != b {
            return Err(Error::LengthMismatch("lengths, sources and styles differ in count".into()));
        }
        let cfg = &self.inner.config;
        let layers = self.inner.decoder_layers();
        let one_step = Packing::new(vec![1; b]);
        let style = self.inner.style_rows(cx, &one_step, styles)?;
        let cross_mask = block_keys(&one_step, &enc.packing, false);
        let mut caches: Vec<Vec<Var>> = vec![Vec::new(); layers.len()];
        let mut outputs: Vec<StepOutput> = Vec::with_capacity(steps);
        for k in 0..steps {
            let x = match outputs.last() {
                None => self.bos_rows(cx, b)?,
                Some(StepOutput { rows: Some(r), .. }) => self.inner.embed_rows(cx, *r)?,
                Some(StepOutput { rows: None, hard }) => self.inner.embed_tokens(cx, hard)?,
            };
            let pos_k = Packing::new(vec![k + 1; b]);
            let pos_all = self.inner.position_rows(cx, &pos_k)?;
            let pos_rows: Vec<usize> = (0..b).map(|s| s * (k + 1) + k).collect();
            let pos = cx.g.gather(pos_all, pos_rows)?;
            let x = cx.g.add(x, pos)?;
            let x = cx.g.add(x, style)?;
            let mut h = cx.dropout(x)?;
            // keys are stored step-major: row j*b + s is sentence s at step j
            let self_keys = Rc::new(KeySets::from_fn(b, b * (k + 1), |s, j| j % b == s));
            for (l, layer) in layers.iter().enumerate() {
                let n = cx.norm(h);
                caches[l].push(n);
                let keys = if k == 0 { n } else { cx.g.concat(&caches[l], 0)? };
                let a = attention(cx, &layer.attn, cfg.num_heads, n, keys, &self_keys)?;
                h = residual(cx, h, a)?;
                let n = cx.norm(h);
                let a = attention(cx, &layer.cross, cfg.num_heads, n, enc.states, &cross_mask)?;
                h = residual(cx, h, a)?;
                let n = cx.norm(h);
                let f = feed_forward(cx, &layer.ffn, cfg.activation, n)?;
                h = residual(cx, h, f)?;
            }
            let h = cx.norm(h);
            let logits = self.inner.project(cx, h)?;
            outputs.push(pick(cx, logits, k)?);
        }
        let hard: Vec<TokenSeq> = (0..b).map(|s| TokenSeq((0..lens[s]).map(|k| outputs[k].hard[s]).collect())).collect();
        let rows = if steps > 0 && outputs.iter().all(|o| o.rows.is_some()) {
            let parts: Vec<Var> = outputs.iter().map(|o| o.rows.unwrap()).collect();
            let stacked = cx.g.concat(&parts, 0)?;
            let idx: Vec<usize> = (0..b).flat_map(|s| (0..lens[s]).map(move |k| k * b + s)).collect();
            Some(cx.g.gather(stacked, idx)?)
        } else {
            None
        };
        Ok((rows, hard))
    }

    /// Greedy decoding of exactly `lens[b]` words per sentence.
    pub fn transfer_with_lengths(&self, xs: &[TokenSeq], lens: &[usize], styles: &[Style]) -> Result<Vec<TokenSeq>> {
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.inner.params);
        let enc = self.encode(&mut cx, Source::Tokens(xs))?;
        let (_, hard) = self.generate(&mut cx, &enc, lens, styles, |cx, logits, _| {
            let v = cx.g.value(logits);
            Ok(StepOutput { rows: None, hard: (0..v.rows()).map(|r| argmax(v.row_slice(r))).collect() })
        })?;
        Ok(hard)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stepwise_matches_teacher_forcing() {
        // feeding the greedy outputs back as teacher inputs reproduces the
        // stepwise logits, so the cached attention is equivalent to the
        // causal mask
        let model = ArGenerator::new(ModelConfig::small(12), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let xs = vec![TokenSeq(vec![5, 6, 7]), TokenSeq(vec![8, 9])];
        let lens = [4, 2];
        let styles = [Style::Y, Style::X];
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &model.inner.params);
        let enc = model.encode(&mut cx, Source::Tokens(&xs)).unwrap();
        let mut step_logits = Vec::new();
        let (_, hard) = model
            .generate(&mut cx, &enc, &lens, &styles, |cx, logits, _| {
                let v = cx.g.value(logits).clone();
                step_logits.push(v.clone());
                Ok(StepOutput { rows: None, hard: (0..v.rows()).map(|r| argmax(v.row_slice(r))).collect() })
            })
            .unwrap();
        let (tf, tp) = model.teacher_forced_logits(&mut cx, &enc, Source::Tokens(&hard), &styles).unwrap();
        let tf = cx.g.value(tf);
        for (b, &l) in lens.iter().enumerate() {
            for k in 0..l {
                let a = tf.row_slice(tp.offset(b) + k);
                let s = step_logits[k].row_slice(b);
                for (x, y) in a.iter().zip(s) {
                    assert!((x - y).abs() < 1e-4, "b={b} k={k}");
                }
            }
        }
        assert_eq!(hard[0].len(), 4);
        assert_eq!(model.transfer_with_lengths(&xs, &lens, &styles).unwrap(), hard);
    }
}
