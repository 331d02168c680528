use rand::Rng;

use crate::corpus::{Style, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{Activation, Ctx, ModelConfig, Packing, Source};
use crate::model::{enc_layer, run_encoder, sinusoid_table, Builder, EncLayer};
use crate::numerics::{argmax, Graph, ParamId, ParamStore, Tensor, Var};

/// Style classifier used as the adversary: a small encoder, mean pooling and
/// a one-hidden-layer head with two logits (X, Y). It reads token ids or rows
/// over the vocabulary, so relaxed samples go through the same path.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    config: ModelConfig,
    embed: ParamId,
    layers: Vec<EncLayer>,
    hidden: (ParamId, ParamId),
    out: (ParamId, ParamId),
    positions: Tensor,
}

impl Discriminator {
    pub fn new<R: Rng>(vocab_size: usize, dim: usize, num_layers: usize, max_len: usize, rng: &mut R) -> Result<Self> {
        let config = ModelConfig {
            vocab_size,
            num_layers,
            num_heads: 1,
            hidden_dim: dim,
            feedforward_dim: 2 * dim,
            max_len,
            activation: Activation::Relu,
            ..ModelConfig::default()
        };
        if vocab_size == 0 || dim == 0 || max_len == 0 {
            return Err(Error::Config("discriminator needs a vocabulary, a width and a length limit".into()));
        }
        let mut params = ParamStore::new();
        let mut b = Builder { ps: &mut params, rng };
        let embed = b.normal("disc.embed", vec![vocab_size, dim], 1.0 / (dim as f64).sqrt())?;
        let layers = (0..num_layers).map(|l| enc_layer(&mut b, &format!("disc.{l}"), &config)).collect::<Result<_>>()?;
        let hidden = (b.xavier("disc.hidden.w", dim, dim)?, b.zeros("disc.hidden.b", vec![dim])?);
        let out = (b.xavier("disc.out.w", dim, 2)?, b.zeros("disc.out.b", vec![2])?);
        Ok(Discriminator { params, config, embed, layers, hidden, out, positions: sinusoid_table(max_len + 1, dim) })
    }

    /// `batch x 2` style logits. `cx` must read this discriminator's store.
    pub fn logits(&self, cx: &mut Ctx, input: Source) -> Result<Var> {
        let scale = (self.config.hidden_dim as f64).sqrt();
        let e = cx.w(self.embed);
        let (words, lens) = match input {
            Source::Tokens(seqs) => {
                let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
                if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
                    return Err(Error::MissingEmbedding(bad));
                }
                (cx.g.gather(e, ids)?, seqs.iter().map(|s| s.len()).collect::<Vec<_>>())
            }
            Source::Rows { rows, lens } => (cx.g.matmul(rows, e)?, lens.to_vec()),
        };
        if lens.iter().any(|&l| l == 0 || l > self.config.max_len) {
            return Err(Error::Precondition(format!("discriminator inputs must have 1..={} words", self.config.max_len)));
        }
        let p = Packing::new(lens);
        let d = self.config.hidden_dim;
        let mut pos = Vec::with_capacity(p.total() * d);
        for (_, i) in p.rows() {
            pos.extend_from_slice(self.positions.row_slice(i));
        }
        let pos = cx.g.constant(Tensor::matrix(p.total(), d, pos)?);
        let x = cx.g.scale(words, scale);
        let x = cx.g.add(x, pos)?;
        let h = run_encoder(cx, &self.config, &self.layers, x, &p)?;
        let mut pool = vec![0.0; p.batch() * p.total()];
        for (row, (b, _)) in p.rows().enumerate() {
            pool[b * p.total() + row] = 1.0 / p.len(b) as f64;
        }
        let pool = cx.g.constant(Tensor::matrix(p.batch(), p.total(), pool)?);
        let pooled = cx.g.matmul(pool, h)?;
        let (w1, b1, w2, b2) = (cx.w(self.hidden.0), cx.w(self.hidden.1), cx.w(self.out.0), cx.w(self.out.1));
        let z = cx.g.matmul(pooled, w1)?;
        let z = cx.g.add(z, b1)?;
        let z = cx.g.tanh(z);
        let z = cx.g.matmul(z, w2)?;
        cx.g.add(z, b2)
    }

    /// Per-sentence `-log F(label | sentence)`.
    pub fn nll(&self, cx: &mut Ctx, input: Source, labels: &[Style]) -> Result<Var> {
        let logits = self.logits(cx, input)?;
        cx.g.cross_entropy(logits, labels.iter().map(|s| s.index()).collect::<Vec<_>>())
    }

    pub fn predict(&self, seqs: &[TokenSeq]) -> Result<Vec<Style>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.params);
        let logits = self.logits(&mut cx, Source::Tokens(seqs))?;
        let v = cx.g.value(logits);
        Ok((0..v.rows()).map(|r| if argmax(v.row_slice(r)) == 0 { Style::X } else { Style::Y }).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokens_and_one_hot_rows_agree() {
        let d = Discriminator::new(10, 8, 1, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let seqs = vec![TokenSeq(vec![5, 6, 7]), TokenSeq(vec![8, 9])];
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &d.params);
        let a = d.logits(&mut cx, Source::Tokens(&seqs)).unwrap();
        let mut onehot = vec![0.0; 5 * 10];
        for (r, &t) in [5, 6, 7, 8, 9].iter().enumerate() {
            onehot[r * 10 + t] = 1.0;
        }
        let rows = cx.g.constant(Tensor::matrix(5, 10, onehot).unwrap());
        let b = d.logits(&mut cx, Source::Rows { rows, lens: &[3, 2] }).unwrap();
        for (x, y) in cx.g.value(a).data().iter().zip(cx.g.value(b).data()) {
            assert!((x - y).abs() < 1e-5);
        }
        assert_eq!(cx.g.shape(a), &[2, 2]);
    }

    #[test]
    fn uniform_logits_cost_log_two() {
        let mut d = Discriminator::new(10, 8, 1, 16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for name in ["disc.out.w", "disc.out.b"] {
            let id = d.params.id(name).unwrap();
            let n = d.params.get(id).value.len();
            d.params.set_value(id, &vec![0.0; n]).unwrap();
        }
        let seqs = vec![TokenSeq(vec![5, 6]), TokenSeq(vec![7])];
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &d.params);
        let nll = d.nll(&mut cx, Source::Tokens(&seqs), &[Style::X, Style::Y]).unwrap();
        let mean = cx.g.value(nll).data().iter().sum::<f64>() / 2.0;
        assert!((mean - std::f64::consts::LN_2).abs() < 1e-6);
    }
}
