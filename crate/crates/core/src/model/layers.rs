use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Activation;
use crate::error::Result;
use crate::numerics::{Graph, KeySets, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// A graph under construction together with the parameter values it reads.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub ps: &'a ParamStore,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, ps: &'a ParamStore) -> Self {
        Ctx { g, ps, dropout: 0.0, rng: None }
    }

    /// Enables inverted dropout with masks drawn from `seed`.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        if p > 0.0 {
            self.dropout = p;
            self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        }
        self
    }

    pub fn w(&mut self, id: ParamId) -> Var {
        self.g.param(self.ps, id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = 1.0 - self.dropout;
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        self.g.mul(x, m)
    }

    pub fn norm(&mut self, x: Var) -> Var {
        self.g.layer_norm(x, LN_EPS)
    }
}

/// Row layout of sentences concatenated along the first axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packing {
    lens: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl Packing {
    pub fn new(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut total = 0;
        for &l in &lens {
            offsets.push(total);
            total += l;
        }
        Packing { lens, offsets, total }
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn len(&self, b: usize) -> usize {
        self.lens[b]
    }

    pub fn offset(&self, b: usize) -> usize {
        self.offsets[b]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// `(sentence, position)` of every packed row.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lens.iter().enumerate().flat_map(|(b, &l)| (0..l).map(move |i| (b, i)))
    }
}

/// Attention pattern between two packings: queries only see keys of their
/// own sentence, and with `causal` only keys at the same or earlier
/// positions.
pub fn block_keys(q: &Packing, k: &Packing, causal: bool) -> Rc<KeySets> {
    let ranges = q.rows().map(|(b, i)| {
        let start = k.offset(b);
        (start, start + if causal { (i + 1).min(k.len(b)) } else { k.len(b) })
    });
    Rc::new(KeySets::from_ranges(ranges, k.total()))
}

/// Fixed sinusoidal position table, `rows x dim`.
pub fn sinusoid_table(rows: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; rows * dim];
    for pos in 0..rows {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::matrix(rows, dim, data).expect("table shape")
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Registers freshly initialized parameters.
pub(crate) struct Builder<'a, R: Rng> {
    pub ps: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.ps.add_xavier(name, fan_in, fan_out, self.rng)
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> Result<ParamId> {
        self.ps.add_normal(name, shape, std, self.rng)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.ps.add_const(name, shape, 0.0)
    }

    pub fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            q: self.xavier(&format!("{prefix}.q"), d, d)?,
            k: self.xavier(&format!("{prefix}.k"), d, d)?,
            v: self.xavier(&format!("{prefix}.v"), d, d)?,
            o: self.xavier(&format!("{prefix}.o"), d, d)?,
        })
    }

    pub fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.xavier(&format!("{prefix}.w1"), d, ff)?,
            b1: self.zeros(&format!("{prefix}.b1"), vec![ff])?,
            w2: self.xavier(&format!("{prefix}.w2"), ff, d)?,
            b2: self.zeros(&format!("{prefix}.b2"), vec![d])?,
        })
    }
}

/// Multi-head scaled dot-product attention over the allowed keys.
pub fn attention(cx: &mut Ctx, ids: &AttnIds, heads: usize, xq: Var, xkv: Var, keys: &Rc<KeySets>) -> Result<Var> {
    let (wq, wk, wv, wo) = (cx.w(ids.q), cx.w(ids.k), cx.w(ids.v), cx.w(ids.o));
    let q = cx.g.matmul(xq, wq)?;
    let k = cx.g.matmul(xkv, wk)?;
    let v = cx.g.matmul(xkv, wv)?;
    let ctx = cx.g.attention(q, k, v, keys.clone(), heads)?;
    cx.g.matmul(ctx, wo)
}

pub fn feed_forward(cx: &mut Ctx, ids: &FfnIds, act: Activation, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (cx.w(ids.w1), cx.w(ids.b1), cx.w(ids.w2), cx.w(ids.b2));
    let h = cx.g.matmul(x, w1)?;
    let h = cx.g.add(h, b1)?;
    let h = match act {
        Activation::Relu => cx.g.relu(h),
        Activation::Tanh => cx.g.tanh(h),
    };
    let h = cx.g.matmul(h, w2)?;
    cx.g.add(h, b2)
}

/// `x + dropout(sub(norm(x)))`, the pre-norm residual pattern.
pub fn residual(cx: &mut Ctx, x: Var, sub: Var) -> Result<Var> {
    let sub = cx.dropout(sub)?;
    cx.g.add(x, sub)
}
