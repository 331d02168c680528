use rand::{Rng, RngCore};

use super::config::GradApproxMode;
use super::discriminator::Discriminator;
use crate::align::{pseudo_alignment_dp, simple_alignment, Alignment};
use crate::corpus::{corrupt, NoiseConfig, Style, StyledCorpus, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{gumbel_noise, gumbel_sample, AlignmentMode, Ctx, Generator, Source};
use crate::numerics::{argmax, Tensor, Var};

/// Sentences of both styles used by one update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub x: Vec<TokenSeq>,
    pub y: Vec<TokenSeq>,
}

impl Batch {
    /// Draws `size` sentences per style, with replacement.
    pub fn sample<R: Rng>(data: &StyledCorpus, size: usize, rng: &mut R) -> Result<Self> {
        if data.style_x.is_empty() || data.style_y.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut pick = |pool: &[TokenSeq]| -> Vec<TokenSeq> {
            (0..size).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
        };
        let x = pick(&data.style_x);
        let y = pick(&data.style_y);
        Ok(Batch { x, y })
    }

    /// All sentences, style X first, with their styles.
    pub fn sentences(&self) -> (Vec<TokenSeq>, Vec<Style>) {
        let seqs = self.x.iter().chain(&self.y).cloned().collect();
        let styles = std::iter::repeat_n(Style::X, self.x.len()).chain(std::iter::repeat_n(Style::Y, self.y.len())).collect();
        (seqs, styles)
    }

    pub fn len(&self) -> usize {
        self.x.len() + self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs of a reconstruction: rebuild `targets` from `sources` through the
/// given alignments. The pointer loss of sentence `b` counts only when
/// `align_weights[b]` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionPlan {
    pub sources: Vec<TokenSeq>,
    pub targets: Vec<TokenSeq>,
    pub styles: Vec<Style>,
    pub alignments: Vec<Alignment>,
    pub align_weights: Vec<f64>,
}

/// Pseudo alignment from `src` to `tgt` (identity in simple mode), and
/// whether the pointer decoder can produce it at all.
fn pseudo_alignment(gen: &Generator, emb: &Tensor, src: &[usize], tgt: &[usize]) -> Result<(Alignment, f64)> {
    match gen.config.alignment {
        AlignmentMode::Simple => {
            if src.len() != tgt.len() {
                return Err(Error::LengthMismatch(format!("simple alignment needs equal lengths, got {} and {}", src.len(), tgt.len())));
            }
            Ok((simple_alignment(src.len()), 0.0))
        }
        AlignmentMode::Learnable => {
            let (t, _) = pseudo_alignment_dp(src, tgt, emb)?;
            let reachable = t.len() <= src.len() + gen.config.max_slack;
            Ok((t, if reachable { 1.0 } else { 0.0 }))
        }
    }
}

/// Corrupts every sentence and aligns the corrupted copy to its original.
pub fn plan_self_reconstruction<R: Rng>(gen: &Generator, batch: &Batch, noise: &NoiseConfig, rng: &mut R) -> Result<ReconstructionPlan> {
    if batch.x.is_empty() || batch.y.is_empty() {
        return Err(Error::Precondition("self-reconstruction needs sentences of both styles".into()));
    }
    if gen.config.alignment == AlignmentMode::Simple && noise.changes_length() {
        return Err(Error::Config("simple alignment needs length-preserving noise (drop and insertion disabled)".into()));
    }
    let (targets, styles) = batch.sentences();
    let emb = gen.embeddings();
    let mut plan = ReconstructionPlan { sources: Vec::new(), targets: Vec::new(), styles, alignments: Vec::new(), align_weights: Vec::new() };
    for x in targets {
        let noisy = corrupt(&x, noise, gen.config.vocab_size, rng);
        let (t, w) = pseudo_alignment(gen, emb, &noisy, &x)?;
        plan.sources.push(noisy);
        plan.targets.push(x);
        plan.alignments.push(t);
        plan.align_weights.push(w);
    }
    Ok(plan)
}

/// Mean over sentences of `-log P(target | source, T) - log P(T | source)`.
fn reconstruction_nll(
    cx: &mut Ctx,
    gen: &Generator,
    src: Source,
    alignments: &[Alignment],
    targets: &[TokenSeq],
    styles: &[Style],
    align_weights: &[f64],
) -> Result<Var> {
    let n = targets.len() as f64;
    let enc = gen.encode(cx, src)?;
    let (input, tp) = gen.decoder_input(cx, &enc, alignments, styles)?;
    let logits = gen.decode(cx, &enc, input, &tp)?;
    let ids: Vec<usize> = targets.iter().flat_map(|t| t.iter().copied()).collect();
    let nll = cx.g.cross_entropy(logits, ids)?;
    let mut total = cx.g.sum(nll);
    if gen.config.alignment == AlignmentMode::Learnable && align_weights.iter().any(|&w| w > 0.0) {
        let used: Vec<Alignment> = alignments
            .iter()
            .zip(align_weights)
            .map(|(t, &w)| if w > 0.0 { t.clone() } else { Alignment::default() })
            .collect();
        let a = gen.alignment_nll(cx, &enc, &used, styles)?;
        let w: Vec<f64> = used.iter().zip(align_weights).flat_map(|(t, &w)| std::iter::repeat_n(w, t.len() + 1)).collect();
        let wn = w.len();
        let w = cx.g.constant(Tensor::new(vec![wn], w)?);
        let a = cx.g.mul(a, w)?;
        let a = cx.g.sum(a);
        total = cx.g.add(total, a)?;
    }
    Ok(cx.g.scale(total, 1.0 / n))
}

/// Builds the self-reconstruction bound for a fixed plan.
pub fn self_reconstruction_graph(cx: &mut Ctx, gen: &Generator, plan: &ReconstructionPlan) -> Result<Var> {
    reconstruction_nll(cx, gen, Source::Tokens(&plan.sources), &plan.alignments, &plan.targets, &plan.styles, &plan.align_weights)
}

/// Denoising loss: corrupt, pseudo-align the corrupted copy to the original
/// and reconstruct it in its own style.
pub fn self_reconstruction_loss<R: Rng>(cx: &mut Ctx, gen: &Generator, batch: &Batch, noise: &NoiseConfig, rng: &mut R) -> Result<Var> {
    let plan = plan_self_reconstruction(gen, batch, noise, rng)?;
    self_reconstruction_graph(cx, gen, &plan)
}

/// Discrete choices of a first transfer pass: sampled alignments and
/// Gumbel noise. Sentences whose sampled alignment is empty (or longer than
/// the model accepts) are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferPlan {
    pub sources: Vec<TokenSeq>,
    pub source_styles: Vec<Style>,
    pub alignments: Vec<Alignment>,
    pub noise: Vec<f64>,
    /// Sentences dropped because their output would be empty.
    pub degenerate: usize,
}

impl TransferPlan {
    pub fn target_styles(&self) -> Vec<Style> {
        self.source_styles.iter().map(|s| s.other()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

pub fn plan_transfer<R: RngCore>(gen: &Generator, sentences: &[TokenSeq], source_styles: &[Style], rng: &mut R) -> Result<TransferPlan> {
    let targets: Vec<Style> = source_styles.iter().map(|s| s.other()).collect();
    let alignments = gen.predict_alignments(sentences, &targets, Some(rng as &mut dyn RngCore))?;
    let mut plan = TransferPlan { sources: Vec::new(), source_styles: Vec::new(), alignments: Vec::new(), noise: Vec::new(), degenerate: 0 };
    for ((x, &s), t) in sentences.iter().zip(source_styles).zip(alignments) {
        if t.is_empty() || t.len() > gen.config.max_len {
            plan.degenerate += 1;
            continue;
        }
        plan.sources.push(x.clone());
        plan.source_styles.push(s);
        plan.alignments.push(t);
    }
    let rows: usize = plan.alignments.iter().map(|t| t.len()).sum();
    plan.noise = gumbel_noise(rows * gen.config.vocab_size, rng);
    Ok(plan)
}

/// Output of the first pass. `style_rows` feed the discriminator and
/// `cycle_rows` feed the reconstruction pass; both are rows over the
/// vocabulary in packed order.
pub struct FirstPass {
    pub style_rows: Var,
    pub cycle_rows: Var,
    pub hard: Vec<TokenSeq>,
    pub lens: Vec<usize>,
}

pub(crate) fn one_hot(ids: &[usize], vocab: usize) -> Result<Tensor> {
    let mut data = vec![0.0; ids.len() * vocab];
    for (r, &t) in ids.iter().enumerate() {
        data[r * vocab + t] = 1.0;
    }
    Tensor::matrix(ids.len(), vocab, data)
}

/// Runs the parallel decoder on the planned alignments and relaxes its
/// output according to `mode`. The alignments themselves carry no gradient.
pub fn first_pass(cx: &mut Ctx, gen: &Generator, plan: &TransferPlan, mode: GradApproxMode) -> Result<FirstPass> {
    if plan.is_empty() {
        return Err(Error::Precondition("empty transfer plan".into()));
    }
    let enc = gen.encode(cx, Source::Tokens(&plan.sources))?;
    let (input, tp) = gen.decoder_input(cx, &enc, &plan.alignments, &plan.target_styles())?;
    let logits = gen.decode(cx, &enc, input, &tp)?;
    let (style_rows, cycle_rows, flat) = match mode {
        GradApproxMode::GumbelSoftmax { temperature, straight_through } => {
            let (relaxed, hard) = gumbel_sample(cx.g, logits, temperature, &plan.noise)?;
            let rows = if straight_through { cx.g.straight_through(relaxed) } else { relaxed };
            (rows, rows, hard)
        }
        GradApproxMode::SoftEmbedding => {
            let p = cx.g.softmax(logits);
            let v = cx.g.value(p);
            let hard = (0..v.rows()).map(|r| argmax(v.row_slice(r))).collect();
            (p, p, hard)
        }
        GradApproxMode::StopGradient => {
            let (relaxed, hard) = gumbel_sample(cx.g, logits, 1.0, &plan.noise)?;
            let rows = cx.g.straight_through(relaxed);
            let fixed = cx.g.constant(one_hot(&hard, gen.config.vocab_size)?);
            (rows, fixed, hard)
        }
    };
    let lens: Vec<usize> = tp.lens().to_vec();
    let hard = (0..tp.batch()).map(|b| TokenSeq(flat[tp.offset(b)..tp.offset(b) + tp.len(b)].to_vec())).collect();
    Ok(FirstPass { style_rows, cycle_rows, hard, lens })
}

/// Per-sentence `-log F(target style | transferred sentence)`.
pub fn style_terms(cx: &mut Ctx, disc: &Discriminator, plan: &TransferPlan, fp: &FirstPass) -> Result<Var> {
    let mut dcx = Ctx::new(&mut *cx.g, &disc.params);
    disc.nll(&mut dcx, Source::Rows { rows: fp.style_rows, lens: &fp.lens }, &plan.target_styles())
}

/// Mean style loss over the transferred sentences. Under the stop-gradient
/// regime the style loss still uses Gumbel samples.
pub fn style_loss<R: RngCore>(cx: &mut Ctx, gen: &Generator, disc: &Discriminator, batch: &Batch, mode: GradApproxMode, rng: &mut R) -> Result<Var> {
    let (seqs, styles) = batch.sentences();
    let plan = plan_transfer(gen, &seqs, &styles, rng)?;
    if plan.is_empty() {
        return Ok(cx.g.scalar(0.0));
    }
    let fp = first_pass(cx, gen, &plan, mode)?;
    let terms = style_terms(cx, disc, &plan, &fp)?;
    let s = cx.g.sum(terms);
    Ok(cx.g.scale(s, 1.0 / plan.sources.len() as f64))
}

/// Reconstruction of the original sentences from the first-pass output,
/// through pseudo alignments from the generated sentence to the original.
pub fn cycle_graph(cx: &mut Ctx, gen: &Generator, plan: &TransferPlan, fp: &FirstPass) -> Result<Var> {
    let emb = cx.ps.get(gen.embed_id()).value.clone();
    let mut alignments = Vec::with_capacity(fp.hard.len());
    let mut weights = Vec::with_capacity(fp.hard.len());
    for (y, x) in fp.hard.iter().zip(&plan.sources) {
        let (t, w) = pseudo_alignment(gen, &emb, y, x)?;
        alignments.push(t);
        weights.push(w);
    }
    reconstruction_nll(
        cx,
        gen,
        Source::Rows { rows: fp.cycle_rows, lens: &fp.lens },
        &alignments,
        &plan.sources,
        &plan.source_styles,
        &weights,
    )
}

/// Transfer to the other style and back, scored against the original.
pub fn cycle_loss<R: RngCore>(cx: &mut Ctx, gen: &Generator, batch: &Batch, mode: GradApproxMode, rng: &mut R) -> Result<Var> {
    let (seqs, styles) = batch.sentences();
    let plan = plan_transfer(gen, &seqs, &styles, rng)?;
    if plan.is_empty() {
        return Ok(cx.g.scalar(0.0));
    }
    let fp = first_pass(cx, gen, &plan, mode)?;
    cycle_graph(cx, gen, &plan, &fp)
}

/// The tractable bound `-log P(tgt | src, T*) - log P(T* | src)` with
/// `T*` the pseudo alignment of `tgt` to `src`, and `T*` itself.
pub fn pseudo_alignment_bound(gen: &Generator, src: &TokenSeq, tgt: &TokenSeq, style: Style) -> Result<(f64, Alignment)> {
    let (t, _) = pseudo_alignment(gen, gen.embeddings(), src, tgt)?;
    let lp = gen.sequence_logprob(src, &t, tgt, style)? + gen.alignment_logprob(src, &t, style)?;
    Ok((-lp, t))
}
