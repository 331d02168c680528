use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{GradApproxMode, LossWeights, TrainConfig};
use super::losses::{one_hot, Batch};
use super::trainer::Trainer;
use crate::corpus::{NoiseConfig, Style, StyledCorpus, TokenSeq};
use crate::error::{Error, Result};
use crate::eval::corpus_bleu4;
use crate::model::{gumbel_noise, gumbel_sample, AlignmentMode, ArGenerator, Ctx, Generator, ModelConfig, Source, StepOutput};
use crate::numerics::{argmax, Adam, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    /// The parallel decoder with identity alignment.
    Nar,
    /// Left-to-right decoder with the same encoder.
    Ar,
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorKind::Nar => "NAR",
            GeneratorKind::Ar => "AR",
        })
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nar" => Ok(GeneratorKind::Nar),
            "ar" => Ok(GeneratorKind::Ar),
            _ => Err(Error::Config(format!("unknown generator kind {s:?} (nar|ar)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleRun {
    pub kind: GeneratorKind,
    pub mode: GradApproxMode,
    pub seed: u64,
    /// BLEU-4 of the second pass against the original held-out sentences.
    pub bleu: f64,
    pub final_loss: f64,
}

fn both(data: &StyledCorpus) -> (Vec<TokenSeq>, Vec<Style>) {
    Batch { x: data.style_x.clone(), y: data.style_y.clone() }.sentences()
}

fn reconstruction_bleu(originals: &[TokenSeq], back: &[TokenSeq]) -> Result<f64> {
    let refs: Vec<Vec<TokenSeq>> = originals.iter().map(|s| vec![s.clone()]).collect();
    corpus_bleu4(back, &refs)
}

/// Trains with the cycle loss alone, for `config.max_steps` updates, then
/// scores greedy round trips on `test`. Both generator kinds are told the
/// output length: the parallel one through identity alignment, the
/// left-to-right one by decoding exactly that many words.
pub fn cycle_only_training(
    train: &StyledCorpus,
    test: &StyledCorpus,
    kind: GeneratorKind,
    mode: GradApproxMode,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<CycleRun> {
    train.check_trainable()?;
    let config = TrainConfig { weights: LossWeights::cycle_only(), noise: NoiseConfig::none(), grad_approx: mode, ..config.clone() };
    config.validate()?;
    let model = ModelConfig { alignment: AlignmentMode::Simple, ..model.clone() };
    let mut init = ChaCha8Rng::seed_from_u64(config.seed);
    let (xs, styles) = both(test);
    let targets: Vec<Style> = styles.iter().map(|s| s.other()).collect();
    let lens: Vec<usize> = xs.iter().map(|x| x.len()).collect();
    match kind {
        GeneratorKind::Nar => {
            let gen = Generator::new(model, &mut init)?;
            let mut trainer = Trainer::new(gen, config.clone())?;
            let mut last = f64::NAN;
            trainer.train(train, |_, m| {
                last = m.l_cycle;
                Ok(())
            })?;
            let gen = &trainer.generator;
            let forward: Vec<TokenSeq> = gen.transfer(&xs, &targets)?.into_iter().map(|(y, _)| y).collect();
            let back: Vec<TokenSeq> = gen.transfer(&forward, &styles)?.into_iter().map(|(y, _)| y).collect();
            Ok(CycleRun { kind, mode, seed: config.seed, bleu: reconstruction_bleu(&xs, &back)?, final_loss: last })
        }
        GeneratorKind::Ar => {
            let mut ar = ArGenerator::new(model, &mut init)?;
            let mut opt = Adam::new(config.lr);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
            let mut last = f64::NAN;
            for step in 1..=config.max_steps {
                let batch = Batch::sample(train, config.batch_size, &mut rng)?;
                last = ar_cycle_step(&mut ar, &mut opt, &batch, mode, config.clip, &mut rng)?;
                if !last.is_finite() {
                    return Err(Error::NonFinite { step, l_self: 0.0, l_style: 0.0, l_cycle: last, grad_norm: f64::NAN });
                }
            }
            let forward = ar.transfer_with_lengths(&xs, &lens, &targets)?;
            let back = ar.transfer_with_lengths(&forward, &lens, &styles)?;
            Ok(CycleRun { kind, mode, seed: config.seed, bleu: reconstruction_bleu(&xs, &back)?, final_loss: last })
        }
    }
}

/// One cycle-loss update of the left-to-right generator. The relaxation is
/// applied to every generated word before it is fed back in; the second
/// pass is teacher-forced on the original sentence.
fn ar_cycle_step(ar: &mut ArGenerator, opt: &mut Adam, batch: &Batch, mode: GradApproxMode, clip: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (seqs, styles) = batch.sentences();
    let targets: Vec<Style> = styles.iter().map(|s| s.other()).collect();
    let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let vocab = ar.inner.config.vocab_size;
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &ar.inner.params);
    let enc = ar.encode(&mut cx, Source::Tokens(&seqs))?;
    let (rows, hard) = ar.generate(&mut cx, &enc, &lens, &targets, |cx, logits, _| {
        let n = cx.g.value(logits).len();
        match mode {
            GradApproxMode::GumbelSoftmax { temperature, straight_through } => {
                let (relaxed, hard) = gumbel_sample(cx.g, logits, temperature, &gumbel_noise(n, rng))?;
                let rows = if straight_through { cx.g.straight_through(relaxed) } else { relaxed };
                Ok(StepOutput { rows: Some(rows), hard })
            }
            GradApproxMode::SoftEmbedding => {
                let p = cx.g.softmax(logits);
                let v = cx.g.value(p);
                let hard = (0..v.rows()).map(|r| argmax(v.row_slice(r))).collect();
                Ok(StepOutput { rows: Some(p), hard })
            }
            GradApproxMode::StopGradient => {
                let (_, hard) = gumbel_sample(cx.g, logits, 1.0, &gumbel_noise(n, rng))?;
                Ok(StepOutput { rows: None, hard })
            }
        }
    })?;
    let rows = match rows {
        Some(r) => r,
        None => {
            let flat: Vec<usize> = hard.iter().flat_map(|s| s.iter().copied()).collect();
            cx.g.constant(one_hot(&flat, vocab)?)
        }
    };
    let enc2 = ar.encode(&mut cx, Source::Rows { rows, lens: &lens })?;
    let (logits, _) = ar.teacher_forced_logits(&mut cx, &enc2, Source::Tokens(&seqs), &styles)?;
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let nll = cx.g.cross_entropy(logits, ids)?;
    let s = cx.g.sum(nll);
    let loss = cx.g.scale(s, 1.0 / seqs.len() as f64);
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    ar.inner.params.accumulate(&grads, 1.0);
    ar.inner.params.clip_grad_norm(clip);
    opt.step(&mut ar.inner.params);
    Ok(value)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (m, (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}
