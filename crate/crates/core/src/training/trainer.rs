use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::discriminator::Discriminator;
use super::losses::{cycle_graph, first_pass, plan_self_reconstruction, plan_transfer, self_reconstruction_graph, style_terms, Batch, FirstPass, TransferPlan};
use crate::corpus::{Style, StyledCorpus, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{Ctx, Generator, Source};
use crate::numerics::{Adam, Graph, Tensor};

/// One generator update. Terms whose weight is zero are not evaluated and
/// report 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub l_self: f64,
    pub l_style: f64,
    pub l_cycle: f64,
    /// Mean loss of the most recent discriminator round.
    pub disc_loss: f64,
    /// Generator gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepMetrics {
    pub const TSV_HEADER: &'static str = "step\tl_self\tl_style\tl_cycle\tdisc_loss\tgrad_norm";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.l_self, self.l_style, self.l_cycle, self.disc_loss, self.grad_norm
        )
    }
}

/// Generator, adversary and their optimizers. All randomness comes from one
/// generator seeded by `config.seed`.
pub struct Trainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub config: TrainConfig,
    gen_opt: Adam,
    disc_opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
    disc_loss: f64,
}

impl Trainer {
    pub fn new(generator: Generator, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if generator.config.alignment == crate::model::AlignmentMode::Simple && config.noise.changes_length() {
            return Err(Error::Config("simple alignment needs length-preserving noise (set noise.drop_prob and noise.insert_prob to 0)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let discriminator = Discriminator::new(
            generator.config.vocab_size,
            config.disc_dim,
            config.disc_layers,
            generator.config.max_len + generator.config.max_slack,
            &mut rng,
        )?;
        Ok(Trainer {
            gen_opt: Adam::new(config.lr),
            disc_opt: Adam::new(config.disc_lr),
            generator,
            discriminator,
            config,
            rng,
            step: 0,
            disc_loss: 0.0,
        })
    }

    /// Generator updates done so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }

    /// Hard transfers of the batch into the other style, sampled the same
    /// way as during generator updates.
    fn sample_transfers(&mut self, seqs: &[TokenSeq], styles: &[Style]) -> Result<(Vec<TokenSeq>, Vec<Style>)> {
        let plan = plan_transfer(&self.generator, seqs, styles, &mut self.rng)?;
        if plan.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.generator.params);
        let fp = first_pass(&mut cx, &self.generator, &plan, crate::training::GradApproxMode::StopGradient)?;
        Ok((fp.hard, plan.source_styles))
    }

    /// One discriminator update: real sentences labelled with their style,
    /// transferred sentences labelled with the style they came from. The
    /// generator is not touched.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<f64> {
        let (real, real_styles) = batch.sentences();
        let (fake, fake_styles) = self.sample_transfers(&real, &real_styles)?;
        let seqs: Vec<TokenSeq> = real.into_iter().chain(fake).collect();
        let labels: Vec<Style> = real_styles.into_iter().chain(fake_styles).collect();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.discriminator.params);
        let nll = self.discriminator.nll(&mut cx, Source::Tokens(&seqs), &labels)?;
        let s = cx.g.sum(nll);
        let loss = cx.g.scale(s, 1.0 / seqs.len() as f64);
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        self.discriminator.params.accumulate(&grads, 1.0);
        self.discriminator.params.clip_grad_norm(self.config.clip);
        self.disc_opt.step(&mut self.discriminator.params);
        Ok(value)
    }

    /// One generator update on `batch` with the weighted sum of the three
    /// losses.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let w = self.config.weights;
        let mode = self.config.grad_approx;
        let self_plan = if w.alpha > 0.0 {
            Some(plan_self_reconstruction(&self.generator, batch, &self.config.noise, &mut self.rng)?)
        } else {
            None
        };
        let transfer_plan = if w.uses_style() || w.gamma > 0.0 {
            let (seqs, styles) = batch.sentences();
            Some(plan_transfer(&self.generator, &seqs, &styles, &mut self.rng)?).filter(|p| !p.is_empty())
        } else {
            None
        };
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.generator.params);
        let mut parts = Vec::new();
        let (mut l_self, mut l_style, mut l_cycle) = (0.0, 0.0, 0.0);
        if let Some(plan) = &self_plan {
            let l = self_reconstruction_graph(&mut cx, &self.generator, plan)?;
            l_self = cx.g.value(l).item();
            parts.push(cx.g.scale(l, w.alpha));
        }
        if let Some(plan) = &transfer_plan {
            let fp: FirstPass = first_pass(&mut cx, &self.generator, plan, mode)?;
            if w.uses_style() {
                let (value, weighted) = self.weighted_style(&mut cx, plan, &fp)?;
                l_style = value;
                parts.push(weighted);
            }
            if w.gamma > 0.0 {
                let l = cycle_graph(&mut cx, &self.generator, plan, &fp)?;
                l_cycle = cx.g.value(l).item();
                parts.push(cx.g.scale(l, w.gamma));
            }
        }
        let mut grad_norm = 0.0;
        if let Some((&first, rest)) = parts.split_first() {
            let mut total = first;
            for &p in rest {
                total = cx.g.add(total, p)?;
            }
            let grads = g.backward(total)?;
            self.generator.params.accumulate(&grads, 1.0);
            grad_norm = self.generator.params.clip_grad_norm(self.config.clip);
        }
        self.step += 1;
        let m = StepMetrics { step: self.step, l_self, l_style, l_cycle, disc_loss: self.disc_loss, grad_norm };
        if ![l_self, l_style, l_cycle, grad_norm].iter().all(|v| v.is_finite()) {
            self.generator.params.zero_grad();
            return Err(Error::NonFinite { step: m.step, l_self, l_style, l_cycle, grad_norm });
        }
        self.gen_opt.step(&mut self.generator.params);
        Ok(m)
    }

    /// Style loss averaged over sentences (unweighted, for reporting) and
    /// the per-direction weighted term that enters the objective.
    fn weighted_style(&self, cx: &mut Ctx, plan: &TransferPlan, fp: &FirstPass) -> Result<(f64, crate::numerics::Var)> {
        let terms = style_terms(cx, &self.discriminator, plan, fp)?;
        let n = plan.sources.len() as f64;
        let value = cx.g.value(terms).data().iter().sum::<f64>() / n;
        let w: Vec<f64> = plan
            .target_styles()
            .iter()
            .map(|s| match s {
                Style::X => self.config.weights.beta_x,
                Style::Y => self.config.weights.beta_y,
            } / n)
            .collect();
        let wn = w.len();
        let wv = cx.g.constant(Tensor::new(vec![wn], w)?);
        let weighted = cx.g.mul(terms, wv)?;
        Ok((value, cx.g.sum(weighted)))
    }

    /// One step of the adversarial schedule: before every block of
    /// `gen_steps` generator updates the discriminator gets `disc_steps`
    /// updates on fresh batches (skipped when the style loss is off).
    pub fn train_step(&mut self, data: &StyledCorpus) -> Result<StepMetrics> {
        if self.config.weights.uses_style() && self.step.is_multiple_of(self.config.gen_steps) && self.config.disc_steps > 0 {
            let mut total = 0.0;
            for _ in 0..self.config.disc_steps {
                let b = Batch::sample(data, self.config.batch_size, &mut self.rng)?;
                total += self.discriminator_step(&b)?;
            }
            self.disc_loss = total / self.config.disc_steps as f64;
        }
        let batch = Batch::sample(data, self.config.batch_size, &mut self.rng)?;
        self.generator_step(&batch)
    }

    /// Runs until `config.max_steps` generator updates are done, calling
    /// `on_step` after each one.
    pub fn train<F>(&mut self, data: &StyledCorpus, mut on_step: F) -> Result<()>
    where
        F: FnMut(&mut Trainer, &StepMetrics) -> Result<()>,
    {
        data.check_trainable()?;
        while self.step < self.config.max_steps {
            let m = self.train_step(data)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}
