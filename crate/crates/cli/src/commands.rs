use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use aligntransfer::align::{count_aligned_pairs, render_alignment_pairs, render_pair_report, Alignment};
use aligntransfer::corpus::{
    build_vocabulary, default_synth_spec, generate_synthetic_corpus, load_reference_sets, read_tokenized, reference_path,
    write_corpus, write_lines, write_reference_sets, Style, StyledCorpus, SynthSpec, TokenSeq, Vocabulary,
};
use aligntransfer::eval::{
    pareto_filter, render_tradeoff_tsv, score_direction, DirectionInput, EvalReport, StyleClassifier,
    TradeoffPoint,
};
use aligntransfer::model::{load_checkpoint, save_checkpoint, Generator};
use aligntransfer::training::{cycle_only_training, mean_std, CycleRun, StepMetrics, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| CliError::Config(format!("{key} is required")))?;
    if !p.is_file() {
        return Err(CliError::Config(format!("{key}: no such file {}", p.display())));
    }
    Ok(p)
}

/// Reference prefixes are checked through their first set.
fn require_refs<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<Option<&'a Path>> {
    match p.as_deref() {
        None => Ok(None),
        Some(prefix) if reference_path(prefix, 0).is_file() => Ok(Some(prefix)),
        Some(prefix) => Err(CliError::Config(format!("{key}: no such file {}", reference_path(prefix, 0).display()))),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::Io(cfg.out_dir.clone(), e))?;
    Ok(&cfg.out_dir)
}

fn encode_all(vocab: &Vocabulary, raw: &[Vec<String>]) -> Vec<TokenSeq> {
    raw.iter().map(|s| vocab.encode(s)).collect()
}

fn check_lengths(cfg: &RunConfig, seqs: &[&[TokenSeq]]) -> Result<()> {
    let longest = seqs.iter().flat_map(|s| s.iter()).map(|s| s.len()).max().unwrap_or(0);
    if longest > cfg.model.max_len {
        return Err(CliError::Config(format!("model.max_len is {} but the data has a sentence of {longest} words", cfg.model.max_len)));
    }
    Ok(())
}

/// Greedy transfer in chunks. Empty inputs give empty outputs.
fn transfer_all(gen: &Generator, xs: &[TokenSeq], target: Style, batch: usize) -> aligntransfer::Result<Vec<(TokenSeq, Alignment)>> {
    let mut out: Vec<Option<(TokenSeq, Alignment)>> = vec![None; xs.len()];
    let live: Vec<usize> = (0..xs.len()).filter(|&i| !xs[i].is_empty()).collect();
    for chunk in live.chunks(batch.max(1)) {
        let inputs: Vec<TokenSeq> = chunk.iter().map(|&i| xs[i].clone()).collect();
        let res = gen.transfer(&inputs, &vec![target; inputs.len()])?;
        for (&i, r) in chunk.iter().zip(res) {
            out[i] = Some(r);
        }
    }
    out.into_iter()
        .map(|r| match r {
            Some(r) => Ok(r),
            None => Ok((TokenSeq::new(Vec::new()), Alignment::new(Vec::new(), 0)?)),
        })
        .collect()
}

fn load_test(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Option<StyledCorpus>> {
    let (tx, ty) = match (&cfg.data.test_x, &cfg.data.test_y) {
        (None, None) => return Ok(None),
        _ => (require(&cfg.data.test_x, "data.test_x")?, require(&cfg.data.test_y, "data.test_y")?),
    };
    let style_x = encode_all(vocab, &read_tokenized(tx)?);
    let style_y = encode_all(vocab, &read_tokenized(ty)?);
    let refs_x = match require_refs(&cfg.data.refs_x, "data.refs_x")? {
        Some(p) => Some(load_reference_sets(p, vocab, style_x.len())?),
        None => None,
    };
    let refs_y = match require_refs(&cfg.data.refs_y, "data.refs_y")? {
        Some(p) => Some(load_reference_sets(p, vocab, style_y.len())?),
        None => None,
    };
    Ok(Some(StyledCorpus { style_x, style_y, refs_x, refs_y }))
}

fn evaluate(gen: &Generator, test: &StyledCorpus, clf: &StyleClassifier, batch: usize) -> aligntransfer::Result<EvalReport> {
    let mut dirs = Vec::new();
    for from in [Style::X, Style::Y] {
        let sources = test.sentences(from);
        let outputs: Vec<TokenSeq> = transfer_all(gen, sources, from.other(), batch)?.into_iter().map(|r| r.0).collect();
        dirs.push(score_direction(
            clf,
            &DirectionInput { sources, outputs: &outputs, references: test.references(from), target: from.other() },
        )?);
    }
    let y_to_x = dirs.pop().expect("two directions");
    let x_to_y = dirs.pop().expect("two directions");
    Ok(EvalReport::new(x_to_y, y_to_x, clf))
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let mut spec = match &cfg.synth.spec {
        Some(_) => SynthSpec::load(require(&cfg.synth.spec, "synth.spec")?)?,
        None => default_synth_spec(),
    };
    if let Some(n) = cfg.synth.train_per_style {
        spec.train_per_style = n;
    }
    if let Some(n) = cfg.synth.test_per_style {
        spec.test_per_style = n;
    }
    spec.validate()?;
    let dir = out_dir(cfg)?;
    cfg.echo()?;
    let data = generate_synthetic_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.synth.seed))?;
    for (split, corpus) in [("train", &data.train), ("test", &data.test)] {
        for (s, name) in [(Style::X, "x"), (Style::Y, "y")] {
            let file = dir.join(format!("{split}.{name}"));
            write_corpus(&file, corpus.sentences(s), &data.vocab)?;
            if let Some(refs) = corpus.references(s) {
                write_reference_sets(&dir.join(format!("{split}.{name}.ref")), refs, &data.vocab)?;
            }
        }
    }
    write_file(&dir.join("spec.txt"), &spec.to_text())?;
    eprintln!(
        "wrote {} + {} training and {} + {} test sentences to {}",
        data.train.style_x.len(),
        data.train.style_y.len(),
        data.test.style_x.len(),
        data.test.style_y.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let raw_x = read_tokenized(require(&cfg.data.train_x, "data.train_x")?)?;
    let raw_y = read_tokenized(require(&cfg.data.train_y, "data.train_y")?)?;
    let all: Vec<Vec<String>> = raw_x.iter().chain(&raw_y).cloned().collect();
    let vocab = build_vocabulary(&all, 1)?;
    let train = StyledCorpus { style_x: encode_all(&vocab, &raw_x), style_y: encode_all(&vocab, &raw_y), refs_x: None, refs_y: None };
    let test = load_test(cfg, &vocab)?;

    let mut cfg = cfg.clone();
    cfg.model.vocab_size = vocab.len();
    let mut lens: Vec<&[TokenSeq]> = vec![&train.style_x, &train.style_y];
    if let Some(t) = &test {
        lens.push(&t.style_x);
        lens.push(&t.style_y);
    }
    check_lengths(&cfg, &lens)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let dir = out_dir(&cfg)?.to_path_buf();
    cfg.echo()?;

    let clf = match &test {
        Some(_) => Some(StyleClassifier::train(&train, &cfg.classifier)?),
        None => None,
    };
    let gen = Generator::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let mut trainer = Trainer::new(gen, cfg.train.clone())?;

    let metrics_path = dir.join("metrics.tsv");
    let file = fs::File::create(&metrics_path).map_err(|e| CliError::Io(metrics_path.clone(), e))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{}", StepMetrics::TSV_HEADER).map_err(|e| CliError::Io(metrics_path.clone(), e))?;
    let reports = dir.join("reports");
    if test.is_some() {
        fs::create_dir_all(&reports).map_err(|e| CliError::Io(reports.clone(), e))?;
    }
    let ckpt = dir.join("model.ckpt");
    let run = format!("seed{}", cfg.train.seed);
    let max_steps = cfg.train.max_steps;
    let every = cfg.train.eval_every;
    let progress = (max_steps / 20).max(1);
    let batch = cfg.transfer.batch;
    let mut points: Vec<TradeoffPoint> = Vec::new();
    let mut last_report: Option<EvalReport> = None;
    let t0 = Instant::now();

    trainer.train(&train, |t, m| {
        writeln!(metrics, "{}", m.to_tsv()).map_err(|e| aligntransfer::Error::Io { path: metrics_path.clone(), source: e })?;
        if m.step % progress == 0 {
            eprintln!("step {}/{max_steps} self {:.3} style {:.3} cycle {:.3} ({:.0}s)", m.step, m.l_self, m.l_style, m.l_cycle, t0.elapsed().as_secs_f64());
        }
        let due = (every > 0 && m.step % every == 0) || m.step == max_steps;
        if let (true, Some(test), Some(clf)) = (due, &test, &clf) {
            let report = evaluate(&t.generator, test, clf, batch)?;
            let path = reports.join(format!("step_{:06}.txt", m.step));
            fs::write(&path, report.to_text(false)).map_err(|e| aligntransfer::Error::Io { path, source: e })?;
            points.push(TradeoffPoint {
                acc: report.average.acc,
                ref_bleu: report.average.ref_bleu.unwrap_or(report.average.self_bleu),
                epoch: m.step,
                run: run.clone(),
            });
            eprintln!(
                "eval step {}: acc {:.1} self_bleu {:.1} ref_bleu {}",
                m.step,
                report.average.acc,
                report.average.self_bleu,
                report.average.ref_bleu.map(|b| format!("{b:.1}")).unwrap_or_else(|| "-".into())
            );
            last_report = Some(report);
            save_checkpoint(&ckpt, &t.generator, &vocab)?;
        }
        Ok(())
    })?;
    metrics.flush().map_err(|e| CliError::Io(metrics_path.clone(), e))?;
    save_checkpoint(&ckpt, &trainer.generator, &vocab)?;
    if let Some(r) = last_report {
        write_file(&dir.join("report.txt"), &r.to_text(false))?;
        write_file(&dir.join("tradeoff.tsv"), &render_tradeoff_tsv(&points))?;
        write_file(&dir.join("frontier.tsv"), &render_tradeoff_tsv(&pareto_filter(&points)))?;
    }
    eprintln!("trained {max_steps} steps in {:.0}s, checkpoint {}", t0.elapsed().as_secs_f64(), ckpt.display());
    Ok(())
}

pub fn transfer(cfg: &RunConfig) -> Result<()> {
    let ckpt = require(&cfg.transfer.checkpoint, "transfer.checkpoint")?;
    let input = require(&cfg.transfer.input, "transfer.input")?;
    let dir = out_dir(cfg)?;
    cfg.echo()?;
    let (gen, vocab) = load_checkpoint(ckpt)?;
    let xs = encode_all(&vocab, &read_tokenized(input)?);
    check_lengths(&RunConfig { model: gen.config.clone(), ..cfg.clone() }, &[&xs])?;
    let t0 = Instant::now();
    let results = transfer_all(&gen, &xs, cfg.transfer.target, cfg.transfer.batch)?;
    let secs = t0.elapsed().as_secs_f64();
    write_lines(&dir.join("output.txt"), results.iter().map(|(y, _)| vocab.decode_line(y)))?;
    write_lines(&dir.join("alignments.txt"), results.iter().map(|(_, t)| t.to_line()))?;
    let mut pairs = String::new();
    for (x, (y, t)) in xs.iter().zip(&results) {
        if !x.is_empty() {
            pairs.push_str(&render_alignment_pairs(x, t, y, &vocab)?);
        }
        pairs.push('\n');
    }
    write_file(&dir.join("alignments.pairs.txt"), &pairs)?;
    if !xs.is_empty() {
        eprintln!("transferred {} sentences, {:.6} s per sentence", xs.len(), secs / xs.len() as f64);
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let tx = require(&cfg.data.train_x, "data.train_x")?;
    let ty = require(&cfg.data.train_y, "data.train_y")?;
    let hyp_x = require(&cfg.eval.hyp_x, "eval.hyp_x")?;
    let hyp_y = require(&cfg.eval.hyp_y, "eval.hyp_y")?;
    let src_x = require(if cfg.eval.src_x.is_some() { &cfg.eval.src_x } else { &cfg.data.test_x }, "eval.src_x")?;
    let src_y = require(if cfg.eval.src_y.is_some() { &cfg.eval.src_y } else { &cfg.data.test_y }, "eval.src_y")?;
    let refs_x = require_refs(if cfg.eval.refs_x.is_some() { &cfg.eval.refs_x } else { &cfg.data.refs_x }, "eval.refs_x")?;
    let refs_y = require_refs(if cfg.eval.refs_y.is_some() { &cfg.eval.refs_y } else { &cfg.data.refs_y }, "eval.refs_y")?;
    let dir = out_dir(cfg)?;
    cfg.echo()?;

    let files: Vec<Vec<Vec<String>>> = [tx, ty, src_x, src_y, hyp_x, hyp_y].iter().map(|p| read_tokenized(p)).collect::<aligntransfer::Result<_>>()?;
    let mut words: Vec<Vec<String>> = files.iter().flatten().cloned().collect();
    for prefix in [refs_x, refs_y].into_iter().flatten() {
        let mut k = 0;
        while reference_path(prefix, k).is_file() {
            words.extend(read_tokenized(&reference_path(prefix, k))?);
            k += 1;
        }
    }
    let vocab = build_vocabulary(&words, 1)?;
    let enc: Vec<Vec<TokenSeq>> = files.iter().map(|f| encode_all(&vocab, f)).collect();
    let train = StyledCorpus { style_x: enc[0].clone(), style_y: enc[1].clone(), refs_x: None, refs_y: None };
    let clf = StyleClassifier::train(&train, &cfg.classifier)?;
    let rx = refs_x.map(|p| load_reference_sets(p, &vocab, enc[2].len())).transpose()?;
    let ry = refs_y.map(|p| load_reference_sets(p, &vocab, enc[3].len())).transpose()?;
    let x_to_y = score_direction(&clf, &DirectionInput { sources: &enc[2], outputs: &enc[4], references: rx.as_deref(), target: Style::Y })?;
    let y_to_x = score_direction(&clf, &DirectionInput { sources: &enc[3], outputs: &enc[5], references: ry.as_deref(), target: Style::X })?;
    let report = EvalReport::new(x_to_y, y_to_x, &clf);
    write_file(&dir.join("report.txt"), &report.to_text(false))?;
    eprint!("{}", report.to_text(false));
    Ok(())
}

pub fn align_analyze(cfg: &RunConfig) -> Result<()> {
    let src = require(&cfg.analyze.source, "analyze.source")?;
    let ali = require(&cfg.analyze.alignments, "analyze.alignments")?;
    let outp = require(&cfg.analyze.output, "analyze.output")?;
    let dir = out_dir(cfg)?;
    cfg.echo()?;
    let raw_src = read_tokenized(src)?;
    let raw_out = read_tokenized(outp)?;
    let ali_text = fs::read_to_string(ali).map_err(|e| CliError::Io(ali.to_path_buf(), e))?;
    let ali_lines: Vec<&str> = ali_text.lines().collect();
    if raw_src.len() != raw_out.len() || raw_src.len() != ali_lines.len() {
        return Err(aligntransfer::Error::LengthMismatch(format!(
            "{} source, {} alignment and {} output lines",
            raw_src.len(),
            ali_lines.len(),
            raw_out.len()
        ))
        .into());
    }
    let all: Vec<Vec<String>> = raw_src.iter().chain(&raw_out).cloned().collect();
    let vocab = build_vocabulary(&all, 1)?;
    let mut results = Vec::new();
    for (n, ((s, a), o)) in raw_src.iter().zip(&ali_lines).zip(&raw_out).enumerate() {
        if s.is_empty() {
            continue;
        }
        let x = vocab.encode(s);
        let t = Alignment::parse_line(a, x.len()).map_err(|e| CliError::Config(format!("{}:{}: {e}", ali.display(), n + 1)))?;
        let y = vocab.encode(o);
        if y.len() != t.len() {
            return Err(CliError::Config(format!("{}:{}: alignment has {} slots, output has {} words", ali.display(), n + 1, t.len(), y.len())));
        }
        results.push((x, t, y));
    }
    let table = count_aligned_pairs(&results)?;
    write_file(&dir.join("pairs.txt"), &render_pair_report(&table, &vocab))?;
    eprintln!("counted aligned pairs over {} sentences", results.len());
    Ok(())
}

pub fn cycle_exp(cfg: &RunConfig) -> Result<()> {
    let files: Vec<Vec<Vec<String>>> = [
        require(&cfg.data.train_x, "data.train_x")?,
        require(&cfg.data.train_y, "data.train_y")?,
        require(&cfg.data.test_x, "data.test_x")?,
        require(&cfg.data.test_y, "data.test_y")?,
    ]
    .iter()
    .map(|p| read_tokenized(p))
    .collect::<aligntransfer::Result<_>>()?;
    let all: Vec<Vec<String>> = files.iter().flatten().cloned().collect();
    let vocab = build_vocabulary(&all, 1)?;
    let enc: Vec<Vec<TokenSeq>> = files.iter().map(|f| encode_all(&vocab, f)).collect();
    let mut cfg = cfg.clone();
    cfg.model.vocab_size = vocab.len();
    check_lengths(&cfg, &[&enc[0], &enc[1], &enc[2], &enc[3]])?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let dir = out_dir(&cfg)?.to_path_buf();
    cfg.echo()?;
    let train = StyledCorpus { style_x: enc[0].clone(), style_y: enc[1].clone(), refs_x: None, refs_y: None };
    let test = StyledCorpus { style_x: enc[2].clone(), style_y: enc[3].clone(), refs_x: None, refs_y: None };

    let mut runs: Vec<CycleRun> = Vec::new();
    let mut tsv = String::from("generator\tmode\tseed\tbleu\tfinal_loss\n");
    for &kind in &cfg.cycle.kinds {
        for &mode in &cfg.cycle.modes {
            for &seed in &cfg.cycle.seeds {
                let t0 = Instant::now();
                let tc = aligntransfer::training::TrainConfig { seed, ..cfg.train.clone() };
                let r = cycle_only_training(&train, &test, kind, mode, &cfg.model, &tc)?;
                eprintln!("{kind} {} seed {seed}: bleu {:.2} ({:.0}s)", mode.name(), r.bleu, t0.elapsed().as_secs_f64());
                let _ = writeln!(tsv, "{}\t{}\t{}\t{:.4}\t{:.6}", r.kind, r.mode.name(), r.seed, r.bleu, r.final_loss);
                runs.push(r);
            }
        }
    }
    write_file(&dir.join("cycle_runs.tsv"), &tsv)?;
    let mut summary = String::from("generator\tmode\tmean_bleu\tstd_bleu\truns\n");
    for &kind in &cfg.cycle.kinds {
        for &mode in &cfg.cycle.modes {
            let b: Vec<f64> = runs.iter().filter(|r| r.kind == kind && r.mode == mode).map(|r| r.bleu).collect();
            let (m, s) = mean_std(&b);
            let _ = writeln!(summary, "{kind}\t{}\t{m:.2}\t{s:.2}\t{}", mode.name(), b.len());
        }
    }
    write_file(&dir.join("cycle_summary.tsv"), &summary)?;
    eprint!("{summary}");
    Ok(())
}
