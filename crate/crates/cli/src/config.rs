use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aligntransfer::corpus::Style;
use aligntransfer::eval::ClassifierConfig;
use aligntransfer::model::ModelConfig;
use aligntransfer::training::{GeneratorKind, GradApproxMode, TrainConfig};

use crate::error::CliError;

/// Everything a command may read, resolved from defaults, an optional
/// config file and command-line overrides (in that order).
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub synth: SynthOptions,
    pub transfer: TransferOptions,
    pub eval: EvalPaths,
    pub analyze: AnalyzePaths,
    pub cycle: CycleOptions,
}

#[derive(Clone, Debug, Default)]
pub struct DataPaths {
    pub train_x: Option<PathBuf>,
    pub train_y: Option<PathBuf>,
    pub test_x: Option<PathBuf>,
    pub test_y: Option<PathBuf>,
    /// Prefixes of the reference sets of the test files (`<prefix>.0`, ...).
    pub refs_x: Option<PathBuf>,
    pub refs_y: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub spec: Option<PathBuf>,
    pub seed: u64,
    pub train_per_style: Option<usize>,
    pub test_per_style: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TransferOptions {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub target: Style,
    pub batch: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EvalPaths {
    pub hyp_x: Option<PathBuf>,
    pub hyp_y: Option<PathBuf>,
    pub src_x: Option<PathBuf>,
    pub src_y: Option<PathBuf>,
    pub refs_x: Option<PathBuf>,
    pub refs_y: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct AnalyzePaths {
    pub source: Option<PathBuf>,
    pub alignments: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct CycleOptions {
    pub kinds: Vec<GeneratorKind>,
    pub modes: Vec<GradApproxMode>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("."),
            data: DataPaths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            synth: SynthOptions { spec: None, seed: 1, train_per_style: None, test_per_style: None },
            transfer: TransferOptions { checkpoint: None, input: None, target: Style::Y, batch: 64 },
            eval: EvalPaths::default(),
            analyze: AnalyzePaths::default(),
            cycle: CycleOptions {
                kinds: vec![GeneratorKind::Nar, GeneratorKind::Ar],
                modes: vec![GradApproxMode::default(), GradApproxMode::StopGradient, GradApproxMode::SoftEmbedding],
                seeds: vec![1, 2, 3],
            },
        }
    }
}

fn typed<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = value.split(',').filter(|s| !s.trim().is_empty()).map(|s| typed(key, s.trim())).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn style_name(s: Style) -> &'static str {
    match s {
        Style::X => "x",
        Style::Y => "y",
    }
}

fn parse_style(key: &str, value: &str) -> Result<Style, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "x" => Ok(Style::X),
        "y" => Ok(Style::Y),
        _ => Err(CliError::Config(format!("{key}: expected x or y, got {value:?}"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one `section.key`. Unknown keys and unparsable values are
    /// configuration errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (section, name) = key.split_once('.').ok_or_else(|| CliError::Config(format!("unknown key {key}")))?;
        let core = |e: aligntransfer::Error| match e {
            aligntransfer::Error::Config(m) if m.starts_with("unknown key") => CliError::Config(format!("unknown key {key}")),
            other => CliError::Config(format!("{key}: {other}")),
        };
        match section {
            "io" if name == "out_dir" => self.out_dir = PathBuf::from(value),
            "model" => self.model.set(name, value).map_err(core)?,
            "train" => self.train.set(name, value).map_err(core)?,
            "noise" => self.train.set(key, value).map_err(core)?,
            "data" => {
                let slot = match name {
                    "train_x" => &mut self.data.train_x,
                    "train_y" => &mut self.data.train_y,
                    "test_x" => &mut self.data.test_x,
                    "test_y" => &mut self.data.test_y,
                    "refs_x" => &mut self.data.refs_x,
                    "refs_y" => &mut self.data.refs_y,
                    _ => return Err(CliError::Config(format!("unknown key {key}"))),
                };
                *slot = opt_path(value);
            }
            "classifier" => match name {
                "epochs" => self.classifier.epochs = typed(key, value)?,
                "lr" => self.classifier.lr = typed(key, value)?,
                "l2" => self.classifier.l2 = typed(key, value)?,
                "holdout" => self.classifier.holdout = typed(key, value)?,
                "seed" => self.classifier.seed = typed(key, value)?,
                _ => return Err(CliError::Config(format!("unknown key {key}"))),
            },
            "synth" => match name {
                "spec" => self.synth.spec = opt_path(value),
                "seed" => self.synth.seed = typed(key, value)?,
                "train_per_style" => self.synth.train_per_style = Some(typed(key, value)?),
                "test_per_style" => self.synth.test_per_style = Some(typed(key, value)?),
                _ => return Err(CliError::Config(format!("unknown key {key}"))),
            },
            "transfer" => match name {
                "checkpoint" => self.transfer.checkpoint = opt_path(value),
                "input" => self.transfer.input = opt_path(value),
                "target" => self.transfer.target = parse_style(key, value)?,
                "batch" => self.transfer.batch = typed(key, value)?,
                _ => return Err(CliError::Config(format!("unknown key {key}"))),
            },
            "eval" => {
                let slot = match name {
                    "hyp_x" => &mut self.eval.hyp_x,
                    "hyp_y" => &mut self.eval.hyp_y,
                    "src_x" => &mut self.eval.src_x,
                    "src_y" => &mut self.eval.src_y,
                    "refs_x" => &mut self.eval.refs_x,
                    "refs_y" => &mut self.eval.refs_y,
                    _ => return Err(CliError::Config(format!("unknown key {key}"))),
                };
                *slot = opt_path(value);
            }
            "analyze" => {
                let slot = match name {
                    "source" => &mut self.analyze.source,
                    "alignments" => &mut self.analyze.alignments,
                    "output" => &mut self.analyze.output,
                    _ => return Err(CliError::Config(format!("unknown key {key}"))),
                };
                *slot = opt_path(value);
            }
            "cycle" => match name {
                "kinds" => self.cycle.kinds = list(key, value)?,
                "modes" => self.cycle.modes = list(key, value)?,
                "seeds" => self.cycle.seeds = list(key, value)?,
                _ => return Err(CliError::Config(format!("unknown key {key}"))),
            },
            _ => return Err(CliError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order. Feeding the
    /// result back through [`RunConfig::set`] reproduces this config.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![("io.out_dir".into(), self.out_dir.display().to_string())];
        let d = &self.data;
        for (k, v) in [
            ("train_x", &d.train_x),
            ("train_y", &d.train_y),
            ("test_x", &d.test_x),
            ("test_y", &d.test_y),
            ("refs_x", &d.refs_x),
            ("refs_y", &d.refs_y),
        ] {
            out.push((format!("data.{k}"), path_str(v)));
        }
        out.extend(self.model.entries().into_iter().map(|(k, v)| (format!("model.{k}"), v)));
        for (k, v) in self.train.entries() {
            let key = if k.starts_with("noise.") { k.to_string() } else { format!("train.{k}") };
            out.push((key, v));
        }
        let c = &self.classifier;
        out.push(("classifier.epochs".into(), c.epochs.to_string()));
        out.push(("classifier.lr".into(), c.lr.to_string()));
        out.push(("classifier.l2".into(), c.l2.to_string()));
        out.push(("classifier.holdout".into(), c.holdout.to_string()));
        out.push(("classifier.seed".into(), c.seed.to_string()));
        out.push(("synth.spec".into(), path_str(&self.synth.spec)));
        out.push(("synth.seed".into(), self.synth.seed.to_string()));
        if let Some(n) = self.synth.train_per_style {
            out.push(("synth.train_per_style".into(), n.to_string()));
        }
        if let Some(n) = self.synth.test_per_style {
            out.push(("synth.test_per_style".into(), n.to_string()));
        }
        out.push(("transfer.checkpoint".into(), path_str(&self.transfer.checkpoint)));
        out.push(("transfer.input".into(), path_str(&self.transfer.input)));
        out.push(("transfer.target".into(), style_name(self.transfer.target).into()));
        out.push(("transfer.batch".into(), self.transfer.batch.to_string()));
        let e = &self.eval;
        for (k, v) in [("hyp_x", &e.hyp_x), ("hyp_y", &e.hyp_y), ("src_x", &e.src_x), ("src_y", &e.src_y), ("refs_x", &e.refs_x), ("refs_y", &e.refs_y)] {
            out.push((format!("eval.{k}"), path_str(v)));
        }
        let a = &self.analyze;
        for (k, v) in [("source", &a.source), ("alignments", &a.alignments), ("output", &a.output)] {
            out.push((format!("analyze.{k}"), path_str(v)));
        }
        out.push(("cycle.kinds".into(), join(&self.cycle.kinds).to_ascii_lowercase()));
        out.push(("cycle.modes".into(), self.cycle.modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")));
        out.push(("cycle.seeds".into(), join(&self.cycle.seeds)));
        out
    }

    /// The resolved config in the file format read by [`parse_config_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            if !v.is_empty() {
                s.push(' ');
                s.push_str(&v);
            }
            s.push('\n');
        }
        s
    }

    /// Writes the resolved config to `<out_dir>/config.txt`.
    pub fn echo(&self) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out_dir).map_err(|e| CliError::Io(self.out_dir.clone(), e))?;
        let p = self.out_dir.join("config.txt");
        fs::write(&p, self.to_text()).map_err(|e| CliError::Io(p.clone(), e))?;
        Ok(p)
    }
}

/// Applies a flat `section.key value` text (one pair per line, `#` starts a
/// comment, a key alone sets an empty value).
pub fn parse_config_text(cfg: &mut RunConfig, text: &str, origin: &Path) -> Result<(), CliError> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once(char::is_whitespace) {
            Some((k, v)) => (k, v.trim()),
            None => (line, ""),
        };
        cfg.set(key, value).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}:{}: {m}", origin.display(), n + 1)),
            other => other,
        })?;
    }
    Ok(())
}

/// Resolves defaults, then `--config FILE` (wherever it appears), then every
/// `--section.key value` flag in order.
pub fn parse_config(args: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let mut pairs = Vec::new();
    let mut file = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").ok_or_else(|| CliError::Usage(format!("expected --section.key, got {a:?}")))?;
        let value = it.next().ok_or_else(|| CliError::Usage(format!("missing value for --{key}")))?;
        if key == "config" {
            file = Some(PathBuf::from(value));
        } else {
            pairs.push((key.to_string(), value.clone()));
        }
    }
    if let Some(f) = file {
        let text = fs::read_to_string(&f).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", f.display())))?;
        parse_config_text(&mut cfg, &text, &f)?;
    }
    for (k, v) in pairs {
        cfg.set(&k, &v)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.conf");
        fs::write(&f, "train.lr 1e-4\nmodel.hidden_dim 64 # comment\n").unwrap();
        let cfg = parse_config(&args(&["--train.lr", "1e-3", "--config", f.to_str().unwrap()])).unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.model.hidden_dim, 64);
    }

    #[test]
    fn unknown_key_is_named() {
        match parse_config(&args(&["--train.lrr", "1"])) {
            Err(CliError::Config(m)) => assert!(m.contains("train.lrr"), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse_config(&args(&["--bogus", "1"])) {
            Err(CliError::Config(m)) => assert!(m.contains("bogus"), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse_config(&args(&["--model.hidden_dim", "wide"])) {
            Err(CliError::Config(m)) => assert!(m.contains("model.hidden_dim"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("empty.conf");
        fs::write(&f, "").unwrap();
        let cfg = parse_config(&args(&["--config", f.to_str().unwrap(), "--data.train_x", "a.txt", "--transfer.target", "x"])).unwrap();
        assert_eq!(cfg.data.train_x, Some(PathBuf::from("a.txt")));
        assert_eq!(cfg.transfer.target, Style::X);
    }

    #[test]
    fn echoed_text_round_trips() {
        let cfg = parse_config(&args(&[
            "--train.grad_approx",
            "soft",
            "--noise.mask_prob",
            "0.3",
            "--cycle.kinds",
            "nar",
            "--cycle.seeds",
            "4,5",
            "--synth.train_per_style",
            "10",
        ]))
        .unwrap();
        let text = cfg.to_text();
        let mut back = RunConfig::default();
        parse_config_text(&mut back, &text, Path::new("echo")).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.cycle.seeds, vec![4, 5]);
        assert_eq!(back.train.noise.mask_prob, 0.3);
    }

    #[test]
    fn usage_errors() {
        assert!(matches!(parse_config(&args(&["train.lr", "1"])), Err(CliError::Usage(_))));
        assert!(matches!(parse_config(&args(&["--train.lr"])), Err(CliError::Usage(_))));
    }
}
