use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::vocab::{TokenSeq, Vocabulary};
use super::Style;
use crate::error::{Error, Result};

/// One swappable word pair. `topic` words co-occur with the pair in both
/// styles, which makes the intended mapping recoverable from context.
#[derive(Clone, Debug, PartialEq)]
pub struct LexiconPair {
    pub x: String,
    pub y: String,
    pub topic: Vec<String>,
}

/// Description of a lexicon-swap task.
///
/// File format, one entry per line, `#` starts a comment:
///
/// ```text
/// pair good bad food meal
/// pair great awful staff
/// content the a place was
/// filler_x lol
/// filler_prob 0.3
/// min_len 5
/// max_len 12
/// train_per_style 2000
/// test_per_style 200
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub pairs: Vec<LexiconPair>,
    pub content: Vec<String>,
    pub filler_x: Option<String>,
    pub filler_y: Option<String>,
    /// Chance that a sentence carries its style's filler word at the end.
    pub filler_prob: f64,
    /// Chance that a non-style slot takes a topic word of a chosen pair.
    pub topic_prob: f64,
    /// Maximum number of style words per sentence.
    pub max_style_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_per_style: usize,
    pub test_per_style: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            pairs: Vec::new(),
            content: Vec::new(),
            filler_x: None,
            filler_y: None,
            filler_prob: 0.0,
            topic_prob: 0.5,
            max_style_words: 2,
            min_len: 5,
            max_len: 12,
            train_per_style: 2000,
            test_per_style: 200,
        }
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, key: &str, v: Option<&str>) -> Result<T> {
    v.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("{key} expects one numeric value"),
    })
}

impl SynthSpec {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let one = rest.first().copied();
            let ln = n + 1;
            match key {
                "pair" => {
                    if rest.len() < 2 {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: ln,
                            message: "pair needs an x word and a y word".into(),
                        });
                    }
                    spec.pairs.push(LexiconPair {
                        x: rest[0].into(),
                        y: rest[1].into(),
                        topic: rest[2..].iter().map(|s| s.to_string()).collect(),
                    });
                }
                "content" => spec.content.extend(rest.iter().map(|s| s.to_string())),
                "filler_x" => spec.filler_x = one.map(String::from),
                "filler_y" => spec.filler_y = one.map(String::from),
                "filler_prob" => spec.filler_prob = parse_num(path, ln, key, one)?,
                "topic_prob" => spec.topic_prob = parse_num(path, ln, key, one)?,
                "max_style_words" => spec.max_style_words = parse_num(path, ln, key, one)?,
                "min_len" => spec.min_len = parse_num(path, ln, key, one)?,
                "max_len" => spec.max_len = parse_num(path, ln, key, one)?,
                "train_per_style" => spec.train_per_style = parse_num(path, ln, key, one)?,
                "test_per_style" => spec.test_per_style = parse_num(path, ln, key, one)?,
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: ln,
                        message: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            s.push_str(&format!("pair {} {}", p.x, p.y));
            for t in &p.topic {
                s.push(' ');
                s.push_str(t);
            }
            s.push('\n');
        }
        if !self.content.is_empty() {
            s.push_str(&format!("content {}\n", self.content.join(" ")));
        }
        if let Some(f) = &self.filler_x {
            s.push_str(&format!("filler_x {f}\n"));
        }
        if let Some(f) = &self.filler_y {
            s.push_str(&format!("filler_y {f}\n"));
        }
        s.push_str(&format!("filler_prob {}\n", self.filler_prob));
        s.push_str(&format!("topic_prob {}\n", self.topic_prob));
        s.push_str(&format!("max_style_words {}\n", self.max_style_words));
        s.push_str(&format!("min_len {}\n", self.min_len));
        s.push_str(&format!("max_len {}\n", self.max_len));
        s.push_str(&format!("train_per_style {}\n", self.train_per_style));
        s.push_str(&format!("test_per_style {}\n", self.test_per_style));
        s
    }

    /// Checks that the lexicons form a bijection between two disjoint word
    /// sets that share nothing with the neutral words.
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::NotBijective("no lexicon pairs".into()));
        }
        let mut xs = HashSet::new();
        let mut ys = HashSet::new();
        for p in &self.pairs {
            if !xs.insert(p.x.as_str()) {
                return Err(Error::NotBijective(format!("{} maps to more than one word", p.x)));
            }
            if !ys.insert(p.y.as_str()) {
                return Err(Error::NotBijective(format!("{} is the image of more than one word", p.y)));
            }
        }
        if let Some(w) = xs.intersection(&ys).next() {
            return Err(Error::NotBijective(format!("{w} belongs to both lexicons")));
        }
        let neutral = self.neutral_words();
        for w in neutral.iter().chain(self.filler_x.iter()).chain(self.filler_y.iter()) {
            if xs.contains(w.as_str()) || ys.contains(w.as_str()) {
                return Err(Error::NotBijective(format!("{w} is both a style word and a neutral word")));
            }
        }
        if self.filler_x.is_some() && self.filler_x == self.filler_y {
            return Err(Error::NotBijective("both styles use the same filler".into()));
        }
        if self.content.is_empty() && self.pairs.iter().all(|p| p.topic.is_empty()) {
            return Err(Error::Config("synthetic spec needs content or topic words".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if self.max_style_words == 0 || self.max_style_words > self.min_len {
            return Err(Error::Config("max_style_words must be in 1..=min_len".into()));
        }
        for (k, p) in [("filler_prob", self.filler_prob), ("topic_prob", self.topic_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{k} must be in [0,1]")));
            }
        }
        Ok(())
    }

    fn neutral_words(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for w in self.pairs.iter().flat_map(|p| p.topic.iter()).chain(self.content.iter()) {
            if seen.insert(w.clone()) {
                out.push(w.clone());
            }
        }
        out
    }

    /// Vocabulary in a fixed order: x lexicon, y lexicon, neutral words, fillers.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut toks: Vec<String> = self.pairs.iter().map(|p| p.x.clone()).collect();
        toks.extend(self.pairs.iter().map(|p| p.y.clone()));
        toks.extend(self.neutral_words());
        toks.extend(self.filler_x.iter().cloned());
        toks.extend(self.filler_y.iter().cloned());
        Vocabulary::from_tokens(toks)
    }
}

/// Sentences of both styles, with optional line-aligned references that
/// carry each sentence into the other style.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StyledCorpus {
    pub style_x: Vec<TokenSeq>,
    pub style_y: Vec<TokenSeq>,
    pub refs_x: Option<Vec<Vec<TokenSeq>>>,
    pub refs_y: Option<Vec<Vec<TokenSeq>>>,
}

impl StyledCorpus {
    pub fn sentences(&self, style: Style) -> &[TokenSeq] {
        match style {
            Style::X => &self.style_x,
            Style::Y => &self.style_y,
        }
    }

    pub fn references(&self, style: Style) -> Option<&[Vec<TokenSeq>]> {
        match style {
            Style::X => self.refs_x.as_deref(),
            Style::Y => self.refs_y.as_deref(),
        }
    }

    pub fn check_trainable(&self) -> Result<()> {
        if self.style_x.is_empty() || self.style_y.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub train: StyledCorpus,
    pub test: StyledCorpus,
}

/// Maps sentences between the two styles of a spec. This is the oracle
/// transfer that defines the gold references.
#[derive(Clone, Debug)]
pub struct LexiconSwap {
    x_to_y: HashMap<usize, usize>,
    y_to_x: HashMap<usize, usize>,
    filler_x: Option<usize>,
    filler_y: Option<usize>,
}

impl LexiconSwap {
    pub fn new(spec: &SynthSpec, vocab: &Vocabulary) -> Result<Self> {
        spec.validate()?;
        let id = |w: &str| vocab.id(w).ok_or_else(|| Error::Config(format!("word {w} missing from vocabulary")));
        let mut x_to_y = HashMap::new();
        let mut y_to_x = HashMap::new();
        for p in &spec.pairs {
            let (x, y) = (id(&p.x)?, id(&p.y)?);
            x_to_y.insert(x, y);
            y_to_x.insert(y, x);
        }
        let filler_x = spec.filler_x.as_deref().map(id).transpose()?;
        let filler_y = spec.filler_y.as_deref().map(id).transpose()?;
        Ok(LexiconSwap { x_to_y, y_to_x, filler_x, filler_y })
    }

    /// Swaps every style word and removes the source style's filler.
    pub fn transfer(&self, seq: &[usize], from: Style) -> TokenSeq {
        let (map, filler) = match from {
            Style::X => (&self.x_to_y, self.filler_x),
            Style::Y => (&self.y_to_x, self.filler_y),
        };
        TokenSeq(
            seq.iter()
                .filter(|&&t| Some(t) != filler)
                .map(|t| *map.get(t).unwrap_or(t))
                .collect(),
        )
    }

    /// Style indicated by the lexicon words of a sentence, if unambiguous.
    pub fn style_of(&self, seq: &[usize]) -> Option<Style> {
        let xs = seq.iter().filter(|t| self.x_to_y.contains_key(t)).count();
        let ys = seq.iter().filter(|t| self.y_to_x.contains_key(t)).count();
        match xs.cmp(&ys) {
            std::cmp::Ordering::Greater => Some(Style::X),
            std::cmp::Ordering::Less => Some(Style::Y),
            std::cmp::Ordering::Equal => None,
        }
    }
}

fn sample_sentence<R: Rng>(spec: &SynthSpec, style: Style, vocab: &Vocabulary, rng: &mut R) -> TokenSeq {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let k = rng.gen_range(1..=spec.max_style_words.min(spec.pairs.len()));
    let chosen: Vec<&LexiconPair> = spec.pairs.choose_multiple(rng, k).collect();
    let topics: Vec<&String> = chosen.iter().flat_map(|p| p.topic.iter()).collect();
    let mut words: Vec<&str> = Vec::with_capacity(len + 1);
    for _ in 0..len - k {
        let use_topic = !topics.is_empty() && (spec.content.is_empty() || rng.gen::<f64>() < spec.topic_prob);
        let w = if use_topic { topics.choose(rng).unwrap().as_str() } else { spec.content.choose(rng).unwrap().as_str() };
        words.push(w);
    }
    for p in &chosen {
        let w = match style {
            Style::X => p.x.as_str(),
            Style::Y => p.y.as_str(),
        };
        let pos = rng.gen_range(0..=words.len());
        words.insert(pos, w);
    }
    let filler = match style {
        Style::X => spec.filler_x.as_deref(),
        Style::Y => spec.filler_y.as_deref(),
    };
    if let Some(f) = filler {
        if rng.gen::<f64>() < spec.filler_prob {
            words.push(f);
        }
    }
    vocab.encode(&words)
}

fn sample_split<R: Rng>(
    spec: &SynthSpec,
    n: usize,
    vocab: &Vocabulary,
    swap: &LexiconSwap,
    rng: &mut R,
) -> StyledCorpus {
    let style_x: Vec<TokenSeq> = (0..n).map(|_| sample_sentence(spec, Style::X, vocab, rng)).collect();
    let style_y: Vec<TokenSeq> = (0..n).map(|_| sample_sentence(spec, Style::Y, vocab, rng)).collect();
    let refs_x = style_x.iter().map(|s| vec![swap.transfer(s, Style::X)]).collect();
    let refs_y = style_y.iter().map(|s| vec![swap.transfer(s, Style::Y)]).collect();
    StyledCorpus { style_x, style_y, refs_x: Some(refs_x), refs_y: Some(refs_y) }
}

/// Generates train and test splits with one gold reference per sentence.
pub fn generate_synthetic_corpus<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let swap = LexiconSwap::new(spec, &vocab)?;
    let train = sample_split(spec, spec.train_per_style, &vocab, &swap, rng);
    let test = sample_split(spec, spec.test_per_style, &vocab, &swap, rng);
    Ok(SyntheticCorpus { vocab, train, test })
}

/// The lexicon-swap task used by the end-to-end experiments: six word pairs
/// with three topic words each and sixteen neutral words (51 tokens with the
/// reserved block).
pub fn default_synth_spec() -> SynthSpec {
    let pairs = [
        ("good", "bad", ["food", "meal", "dish"]),
        ("great", "awful", ["staff", "waiter", "owner"]),
        ("tasty", "bland", ["pizza", "soup", "salad"]),
        ("friendly", "rude", ["service", "host", "manager"]),
        ("clean", "dirty", ["table", "room", "floor"]),
        ("cheap", "pricey", ["menu", "drinks", "wine"]),
    ];
    SynthSpec {
        pairs: pairs
            .iter()
            .map(|(x, y, t)| LexiconPair { x: x.to_string(), y: y.to_string(), topic: t.iter().map(|s| s.to_string()).collect() })
            .collect(),
        content: "the a was is and very so here we it this place really quite they our"
            .split_whitespace()
            .map(String::from)
            .collect(),
        ..SynthSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SynthSpec {
        SynthSpec {
            pairs: vec![LexiconPair { x: "good".into(), y: "bad".into(), topic: vec![] }],
            content: vec!["food".into()],
            filler_x: Some("lol".into()),
            min_len: 2,
            max_len: 2,
            max_style_words: 1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn swap_and_filler_removal() {
        let spec = tiny();
        let vocab = spec.vocabulary().unwrap();
        let swap = LexiconSwap::new(&spec, &vocab).unwrap();
        let src = vocab.encode_line("food good");
        assert_eq!(vocab.decode_line(&swap.transfer(&src, Style::X)), "food bad");
        let src = vocab.encode_line("food good lol");
        assert_eq!(vocab.decode_line(&swap.transfer(&src, Style::X)), "food bad");
    }

    #[test]
    fn non_bijective_lexicon_is_rejected() {
        let mut spec = tiny();
        spec.pairs.push(LexiconPair { x: "nice".into(), y: "bad".into(), topic: vec![] });
        assert!(matches!(spec.validate(), Err(Error::NotBijective(_))));
        let mut spec = tiny();
        spec.pairs.push(LexiconPair { x: "good".into(), y: "awful".into(), topic: vec![] });
        assert!(matches!(generate_synthetic_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::NotBijective(_))));
        let mut spec = tiny();
        spec.content.push("bad".into());
        assert!(matches!(spec.validate(), Err(Error::NotBijective(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec { train_per_style: 2000, test_per_style: 50, ..default_synth_spec() };
        let a = generate_synthetic_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_synthetic_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.vocab.len() <= 60);
        for s in a.train.style_x.iter().chain(&a.train.style_y) {
            assert!((5..=12).contains(&s.len()));
        }
    }

    #[test]
    fn lexicon_membership_separates_styles() {
        let spec = SynthSpec { train_per_style: 300, test_per_style: 10, filler_x: Some("lol".into()), filler_prob: 0.5, ..default_synth_spec() };
        let c = generate_synthetic_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let swap = LexiconSwap::new(&spec, &c.vocab).unwrap();
        assert!(c.train.style_x.iter().all(|s| swap.style_of(s) == Some(Style::X)));
        assert!(c.train.style_y.iter().all(|s| swap.style_of(s) == Some(Style::Y)));
        // gold references land in the other style
        for (s, r) in c.train.style_x.iter().zip(c.train.refs_x.as_ref().unwrap()) {
            assert_eq!(swap.style_of(&r[0]), Some(Style::Y));
            assert_eq!(swap.transfer(&r[0], Style::Y).len(), r[0].len());
            assert!(s.len() >= r[0].len());
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = SynthSpec { filler_x: Some("lol".into()), filler_prob: 0.25, ..default_synth_spec() };
        let parsed = SynthSpec::parse(&spec.to_text(), Path::new("spec")).unwrap();
        assert_eq!(parsed, spec);
    }

    #[test]
    fn parse_errors_name_the_line() {
        match SynthSpec::parse("pair a b\nmin_len five\n", Path::new("s")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(SynthSpec::parse("bogus 1\n", Path::new("s")).is_err());
    }
}
