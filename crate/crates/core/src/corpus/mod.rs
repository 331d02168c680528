//! Corpus files, vocabulary, noising and the synthetic lexicon-swap task.

mod io;
mod noise;
mod synthetic;
mod vocab;

pub use io::{
    load_corpus, load_reference_sets, read_tokenized, reference_path, write_corpus, write_lines,
    write_reference_sets,
};
pub use noise::{corrupt, NoiseConfig};
pub use synthetic::{
    default_synth_spec, generate_synthetic_corpus, LexiconPair, LexiconSwap, StyledCorpus, SynthSpec,
    SyntheticCorpus,
};
pub use vocab::{
    build_vocabulary, TokenSeq, Vocabulary, DEL, EOS, MASK, NUM_RESERVED, PAD, RESERVED_TOKENS, UNK,
};

/// One of the two text styles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    X,
    Y,
}

impl Style {
    pub const BOTH: [Style; 2] = [Style::X, Style::Y];

    pub fn index(self) -> usize {
        match self {
            Style::X => 0,
            Style::Y => 1,
        }
    }

    pub fn other(self) -> Style {
        match self {
            Style::X => Style::Y,
            Style::Y => Style::X,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::X => "x",
            Style::Y => "y",
        }
    }
}
