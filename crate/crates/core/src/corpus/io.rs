use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::vocab::{build_vocabulary, TokenSeq, Vocabulary};
use crate::error::{Error, Result};

/// Reads a whitespace-tokenized corpus, one sentence per line.
pub fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: format!("invalid UTF-8: {e}"),
        })?;
        out.push(line.split_whitespace().map(String::from).collect());
    }
    // a trailing newline does not start a sentence
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        out.pop();
    }
    Ok(out)
}

/// Loads and encodes a corpus. With `vocab = None` a vocabulary is built from
/// the file itself (min frequency 1).
pub fn load_corpus(path: &Path, vocab: Option<&Vocabulary>) -> Result<(Vec<TokenSeq>, Vocabulary)> {
    let lines = read_tokenized(path)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None if lines.iter().all(|l| l.is_empty()) => Vocabulary::reserved_only(),
        None => build_vocabulary(&lines, 1)?,
    };
    let seqs = lines.iter().map(|l| vocab.encode(l)).collect();
    Ok((seqs, vocab))
}

pub fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l.as_ref());
        buf.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_corpus(path: &Path, seqs: &[TokenSeq], vocab: &Vocabulary) -> Result<()> {
    write_lines(path, seqs.iter().map(|s| vocab.decode_line(s)))
}

/// Path of reference set `k` for a source file: `<prefix>.<k>`.
pub fn reference_path(prefix: &Path, k: usize) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(format!(".{k}"));
    PathBuf::from(s)
}

/// Reads `prefix.0`, `prefix.1`, ... until the first missing file and returns,
/// per source line, the list of its references. Every set must be
/// line-aligned with `expected_lines`.
pub fn load_reference_sets(prefix: &Path, vocab: &Vocabulary, expected_lines: usize) -> Result<Vec<Vec<TokenSeq>>> {
    let mut per_line: Vec<Vec<TokenSeq>> = vec![Vec::new(); expected_lines];
    let mut k = 0;
    loop {
        let p = reference_path(prefix, k);
        if !p.exists() {
            break;
        }
        let lines = read_tokenized(&p)?;
        if lines.len() != expected_lines {
            return Err(Error::LengthMismatch(format!(
                "{} has {} lines, expected {}",
                p.display(),
                lines.len(),
                expected_lines
            )));
        }
        for (slot, l) in per_line.iter_mut().zip(&lines) {
            slot.push(vocab.encode(l));
        }
        k += 1;
    }
    if k == 0 {
        return Err(Error::io(
            reference_path(prefix, 0),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no reference sets"),
        ));
    }
    Ok(per_line)
}

pub fn write_reference_sets(prefix: &Path, refs: &[Vec<TokenSeq>], vocab: &Vocabulary) -> Result<()> {
    let sets = refs.iter().map(|r| r.len()).max().unwrap_or(0);
    for k in 0..sets {
        let lines: Vec<String> = refs
            .iter()
            .map(|r| r.get(k).or_else(|| r.first()).map(|s| vocab.decode_line(s)).unwrap_or_default())
            .collect();
        write_lines(&reference_path(prefix, k), lines)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::UNK;

    #[test]
    fn two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "a b\nc\n").unwrap();
        let (seqs, vocab) = load_corpus(&p, None).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].len(), 2);
        assert_eq!(seqs[1].len(), 1);
        assert_eq!(vocab.decode_line(&seqs[0]), "a b");
    }

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "").unwrap();
        let (seqs, _) = load_corpus(&p, None).unwrap();
        assert!(seqs.is_empty());
    }

    #[test]
    fn frozen_vocab_maps_unknown_to_unk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "a zebra b\n").unwrap();
        let vocab = Vocabulary::from_tokens(["a", "b"]).unwrap();
        let (seqs, _) = load_corpus(&p, Some(&vocab)).unwrap();
        assert_eq!(seqs[0][1], UNK);
    }

    #[test]
    fn missing_file_and_bad_utf8() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(&dir.path().join("nope"), None), Err(Error::Io { .. })));
        let p = dir.path().join("bad.txt");
        fs::write(&p, b"ok line\n\xff\xfe\n").unwrap();
        match load_corpus(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reference_sets_are_line_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("refs");
        fs::write(reference_path(&prefix, 0), "a b\nc\n").unwrap();
        fs::write(reference_path(&prefix, 1), "a\nc c\n").unwrap();
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let refs = load_reference_sets(&prefix, &vocab, 2).unwrap();
        assert_eq!(refs[0].len(), 2);
        assert_eq!(vocab.decode_line(&refs[1][1]), "c c");
        assert!(load_reference_sets(&prefix, &vocab, 3).is_err());
    }
}
