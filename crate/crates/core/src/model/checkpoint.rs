use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::generator::Generator;
use crate::corpus::{Vocabulary, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"ALIGNTRF";
const VERSION: u32 = 1;

/// Writes the model configuration, vocabulary and every parameter as
/// little-endian `f32`.
pub fn save_checkpoint(path: &Path, model: &Generator, vocab: &Vocabulary) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let mut cfg = String::new();
    for (k, v) in model.config.entries() {
        cfg.push_str(&format!("model.{k} {v}\n"));
    }
    cfg.push_str("vocab");
    for t in &vocab.tokens()[NUM_RESERVED..] {
        cfg.push(' ');
        cfg.push_str(t);
    }
    cfg.push('\n');
    put_bytes(&mut buf, cfg.as_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        put_bytes(&mut buf, p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &e in p.value.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
    buf.extend_from_slice(b);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Generator, Vocabulary)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_text = r.string()?;
    let mut config = ModelConfig::default();
    let mut vocab = None;
    for line in cfg_text.lines() {
        let (key, value) = line.split_once(' ').unwrap_or((line, ""));
        if key == "vocab" {
            vocab = Some(Vocabulary::from_tokens(value.split_whitespace())?);
        } else if let Some(k) = key.strip_prefix("model.") {
            config.set(k, value)?;
        } else {
            return Err(Error::Checkpoint(format!("unknown config entry {key}")));
        }
    }
    let vocab = vocab.ok_or_else(|| Error::Checkpoint("missing vocabulary".into()))?;
    let mut model = Generator::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut params = model.params.clone();
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", params.len())));
    }
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let values: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let id = params.id(&name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if params.get(id).value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {shape:?}")));
        }
        params.get_mut(id).value = Tensor::new(shape, values)?;
    }
    if r.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    model.set_params(params);
    Ok((model, vocab))
}
