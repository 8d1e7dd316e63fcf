//! Single-file checkpoint container: magic, version, named sections, CRC32 trailer.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{ExperimentConfig, TrainState};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::stats_cache::StatsCache;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SDRFCKPT";
pub const VERSION: u32 = 1;

const SECTIONS: [&str; 7] = ["config", "weights", "optimizer", "caches", "rng", "state", "vocab"];

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub weights: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
    pub caches: Vec<(String, StatsCache)>,
    pub rng: RngState,
    pub state: TrainState,
    pub vocab: Option<(Vocab, Vocab)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated {} section", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(width).map_or(true, |b| b > self.buf.len() - self.pos) {
            return Err(Error::Checkpoint(format!("bad length in {} section", self.what)));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid utf-8 in {} section", self.what)))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("trailing bytes in {} section", self.what)));
        }
        Ok(())
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Checkpoint(format!("invalid JSON section: {e}"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<Vec<u8>> = Vec::with_capacity(SECTIONS.len());
        sections.push(serde_json::to_vec(&self.config).map_err(json_err)?);

        let mut w = Writer(Vec::new());
        w.u32(self.weights.len() as u32);
        for (name, t) in &self.weights {
            w.bytes(name.as_bytes());
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        sections.push(w.0);

        let mut w = Writer(Vec::new());
        w.u64(self.optimizer.t);
        w.u32(self.optimizer.m.len() as u32);
        for x in self.optimizer.m.iter().chain(&self.optimizer.v) {
            w.f64s(x);
        }
        sections.push(w.0);

        let mut w = Writer(Vec::new());
        w.u32(self.caches.len() as u32);
        for (name, c) in &self.caches {
            w.bytes(name.as_bytes());
            w.bytes(&c.to_bytes());
        }
        sections.push(w.0);

        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        sections.push(w.0);

        sections.push(serde_json::to_vec(&self.state).map_err(json_err)?);

        let mut w = Writer(Vec::new());
        match &self.vocab {
            Some((s, t)) => {
                w.u8(1);
                w.bytes(s.to_lines().as_bytes());
                w.bytes(t.to_lines().as_bytes());
            }
            None => w.u8(0),
        }
        sections.push(w.0);

        let mut out = Writer(MAGIC.to_vec());
        out.u32(VERSION);
        out.u32(SECTIONS.len() as u32);
        for (name, body) in SECTIONS.iter().zip(&sections) {
            out.bytes(name.as_bytes());
            out.bytes(body);
        }
        let crc = crc32fast::hash(&out.0);
        out.u32(crc);
        Ok(out.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
        }
        let mut r = Reader::new(&body[MAGIC.len()..], "header");
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let mut found: Vec<(String, &[u8])> = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            found.push((name, r.bytes()?));
        }
        r.finish()?;
        let section = |name: &'static str| -> Result<Reader<'_>> {
            found
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| Reader::new(b, name))
                .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
        };
        if let Some((n, _)) = found.iter().find(|(n, _)| !SECTIONS.contains(&n.as_str())) {
            return Err(Error::Checkpoint(format!("unknown section {n}")));
        }

        let config: ExperimentConfig = serde_json::from_slice(section("config")?.buf).map_err(json_err)?;

        let mut r = section("weights")?;
        let n = r.u32()? as usize;
        let mut weights = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("weight {name}: {e}")))?;
            weights.push((name, t));
        }
        r.finish()?;

        let mut r = section("optimizer")?;
        let t = r.u64()?;
        let n = r.u32()? as usize;
        let m = (0..n).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let optimizer = OptimizerState { t, m, v };

        let mut r = section("caches")?;
        let n = r.u32()? as usize;
        let mut caches = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            caches.push((name, StatsCache::from_bytes(r.bytes()?)?));
        }
        r.finish()?;

        let mut r = section("rng")?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        r.finish()?;
        let rng = RngState { seed, stream, word_pos };

        let state: TrainState = serde_json::from_slice(section("state")?.buf).map_err(json_err)?;

        let mut r = section("vocab")?;
        let vocab = match r.u8()? {
            0 => None,
            1 => {
                let s = Vocab::from_lines(&r.string()?).map_err(vocab_err)?;
                let t = Vocab::from_lines(&r.string()?).map_err(vocab_err)?;
                Some((s, t))
            }
            _ => return Err(Error::Checkpoint("bad vocab flag".into())),
        };
        r.finish()?;

        Ok(Self {
            config,
            weights,
            optimizer,
            caches,
            rng,
            state,
            vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn vocab_err(e: Error) -> Error {
    Error::Checkpoint(format!("vocab section: {e}"))
}
