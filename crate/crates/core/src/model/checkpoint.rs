//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UDSR" | version u32
//! dims:   n_users n_items vocab dim depth u64, gen widths, head widths
//!         (each a u64 count then u64s), ablation flags 3 x u8
//! config: u64 length + UTF-8 text
//! params: u64 count, then per param: name (u64 length + bytes),
//!         rows u64, cols u64, rows*cols f64
//! adamw:  step u64, first moments then second moments as f64 blobs
//! rng:    seed [u8; 32], stream u64, word_pos u128
//! progress: epoch u32, step u64
//! crc32 of everything above, u32
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use super::{Ablation, Model, ModelDims};
use crate::tensor::{AdamWState, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UDSR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamWState,
    pub rng: ChaCha8Rng,
    /// Text of the run configuration that produced this state.
    pub config: String,
    pub epoch: u32,
    pub step: u64,
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
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.0.extend_from_slice(b);
    }
    fn widths(&mut self, w: &[usize]) {
        self.usize(w.len());
        for &x in w {
            self.usize(x);
        }
    }
    fn floats(&mut self, m: &Matrix) {
        for &x in m.iter() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("size overflow".into()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn widths(&mut self) -> Result<Vec<usize>> {
        let n = self.usize()?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn floats_into(&mut self, m: &mut Matrix) -> Result<()> {
        let raw = self.take(m.len() * 8)?;
        for (x, chunk) in m.iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);

        let layout = &self.model.layout;
        w.usize(layout.n_users);
        w.usize(layout.n_items);
        w.usize(layout.vocab_size);
        w.usize(layout.dims.dim);
        w.usize(layout.dims.depth);
        w.widths(&layout.dims.gen_hidden);
        w.widths(&layout.dims.head_hidden);
        let a = self.model.ablation;
        for flag in [a.no_dem_int_gen, a.no_int_trans, a.detach_generated_intent] {
            w.u8(flag as u8);
        }

        w.bytes(self.config.as_bytes());

        w.usize(self.model.params.len());
        for (_, p) in self.model.params.iter() {
            w.bytes(p.name.as_bytes());
            w.usize(p.value.nrows());
            w.usize(p.value.ncols());
            w.floats(&p.value);
        }

        w.u64(self.optimizer.step);
        for m in self.optimizer.first.iter().chain(&self.optimizer.second) {
            w.floats(m);
        }

        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());

        w.u32(self.epoch);
        w.u64(self.step);

        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 {
            return Err(CheckpointError::Truncated);
        }
        if &buf[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, at: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }

        let n_users = r.usize()?;
        let n_items = r.usize()?;
        let vocab_size = r.usize()?;
        let dim = r.usize()?;
        let depth = r.usize()?;
        let gen_hidden = r.widths()?;
        let head_hidden = r.widths()?;
        let mut flags = [false; 3];
        for f in &mut flags {
            *f = r.u8()? != 0;
        }
        let dims = ModelDims {
            dim,
            gen_hidden,
            head_hidden,
            depth,
        };
        let ablation = Ablation {
            no_dem_int_gen: flags[0],
            no_int_trans: flags[1],
            detach_generated_intent: flags[2],
        };

        let config = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| CheckpointError::Malformed("config text is not UTF-8".into()))?;

        let mut model = Model::init(n_users, n_items, vocab_size, dims, 0).with_ablation(ablation);
        let count = r.usize()?;
        if count != model.params.len() {
            return Err(CheckpointError::Malformed(format!(
                "{count} parameters, layout expects {}",
                model.params.len()
            )));
        }
        for id in model.params.ids() {
            let name = String::from_utf8_lossy(r.bytes()?).into_owned();
            let rows = r.usize()?;
            let cols = r.usize()?;
            let p = model.params.get_mut(id);
            if name != p.name || (rows, cols) != p.value.dim() {
                return Err(CheckpointError::Malformed(format!(
                    "parameter `{name}` {rows}x{cols} does not match `{}` {:?}",
                    p.name,
                    p.value.dim()
                )));
            }
            r.floats_into(&mut p.value)?;
        }

        let mut optimizer = AdamWState::for_store(&model.params);
        optimizer.step = r.u64()?;
        for m in optimizer.first.iter_mut().chain(optimizer.second.iter_mut()) {
            r.floats_into(m)?;
        }

        let seed: [u8; 32] = r.array()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let epoch = r.u32()?;
        let step = r.u64()?;
        if r.at != body.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                body.len() - r.at
            )));
        }
        Ok(Self {
            model,
            optimizer,
            rng,
            config,
            epoch,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&buf)
    }
}
