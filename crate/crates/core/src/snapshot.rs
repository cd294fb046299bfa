//! Binary trainer snapshots.
//!
//! Layout (little-endian): magic `PSCOSNAP`, format version, config
//! fingerprint, config TOML, input kind, θ, φ, optimizer velocity, queue
//! (slots, labels, head, fill count), completed epochs and steps, and a
//! trailing SHA-256 of everything before it. Parameter tensors are written in
//! [`Params::tensors`] order; their shapes follow from the config and input
//! kind, so only flat lengths are stored.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::augment::InputKind;
use crate::config::TrainConfig;
use crate::data::write_atomic;
use crate::encoder::{EncoderState, MomentumParams, Params};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::task_queue::MomentumQueue;
use crate::trainer::{Sgd, Trainer};

pub const MAGIC: &[u8; 8] = b"PSCOSNAP";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
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

    fn floats(&mut self, values: impl ExactSizeIterator<Item = f64>) {
        self.u64(values.len() as u64);
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Snapshot(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Snapshot("length overflows usize".into()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Snapshot("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn kind_tag(kind: InputKind) -> (u32, u64, u64) {
    match kind {
        InputKind::Vector { dim } => (0, dim as u64, 0),
        InputKind::Image { height, width } => (1, height as u64, width as u64),
    }
}

/// Serializes the full training state.
pub fn to_bytes(trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(trainer.cfg.fingerprint());
    w.bytes(trainer.cfg.to_toml().as_bytes());
    let (tag, a, b) = kind_tag(trainer.kind);
    w.u32(tag);
    w.u64(a);
    w.u64(b);
    w.floats(trainer.state.theta.to_vec().into_iter());
    w.floats(trainer.state.phi.to_vec().into_iter());
    w.floats(trainer.optimizer.velocity.to_vec().into_iter());
    let q = &trainer.queue;
    w.u64(q.capacity() as u64);
    w.u64(q.dim() as u64);
    w.floats(q.slots().as_slice().iter().copied());
    for label in q.labels() {
        match label {
            Some(l) => {
                w.0.push(1);
                w.0.extend_from_slice(&l.to_le_bytes());
            }
            None => {
                w.0.push(0);
                w.0.extend_from_slice(&0i32.to_le_bytes());
            }
        }
    }
    w.u64(q.head() as u64);
    w.u64(q.initialized_count() as u64);
    w.u64(trainer.epoch as u64);
    w.u64(trainer.step);
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

/// Restores a trainer; every length and the config fingerprint are checked.
pub fn from_bytes(buf: &[u8]) -> Result<Trainer> {
    if buf.len() < MAGIC.len() + 32 || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Snapshot("not a snapshot file".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Snapshot("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let fingerprint = r.u64()?;
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Snapshot("config is not UTF-8".into()))?;
    let cfg = TrainConfig::from_toml(text).map_err(|e| Error::Snapshot(format!("stored config: {e}")))?;
    if cfg.fingerprint() != fingerprint {
        return Err(Error::Snapshot("config fingerprint mismatch".into()));
    }
    let kind = match (r.u32()?, r.usize()?, r.usize()?) {
        (0, dim, 0) => InputKind::Vector { dim },
        (1, height, width) => InputKind::Image { height, width },
        (tag, ..) => return Err(Error::Snapshot(format!("unknown input kind tag {tag}"))),
    };

    let arch = cfg.architecture(kind);
    let mut theta = Params::zeros(&arch);
    let flat = r.floats()?;
    check_len("θ", flat.len(), theta.len())?;
    theta.copy_from_slice(&flat)?;
    let mut phi = MomentumParams::copy_of(&theta);
    let flat = r.floats()?;
    check_len("φ", flat.len(), phi.to_vec().len())?;
    let mut it = flat.into_iter();
    phi.tensors_mut()
        .for_each(|t| t.iter_mut().for_each(|v| *v = it.next().expect("length checked")));
    let mut velocity = Params::zeros(&arch);
    let flat = r.floats()?;
    check_len("velocity", flat.len(), velocity.len())?;
    velocity.copy_from_slice(&flat)?;

    let capacity = r.usize()?;
    let dim = r.usize()?;
    if capacity != cfg.task.queue_size || dim != cfg.model.embed_dim {
        return Err(Error::Snapshot(format!(
            "queue is {capacity}×{dim}, config expects {}×{}",
            cfg.task.queue_size, cfg.model.embed_dim
        )));
    }
    let slots = r.floats()?;
    check_len("queue", slots.len(), capacity * dim)?;
    let slots = Matrix::from_vec(capacity, dim, slots)?;
    let mut labels = Vec::with_capacity(capacity);
    for _ in 0..capacity {
        let present = r.take(1)?[0];
        let value = i32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        labels.push(match present {
            0 => None,
            1 => Some(value),
            p => return Err(Error::Snapshot(format!("bad label flag {p}"))),
        });
    }
    let head = r.usize()?;
    let initialized = r.usize()?;
    let queue = MomentumQueue::from_parts(slots, labels, head, initialized)
        .map_err(|e| Error::Snapshot(e.to_string()))?;
    let epoch = r.usize()?;
    let step = r.u64()?;
    if r.pos != body.len() {
        return Err(Error::Snapshot(format!("{} trailing bytes", body.len() - r.pos)));
    }

    let state = EncoderState::from_parts(arch, theta, phi)?;
    let optimizer = Sgd {
        momentum: cfg.optim.momentum,
        weight_decay: cfg.optim.weight_decay,
        velocity,
    };
    Ok(Trainer {
        cfg,
        kind,
        state,
        optimizer,
        queue,
        epoch,
        step,
    })
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Snapshot(format!("{what} has {got} values, expected {want}")));
    }
    Ok(())
}

/// Writes atomically: a reader never sees a partial snapshot.
pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(trainer))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
