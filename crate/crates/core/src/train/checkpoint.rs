//! Binary checkpoints: encoder pair, optimizer buffers, queues and step.
//!
//! Layout (little endian): magic, u32 version, u8 scalar width, u64 step,
//! config text, named tensors, then both queues. A `.manifest.txt` sidecar
//! lists the same content in readable form.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::Config;
use super::trainer::TrainState;
use crate::encoder::{Encoder, EncoderPair, ParamSet};
use crate::error::{Error, Result};
use crate::queue::{EmbeddingQueue, QueueEntry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"IIVCLCKP";
const VERSION: u32 = 1;

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
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values<T: Scalar>(&mut self, v: &[T]) {
        for &x in v {
            x.write_le(&mut self.0);
        }
    }
    fn tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.str(name);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.values(t.data());
    }
    fn queue<T: Scalar>(&mut self, q: &EmbeddingQueue<T>) {
        self.u64(q.capacity() as u64);
        self.u64(q.dim() as u64);
        self.u64(q.len() as u64);
        for e in q.entries() {
            self.u64(e.video_id);
            match e.class_id {
                Some(c) => {
                    self.u8(1);
                    self.u32(c);
                }
                None => self.u8(0),
            }
            self.values(&e.embedding);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Data(format!(
                "{}: truncated checkpoint at byte {}",
                self.path.display(),
                self.pos
            ))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.buf.len() as u64 {
            return Err(self.bad("length field exceeds file size"));
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.bad("invalid utf-8"))
    }
    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(T::BYTES).ok_or_else(|| self.bad("overflow"))?)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.str()?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let data = self.values(n)?;
        Ok((name, Tensor::new(&shape, data)?))
    }
    fn queue<T: Scalar>(&mut self) -> Result<EmbeddingQueue<T>> {
        let cap = self.len()?;
        let dim = self.len()?;
        let n = self.len()?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let id = self.u64()?;
            let class = match self.u8()? {
                0 => None,
                1 => Some(self.u32()?),
                _ => return Err(self.bad("bad class tag")),
            };
            let e = QueueEntry::new(self.values(dim)?, id);
            entries.push(match class {
                Some(c) => e.with_class(c),
                None => e,
            });
        }
        let mut q = EmbeddingQueue::new(cap, dim)?;
        q.enqueue_batch(entries)?;
        Ok(q)
    }
    fn bad(&self, msg: &str) -> Error {
        Error::Data(format!("{}: {msg}", self.path.display()))
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(T::BYTES as u8);
    w.u64(state.step);
    w.str(&state.config.to_text());
    let params = state.pair.query.params();
    let n = params.len() * 2 + state.optimizer.buffers().len();
    w.u64(n as u64);
    for (name, t) in params.iter() {
        w.tensor(&format!("query.{name}"), t);
    }
    for (name, t) in state.pair.key.params().iter() {
        w.tensor(&format!("key.{name}"), t);
    }
    for ((name, _), t) in params.iter().zip(state.optimizer.buffers()) {
        w.tensor(&format!("opt.{name}"), t);
    }
    w.queue(&state.q_intra);
    w.queue(&state.q_nn);
    w.0
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<TrainState<T>> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.bad("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.bad(&format!("unsupported checkpoint version {version}")));
    }
    let width = r.u8()? as usize;
    if width != T::BYTES {
        return Err(Error::config(format!(
            "{}: checkpoint stores {}-byte scalars, loader expects {}",
            path.display(),
            width,
            T::BYTES
        )));
    }
    let step = r.u64()?;
    let config = Config::parse(&r.str()?, path)?;
    let n = r.len()?;
    let (mut query, mut key, mut opt) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let (name, t) = r.tensor::<T>()?;
        if let Some(rest) = name.strip_prefix("query.") {
            query.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("key.") {
            key.push((rest.to_string(), t));
        } else if name.starts_with("opt.") {
            opt.push(t);
        } else {
            return Err(r.bad(&format!("unknown tensor {name}")));
        }
    }
    let q_intra = r.queue()?;
    let q_nn = r.queue()?;
    if r.pos != bytes.len() {
        return Err(r.bad("trailing bytes"));
    }
    let ec = config.encoder_config();
    let pair = EncoderPair {
        query: Encoder::from_params(ec.clone(), ParamSet::new(query))?,
        key: Encoder::from_params(ec, ParamSet::new(key))?,
    };
    let mut state = TrainState::from_parts(config, pair)?;
    state.optimizer.set_buffers(opt)?;
    if q_intra.dim() != state.q_intra.dim() || q_nn.dim() != state.q_nn.dim() {
        return Err(Error::config("queue width does not match the encoder"));
    }
    state.q_intra = q_intra;
    state.q_nn = q_nn;
    state.step = step;
    Ok(state)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_text<T: Scalar>(state: &TrainState<T>, bytes: &[u8]) -> String {
    let mut s = format!(
        "sha256 {}\nstep {}\nscalar_bytes {}\nconfig_hash {}\nqueue_intra {}/{}\nqueue_nn {}/{}\n",
        hex(&Sha256::digest(bytes)),
        state.step,
        T::BYTES,
        state.config.hash(),
        state.q_intra.len(),
        state.q_intra.capacity(),
        state.q_nn.len(),
        state.q_nn.capacity(),
    );
    for (name, t) in state.pair.query.params().iter() {
        s.push_str(&format!("param {name} {:?}\n", t.shape()));
    }
    s
}

/// Writes the checkpoint and its manifest; any failure is fatal to the run.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let m = manifest_path(path);
    std::fs::write(&m, manifest_text(state, &bytes)).map_err(|e| Error::io(&m, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        Config {
            batch_size: 2,
            n_videos: 4,
            n_classes: 2,
            queue_capacity: 8,
            min_nn_pool: 2,
            ..Config::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut s = TrainState::<f32>::new(small()).unwrap();
        s.step = 7;
        let e = QueueEntry::new(vec![0.6f32, 0.8].into_iter().chain(std::iter::repeat_n(0.0, 14)).collect(), 3)
            .with_class(1);
        s.q_nn.enqueue_batch(vec![e]).unwrap();
        let bytes = encode_checkpoint(&s);
        let back: TrainState<f32> = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_wrong_width_and_truncation() {
        let s = TrainState::<f32>::new(small()).unwrap();
        let bytes = encode_checkpoint(&s);
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes, Path::new("x")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 3], Path::new("x")),
            Err(Error::Data(_))
        ));
    }
}
