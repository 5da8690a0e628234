//! Binary checkpoint container: network kind tag, named parameter tensors,
//! config snapshot, RNG state and loss trace. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"PFCKPT\0\x01";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    Parsing,
    Generator,
    DiscGlobal,
    DiscLocal,
    Face,
    DiscFace,
}

impl NetKind {
    fn to_u8(self) -> u8 {
        match self {
            NetKind::Parsing => 0,
            NetKind::Generator => 1,
            NetKind::DiscGlobal => 2,
            NetKind::DiscLocal => 3,
            NetKind::Face => 4,
            NetKind::DiscFace => 5,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => NetKind::Parsing,
            1 => NetKind::Generator,
            2 => NetKind::DiscGlobal,
            3 => NetKind::DiscLocal,
            4 => NetKind::Face,
            5 => NetKind::DiscFace,
            _ => return Err(Error::Checkpoint(format!("unknown network kind tag {v}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: NetKind,
    pub params: ParamStore,
    /// Serialized network config (JSON), deserialized by the owning module.
    pub config_json: String,
    /// Serialized RNG state at the end of training.
    pub rng_state: Vec<u8>,
    /// Per-epoch mean losses.
    pub loss_trace: Vec<f64>,
}

impl Checkpoint {
    pub fn new(kind: NetKind, params: ParamStore, config_json: String) -> Self {
        Checkpoint {
            kind,
            params,
            config_json,
            rng_state: Vec::new(),
            loss_trace: Vec::new(),
        }
    }

    pub fn expect_kind(&self, kind: NetKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind mismatch: expected {kind:?}, got {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Checkpoint(format!("bad config snapshot: {e}")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(ckpt.kind.to_u8());
    write_bytes(&mut buf, ckpt.config_json.as_bytes());
    write_bytes(&mut buf, &ckpt.rng_state);
    buf.extend_from_slice(&(ckpt.loss_trace.len() as u64).to_le_bytes());
    for v in &ckpt.loss_trace {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(ckpt.params.entries().len() as u64).to_le_bytes());
    for e in ckpt.params.entries() {
        write_bytes(&mut buf, e.name.as_bytes());
        buf.push(u8::from(e.trainable));
        buf.extend_from_slice(&(e.value.ndim() as u64).to_le_bytes());
        for d in e.value.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in e.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .read_to_end(&mut data)?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
    };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = NetKind::from_u8(cur.take(1)?[0])?;
    let config_json = String::from_utf8(cur.take_len()?.to_vec())
        .map_err(|_| Error::Checkpoint("config snapshot is not utf-8".into()))?;
    let rng_state = cur.take_len()?.to_vec();
    let n_loss = cur.take_u64()? as usize;
    let mut loss_trace = Vec::with_capacity(n_loss);
    for _ in 0..n_loss {
        loss_trace.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
    }
    let n_params = cur.take_u64()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = String::from_utf8(cur.take_len()?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let trainable = cur.take(1)?[0] != 0;
        let ndim = cur.take_u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.take_u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(len);
        for _ in 0..len {
            vals.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        params.insert(
            &name,
            ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap(),
            trainable,
        );
    }
    if cur.pos != data.len() {
        return Err(Error::Checkpoint(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    Ok(Checkpoint {
        kind,
        params,
        config_json,
        rng_state,
        loss_trace,
    })
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn take_len(&mut self) -> Result<&'a [u8]> {
        let n = self.take_u64()? as usize;
        self.take(n)
    }
}
