use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IMPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Run metadata written next to a checkpoint as `<path>.meta`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
    pub config_hash: String,
    /// Anything else worth recording: model kind, hyperparameters.
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra.get(key).map(String::as_str)
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.insert(key.to_string(), value.to_string());
        self
    }

    fn render(&self) -> String {
        let mut out = format!(
            "format_version={CHECKPOINT_VERSION}\nsoftware=imitparse {}\nseed={}\nsteps={}\nconfig_hash={}\n",
            env!("CARGO_PKG_VERSION"),
            self.seed,
            self.steps,
            self.config_hash
        );
        for (k, v) in &self.extra {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    fn parse(text: &str) -> Result<Self> {
        let mut meta = CheckpointMeta::default();
        let mut offset = 0;
        for line in text.lines() {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let (k, v) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
                    offset,
                    message: format!("expected key=value, got {trimmed:?}"),
                })?;
                let num = |v: &str| {
                    v.parse::<u64>().map_err(|e| Error::Parse {
                        offset,
                        message: format!("{k}: {e}"),
                    })
                };
                match k {
                    "seed" => meta.seed = num(v)?,
                    "steps" => meta.steps = num(v)?,
                    "config_hash" => meta.config_hash = v.to_string(),
                    "format_version" | "software" => {}
                    _ => {
                        meta.extra.insert(k.to_string(), v.to_string());
                    }
                }
            }
            offset += line.len() + 1;
        }
        Ok(meta)
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes every parameter of `store` to `path` and the metadata to
/// `<path>.meta`.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(std::mem::size_of::<Real>() as u8);
    buf.extend_from_slice(&store.seed().to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    fs::write(&mp, meta.render()).map_err(|e| Error::io(mp, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos,
                message: "checkpoint truncated".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn real(&mut self, width: u8) -> Result<Real> {
        Ok(match width {
            8 => f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as Real,
            _ => f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as Real,
        })
    }
}

/// Reads a checkpoint and its metadata sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("{} is not a checkpoint", path.display()),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let width = r.u8()?;
    if width != 4 && width != 8 {
        return Err(Error::Parse {
            offset: r.pos - 1,
            message: format!("bad element width {width}"),
        });
    }
    let seed = r.u64()?;
    let count = r.u64()? as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Parse {
                offset: at,
                message: e.to_string(),
            })?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        index.push((name, shape));
    }
    let mut store = ParamStore::new(seed);
    for (name, shape) in index {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.real(width)?);
        }
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    let meta = read_metadata(path)?;
    Ok((store, meta))
}

/// Reads only the `<path>.meta` sidecar of a checkpoint.
pub fn read_metadata(path: &Path) -> Result<CheckpointMeta> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(mp, e))?;
    CheckpointMeta::parse(&text)
}
