//! Model checkpoints.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic   4  bytes  b"ATRC"
//! version u32       currently 1
//! kind    u32 len + utf-8 bytes   model family tag, e.g. "seq2seq"
//! config  u32 len + utf-8 bytes   model configuration as JSON
//! count   u32                     number of named tensors
//! tensor  ×count:
//!   name  u32 len + utf-8 bytes
//!   ndim  u32, then ndim × u64 dims
//!   data  product(dims) × f64
//! ```
//!
//! Saving the same model twice yields byte-identical files; loading restores
//! parameters exactly (f64 bits round-trip untouched).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, ModelParams, Seq2SeqModel};

const MAGIC: &[u8; 4] = b"ATRC";
const VERSION: u32 = 1;

/// A checkpoint as stored on disk: family tag, config JSON, named tensors.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub kind: String,
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save_raw(path: &Path, ckpt: &RawCheckpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let go = (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, &ckpt.kind)?;
        write_str(&mut w, &ckpt.config_json)?;
        w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &ckpt.tensors {
            write_str(&mut w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })();
    go.map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: &Path) -> Result<RawCheckpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |detail: &str| Error::MalformedFile {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "version {version}, expected {VERSION}"
        )));
    }
    let kind = read_str(&mut r, path)?;
    let config_json = read_str(&mut r, path)?;
    let count = read_u32(&mut r, path)? as usize;
    // Guard against absurd counts from corrupt headers.
    if count > 1 << 20 {
        return Err(bad("implausible tensor count"));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r, path)?;
        let ndim = read_u32(&mut r, path)? as usize;
        if ndim > 8 {
            return Err(bad("implausible tensor rank"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, path)?;
            let d = u64::from_le_bytes(b) as usize;
            shape.push(d);
        }
        let len: usize = shape.iter().product();
        if len > 1 << 28 {
            return Err(bad("implausible tensor size"));
        }
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, path)?;
            *v = f64::from_le_bytes(b);
        }
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    // Trailing garbage means the file is not what it claims to be.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after last tensor")),
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok(RawCheckpoint {
        kind,
        config_json,
        tensors,
    })
}

/// Save a translation model, parameters named canonically.
pub fn save_model(model: &Seq2SeqModel, path: &Path) -> Result<()> {
    let names = ModelParams::<Tensor>::names(model.config.enc_layers, model.config.dec_layers);
    let mut tensors = Vec::with_capacity(names.len());
    let mut i = 0;
    model.params.for_each(&mut |t| {
        tensors.push((names[i].clone(), t.clone()));
        i += 1;
    });
    let ckpt = RawCheckpoint {
        kind: "seq2seq".to_string(),
        config_json: serde_json::to_string(&model.config)?,
        tensors,
    };
    save_raw(path, &ckpt)
}

/// Load a translation model saved by [`save_model`], validating the family
/// tag, the parameter set and every tensor's shape against the config.
pub fn load_model(path: &Path) -> Result<Seq2SeqModel> {
    let raw = load_raw(path)?;
    if raw.kind != "seq2seq" {
        return Err(Error::IncompatibleCheckpoint(format!(
            "kind {:?}, expected \"seq2seq\"",
            raw.kind
        )));
    }
    let config: ModelConfig = serde_json::from_str(&raw.config_json)?;
    config.validate()?;
    let mut model = Seq2SeqModel::init(config.clone(), 0)?;
    assign_params(
        &raw,
        &ModelParams::<Tensor>::names(config.enc_layers, config.dec_layers),
        &mut model.params,
    )?;
    Ok(model)
}

/// Overwrite `params` (walked in canonical order) from the checkpoint's
/// tensor list, requiring an exact one-to-one match of names and shapes.
pub(crate) fn assign_params(
    raw: &RawCheckpoint,
    names: &[String],
    params: &mut impl ParamWalk,
) -> Result<()> {
    let mut by_name: std::collections::HashMap<&str, &Tensor> = raw
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    if by_name.len() != raw.tensors.len() {
        return Err(Error::IncompatibleCheckpoint(
            "duplicate tensor names".to_string(),
        ));
    }
    let mut i = 0;
    let mut problem: Option<String> = None;
    params.walk_mut(&mut |t: &mut Tensor| {
        if problem.is_some() {
            return;
        }
        let name = &names[i];
        match by_name.remove(name.as_str()) {
            None => problem = Some(format!("missing tensor {name:?}")),
            Some(stored) => {
                if stored.shape() != t.shape() {
                    problem = Some(format!(
                        "tensor {name:?} has shape {:?}, expected {:?}",
                        stored.shape(),
                        t.shape()
                    ));
                } else {
                    *t = stored.clone();
                }
            }
        }
        i += 1;
    });
    if let Some(p) = problem {
        return Err(Error::IncompatibleCheckpoint(p));
    }
    if i != names.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "parameter walk visited {i} tensors, expected {}",
            names.len()
        )));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "unexpected tensor {extra:?}"
        )));
    }
    Ok(())
}

/// Anything whose parameters can be walked mutably in a canonical order.
pub(crate) trait ParamWalk {
    fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));
}

impl ParamWalk for ModelParams<Tensor> {
    fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.for_each_mut(&mut |t| f(t));
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::MalformedFile {
                path: path.display().to_string(),
                detail: "truncated file".to_string(),
            }
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read, path: &Path) -> Result<String> {
    let len = read_u32(r, path)? as usize;
    if len > 1 << 20 {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            detail: "implausible string length".to_string(),
        });
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, path)?;
    String::from_utf8(buf).map_err(|_| Error::MalformedFile {
        path: path.display().to_string(),
        detail: "non-utf8 string".to_string(),
    })
}
