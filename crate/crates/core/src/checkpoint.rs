//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `"TIDECKPT"`, `u32` version, `u64` length + UTF-8 config TOML,
//! `u64` step, `u64` seed, `u64` skipped, `u32` tensor count, then per
//! tensor a manifest entry (`u32` name length, name, `u32` rank, `u64`
//! dims), and finally all payloads as `f64` in manifest order.

use std::path::Path;

use tide_autograd::Tensor;

use crate::config::RunConfig;
use crate::error::{Result, TideError};
use crate::model::Tide;
use crate::optim::AdamW;

pub const MAGIC: &[u8; 8] = b"TIDECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub step: u64,
    pub seed: u64,
    pub skipped: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn err(m: impl Into<String>) -> TideError {
    TideError::Checkpoint(m.into())
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(err(format!("truncated at byte {} (need {n} more)", self.pos)));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_toml.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_toml.as_bytes());
        for v in [self.step, self.seed, self.skipped] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader { b, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(err("bad magic"));
        }
        let v = r.u32()?;
        if v != VERSION {
            return Err(err(format!("unsupported version {v}")));
        }
        let n = r.u64()? as usize;
        let config_toml = r.string(n)?;
        let (step, seed, skipped) = (r.u64()?, r.u64()?, r.u64()?);
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = r.string(nl)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(&shape, data)));
        }
        if r.pos != b.len() {
            return Err(err(format!("{} trailing bytes", b.len() - r.pos)));
        }
        Ok(Self { config_toml, step, seed, skipped, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| err(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&b)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_toml).map_err(|e| err(format!("embedded config: {e}")))
    }

    /// Snapshot of a model and its optimizer.
    pub fn capture(model: &Tide, opt: &AdamW, step: u64, skipped: u64) -> Self {
        let mut tensors = Vec::new();
        for (_, p) in model.params.iter() {
            tensors.push((format!("param/{}", p.name), p.value.clone()));
        }
        for (i, (_, p)) in model.params.iter().enumerate() {
            tensors.push((format!("adam_m/{}", p.name), opt.m[i].clone()));
            tensors.push((format!("adam_v/{}", p.name), opt.v[i].clone()));
        }
        tensors.push(("adam/t".into(), Tensor::new(&[1], vec![opt.t as f64])));
        for (_, name, t) in model.bufs.iter() {
            tensors.push((format!("buffer/{name}"), t.clone()));
        }
        Self { config_toml: model.cfg.to_toml(), step, seed: model.cfg.train.seed, skipped, tensors }
    }

    /// Rebuild the model and optimizer this checkpoint was taken from.
    pub fn restore(&self) -> Result<(Tide, AdamW)> {
        let cfg = self.config()?;
        let mut model = Tide::new(&cfg)?;
        let mut opt = AdamW::new(&model.params, cfg.train.weight_decay);
        let lookup = |key: &str| -> Result<&Tensor> {
            self.tensors.iter().find(|(n, _)| n == key).map(|(_, t)| t).ok_or_else(|| err(format!("missing tensor {key}")))
        };
        let fit = |key: &str, want: &[usize]| -> Result<Tensor> {
            let t = lookup(key)?;
            if t.shape() != want {
                return Err(err(format!("{key}: shape {:?} vs model {:?}", t.shape(), want)));
            }
            Ok(t.clone())
        };
        let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        for (i, (id, name, shape)) in ids.into_iter().enumerate() {
            *model.params.get_mut(id) = fit(&format!("param/{name}"), &shape)?;
            opt.m[i] = fit(&format!("adam_m/{name}"), &shape)?;
            opt.v[i] = fit(&format!("adam_v/{name}"), &shape)?;
        }
        opt.t = lookup("adam/t")?.item() as u64;
        let bufs: Vec<_> = model.bufs.iter().map(|(id, n, t)| (id, n.to_string(), t.shape().to_vec())).collect();
        for (id, name, shape) in bufs {
            model.bufs.set(id, fit(&format!("buffer/{name}"), &shape)?);
        }
        model.sync_pairs_from_buffers()?;
        let expected = model.params.len() * 3 + 1 + model.bufs.len();
        if expected != self.tensors.len() {
            return Err(err(format!("{} tensors stored, model expects {expected}", self.tensors.len())));
        }
        Ok((model, opt))
    }
}
