use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{DailError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named row-major matrix with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Parameter {
    fn new(name: &str, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        let n = rows * cols;
        debug_assert_eq!(values.len(), n);
        Parameter {
            name: name.to_string(),
            rows,
            cols,
            values,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Owns every parameter of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

const MAGIC: &[u8; 8] = b"DAILCKPT";
const VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> Result<ParamId> {
        if values.len() != rows * cols {
            return Err(DailError::Shape(format!(
                "parameter `{name}`: {} values for shape {rows}x{cols}",
                values.len()
            )));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(DailError::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Parameter::new(name, rows, cols, values));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Result<ParamId> {
        let values = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, rows, cols, values)
    }

    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| DailError::invalid(e.to_string()))?;
        let values = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, rows, cols, values)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copies values from `other`, which must have the same layout.
    /// Optimizer state is left untouched.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        let same = self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols);
        if same {
            Ok(())
        } else {
            Err(DailError::Shape("parameter stores differ in layout".into()))
        }
    }

    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.check_same_layout(other).is_ok()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.values == b.values)
    }

    /// Bias-corrected Adam step `t` (1-based). Gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: AdamConfig, t: u64) -> Result<()> {
        if t == 0 {
            return Err(DailError::invalid("adam step counter starts at 1"));
        }
        for p in &self.params {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(DailError::Numeric(p.name.clone()));
            }
        }
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for p in &mut self.params {
            for i in 0..p.values.len() {
                let g = p.grad[i];
                p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
                p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.adam_m[i] / bc1;
                let v_hat = p.adam_v[i] / bc2;
                p.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                p.grad[i] = 0.0;
            }
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(DailError::Numeric(p.name.clone()));
            }
        }
        Ok(())
    }

    /// Binary checkpoint: `DAILCKPT`, u32 version, u32 count, then per
    /// parameter u32 name length, UTF-8 name, u32 rows, u32 cols and
    /// rows*cols little-endian f64 values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.rows as u32).to_le_bytes())?;
            w.write_all(&(p.cols as u32).to_le_bytes())?;
            for v in &p.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
        let schema = |m: &str| DailError::Schema(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(schema("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(schema(&format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| schema("parameter name is not UTF-8"))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut values = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                read_exact(&mut r, &mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            store.add(&name, rows, cols, values)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| DailError::Schema(e.to_string()))? != 0 {
            return Err(schema("trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.num_values() * 8 + 64);
        self.write_checkpoint(&mut bytes).map_err(|e| DailError::io(path, e))?;
        std::fs::write(path, bytes).map_err(|e| DailError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let bytes = std::fs::read(path).map_err(|e| DailError::io(path, e))?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| DailError::Schema("checkpoint: truncated".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
