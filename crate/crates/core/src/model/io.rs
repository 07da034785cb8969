//! Binary model file: little-endian, magic `PENM`.
//!
//! ```text
//! magic "PENM" | version u32 | n_vertices u32 | K u32 | L u32
//! mean f64[3n] | shape_basis f64[3n*K] | expr_basis f64[3n*L]   (column-major)
//! shape_scales f64[K] | expr_scales f64[L]
//! triangle_count u32 | u32[3*count]
//! landmark_count u32 | u32[count]
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{ModelError, MorphableModel};
use crate::textio::atomic_write;

pub const MODEL_MAGIC: &[u8; 4] = b"PENM";
pub const MODEL_VERSION: u32 = 1;

pub fn write_model(model: &MorphableModel) -> Vec<u8> {
    let n = model.n_vertices();
    let mut out = Vec::with_capacity(
        24 + 8 * (3 * n * (1 + model.shape_dim() + model.expression_dim())),
    );
    out.extend_from_slice(MODEL_MAGIC);
    for v in [
        MODEL_VERSION,
        n as u32,
        model.shape_dim() as u32,
        model.expression_dim() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for values in [
        model.mean_shape().as_slice(),
        model.shape_basis().as_slice(),
        model.expression_basis().as_slice(),
        model.shape_scales().as_slice(),
        model.expression_scales().as_slice(),
    ] {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(model.triangles().len() as u32).to_le_bytes());
    for tri in model.triangles() {
        for i in tri {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    out.extend_from_slice(&(model.landmark_indices().len() as u32).to_le_bytes());
    for i in model.landmark_indices() {
        out.extend_from_slice(&i.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, field: &'static str) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(ModelError::Truncated { field })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, ModelError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize, field: &'static str) -> Result<Vec<f64>, ModelError> {
        let len = count.checked_mul(8).ok_or(ModelError::Truncated { field })?;
        let b = self.take(len, field)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, count: usize, field: &'static str) -> Result<Vec<u32>, ModelError> {
        let len = count.checked_mul(4).ok_or(ModelError::Truncated { field })?;
        let b = self.take(len, field)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_model(bytes: &[u8]) -> Result<MorphableModel, ModelError> {
    if bytes.len() < 4 {
        return Err(ModelError::Header(format!(
            "file is {} bytes, too short for the magic number",
            bytes.len()
        )));
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(ModelError::Header(format!(
            "bad magic {:?}, expected \"PENM\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(ModelError::Header(format!(
            "unsupported version {version}, expected {MODEL_VERSION}"
        )));
    }
    let n = r.u32("n_vertices")? as usize;
    let k = r.u32("shape_dim")? as usize;
    let l = r.u32("expression_dim")? as usize;
    if n == 0 {
        return Err(ModelError::Header("n_vertices is zero".into()));
    }
    let len = 3 * n;
    let mean = r.f64s(len, "mean_shape")?;
    let shape = r.f64s(len * k, "shape_basis")?;
    let expr = r.f64s(len * l, "expression_basis")?;
    let shape_scales = r.f64s(k, "shape_scales")?;
    let expr_scales = r.f64s(l, "expression_scales")?;
    let tri_count = r.u32("triangle_count")? as usize;
    let flat = r.u32s(tri_count * 3, "triangles")?;
    let triangles = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let lm_count = r.u32("landmark_count")? as usize;
    let landmarks = r.u32s(lm_count, "landmark_indices")?;
    if r.pos != bytes.len() {
        return Err(ModelError::TrailingBytes(bytes.len() - r.pos));
    }
    MorphableModel::new(
        DVector::from_vec(mean),
        DMatrix::from_vec(len, k, shape),
        DMatrix::from_vec(len, l, expr),
        DVector::from_vec(shape_scales),
        DVector::from_vec(expr_scales),
        triangles,
        landmarks,
    )
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MorphableModel, ModelError> {
    read_model(&fs::read(path)?)
}

pub fn save_model(model: &MorphableModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    atomic_write(path.as_ref(), &write_model(model))?;
    Ok(())
}
