//! Frozen-encoder feature ingestion, fusion, and similarity search.
//!
//! Image encoders are not run here: their output vectors are read from MSEF
//! feature files, one store per encoder. Fusion concatenates the two vectors
//! for an image and projects them through the trainable GELU layer L1; the
//! projected vectors also drive nearest-neighbor retrieval for
//! comparison-based reranking.
//!
//! MSEF file layout (little-endian, no padding):
//!
//! ```text
//! magic  "MSEF" (4 bytes)
//! version u8 = 1
//! encoder-name length u16, then UTF-8 bytes
//! record count u32
//! dim u32
//! per record: id length u16, UTF-8 id, dim * f32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Activation, LinearLayer, Mode};
use crate::tensor::{Tape, Tensor};

pub const MSEF_MAGIC: &[u8; 4] = b"MSEF";
pub const MSEF_VERSION: u8 = 1;

/// One encoder's feature vectors, keyed by image id. Record order is
/// preserved so that `save` after `load` reproduces the file byte for byte.
#[derive(Debug)]
pub struct FeatureStore {
    encoder_name: String,
    dim: usize,
    records: Vec<(String, Vec<f32>)>,
    index: BTreeMap<String, usize>,
}

impl FeatureStore {
    pub fn new(encoder_name: impl Into<String>, dim: usize) -> FeatureStore {
        FeatureStore {
            encoder_name: encoder_name.into(),
            dim,
            records: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn encoder_name(&self) -> &str {
        &self.encoder_name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(id, _)| id.as_str())
    }

    pub fn get(&self, image_id: &str) -> Option<&[f32]> {
        self.index.get(image_id).map(|&i| self.records[i].1.as_slice())
    }

    pub fn insert(&mut self, image_id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let image_id = image_id.into();
        if vector.len() != self.dim {
            return Err(Error::InvalidConfig(format!(
                "feature for `{image_id}` has length {}, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(bad) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("feature `{image_id}` component {bad}"),
            });
        }
        if self.index.contains_key(&image_id) {
            return Err(Error::InvalidConfig(format!(
                "duplicate feature id `{image_id}`"
            )));
        }
        self.index.insert(image_id.clone(), self.records.len());
        self.records.push((image_id, vector));
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MSEF_MAGIC);
        out.push(MSEF_VERSION);
        out.extend_from_slice(&(self.encoder_name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.encoder_name.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, vector) in &self.records {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FeatureStore> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MSEF_MAGIC {
            return Err(Error::Format {
                what: "MSEF magic mismatch",
                offset: 0,
                detail: format!("found {magic:?}"),
            });
        }
        let version = r.u8("version")?;
        if version != MSEF_VERSION {
            return Err(Error::VersionMismatch {
                what: "MSEF",
                found: version,
                expected: MSEF_VERSION,
            });
        }
        let name_len = r.u16("encoder name length")? as usize;
        let name = r.utf8(name_len, "encoder name")?;
        let count = r.u32("record count")? as usize;
        let dim = r.u32("dim")? as usize;
        let mut store = FeatureStore::new(name, dim);
        for rec in 0..count {
            let rec_offset = r.offset;
            let id_len = r.u16("record id length")? as usize;
            let id = r.utf8(id_len, "record id")?;
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(r.f32("feature value")?);
            }
            if let Some(bad) = vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format {
                    what: "non-finite feature value",
                    offset: rec_offset,
                    detail: format!("record {rec} (`{id}`), component {bad}"),
                });
            }
            if store.index.contains_key(&id) {
                return Err(Error::Format {
                    what: "duplicate feature id",
                    offset: rec_offset,
                    detail: format!("record {rec} repeats `{id}`"),
                });
            }
            store.insert(id, vector)?;
        }
        if r.offset != bytes.len() {
            return Err(Error::Format {
                what: "trailing bytes after MSEF payload",
                offset: r.offset,
                detail: format!("{} extra bytes", bytes.len() - r.offset),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FeatureStore> {
        let bytes = std::fs::read(path)?;
        FeatureStore::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                what: "truncated payload",
                offset: self.offset,
                detail: format!("needed {n} bytes for {what}"),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &'static str) -> Result<String> {
        let offset = self.offset;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Format {
            what: "invalid UTF-8",
            offset,
            detail: e.to_string(),
        })
    }
}

/// An image's two concatenated encoder vectors after the L1 projection.
#[derive(Debug)]
pub struct FusedFeature {
    pub image_id: String,
    /// `1 x l1_out` projected vector.
    pub projected: Tensor,
}

/// Concatenate an image's two feature vectors and project through L1
/// (dropout applied to the concatenation in train mode). L1 must be the
/// GELU-activated fusion layer.
pub fn fuse(
    tape: &Tape,
    a: &FeatureStore,
    b: &FeatureStore,
    l1: &LinearLayer,
    mode: Mode,
    image_id: &str,
) -> Result<FusedFeature> {
    let va = a.get(image_id).ok_or_else(|| Error::MissingImage {
        stream: a.encoder_name.clone(),
        image_id: image_id.to_string(),
    })?;
    let vb = b.get(image_id).ok_or_else(|| Error::MissingImage {
        stream: b.encoder_name.clone(),
        image_id: image_id.to_string(),
    })?;
    let raw: Vec<f64> = va.iter().chain(vb.iter()).map(|&v| v as f64).collect();
    fuse_raw(tape, &raw, l1, mode, image_id)
}

/// Fusion from an already-concatenated raw vector.
pub fn fuse_raw(
    tape: &Tape,
    concatenated: &[f64],
    l1: &LinearLayer,
    mode: Mode,
    image_id: &str,
) -> Result<FusedFeature> {
    if l1.activation() != Activation::Gelu {
        return Err(Error::InvalidConfig(
            "the fusion layer L1 must use the gelu activation".to_string(),
        ));
    }
    if concatenated.len() != l1.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: (1, concatenated.len()),
            rhs: (l1.in_dim(), l1.out_dim()),
        });
    }
    let x = Tensor::row(concatenated);
    let x = crate::layers::apply_dropout(tape, mode, &x)?;
    let projected = l1.forward(tape, &x)?;
    Ok(FusedFeature {
        image_id: image_id.to_string(),
        projected,
    })
}

/// `u . v / (|u| |v|)`; errors on a zero vector.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: (1, u.len()),
            rhs: (1, v.len()),
        });
    }
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (nu * nv))
}

/// Ids of the `k` pool entries most cosine-similar to the query's projected
/// vector, descending, ties broken by ascending image id. The pool must not
/// contain the query itself.
pub fn nearest_neighbors(
    query: &FusedFeature,
    pool: &[FusedFeature],
    k: usize,
) -> Result<Vec<String>> {
    if k > pool.len() {
        return Err(Error::InsufficientPool {
            requested: k,
            available: pool.len(),
        });
    }
    let qv = query.projected.to_vec();
    let mut scored: Vec<(f64, &str)> = Vec::with_capacity(pool.len());
    for entry in pool {
        let sim = cosine_similarity(&qv, &entry.projected.to_vec())?;
        scored.push((sim, entry.image_id.as_str()));
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("similarities are finite")
            .then_with(|| a.1.cmp(b.1))
    });
    Ok(scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
}
