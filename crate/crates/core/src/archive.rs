//! Embedding archives and the `ANLE` file format shared with external
//! reducers.
//!
//! Little-endian layout: magic `ANLE`, version `u32`, `d` `u32`, image count
//! `u64`, chunk count `u64`, `u64` chunk offsets, provenance JSON as a `u32`
//! byte length followed by UTF-8, then `d * n_images` `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{Map, Value};

use crate::container::read_up_to;
use crate::dataset::validate_offsets;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ANLE";
pub const VERSION: u32 = 1;

/// Reduction metadata carried alongside an archive, stored as a JSON object.
///
/// `method` is always present (`"pca"`, `"umap"`, `"identity"`, ...). UMAP
/// exports add `n`, `mindist`, `metric` and `seed`; PCA adds `components`,
/// `boxcox_lambda` and `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance(Map<String, Value>);

impl Provenance {
    pub fn new(method: &str, d: usize) -> Self {
        let mut map = Map::new();
        map.insert("method".into(), method.into());
        map.insert("d".into(), d.into());
        Self(map)
    }

    pub fn identity(d: usize) -> Self {
        Self::new("identity", d)
    }

    pub fn pca(components: usize, boxcox_lambda: f64, offset: f64) -> Self {
        Self::new("pca", components)
            .with("components", components)
            .with("boxcox_lambda", boxcox_lambda)
            .with("offset", offset)
    }

    pub fn umap(d: usize, n_neighbors: usize, mindist: f64, metric: &str, seed: u64) -> Self {
        Self::new("umap", d)
            .with("n", n_neighbors)
            .with("mindist", mindist)
            .with("metric", metric)
            .with("seed", seed)
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn method(&self) -> &str {
        self.0.get("method").and_then(Value::as_str).unwrap_or("unknown")
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.0.get(key).and_then(Value::as_u64)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(Value::as_f64)
    }

    /// Short human label, e.g. `pca-d20` or `umap-d5-n200`.
    pub fn label(&self) -> String {
        let mut label = format!("{}-d{}", self.method(), self.get_u64("d").unwrap_or(0));
        if let Some(n) = self.get_u64("n") {
            label.push_str(&format!("-n{n}"));
        }
        label
    }

    /// Keys the method requires but this provenance lacks.
    pub fn missing_fields(&self) -> Vec<&'static str> {
        let required: &[&'static str] = match self.method() {
            "umap" => &["d", "n", "mindist", "metric", "seed"],
            "pca" => &["d", "components", "boxcox_lambda", "offset"],
            _ => &["d"],
        };
        required
            .iter()
            .copied()
            .filter(|k| !self.0.contains_key(*k))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing_fields().is_empty()
    }

    fn to_json(&self) -> String {
        Value::Object(self.0.clone()).to_string()
    }

    fn from_json(text: &str) -> Result<Self> {
        match serde_json::from_str::<Value>(text)? {
            Value::Object(map) if map.get("method").is_some_and(Value::is_string) => Ok(Self(map)),
            _ => Err(Error::CorruptHeader(
                "provenance must be a JSON object with a string \"method\"".into(),
            )),
        }
    }
}

/// Per-image embeddings concatenated in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    d: usize,
    n_images: usize,
    flat: Vec<f32>,
    chunk_offsets: Vec<usize>,
    provenance: Provenance,
}

impl EmbeddingArchive {
    pub fn new(
        d: usize,
        flat: Vec<f32>,
        chunk_offsets: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if !flat.len().is_multiple_of(d) {
            return Err(Error::shape(
                format!("a multiple of d = {d}"),
                format!("{} values", flat.len()),
            ));
        }
        if let Some(index) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(pd) = provenance.get_u64("d") {
            if pd != d as u64 {
                return Err(Error::CorruptHeader(format!(
                    "provenance records d = {pd}, archive has d = {d}"
                )));
            }
        }
        let n_images = flat.len() / d;
        validate_offsets(&chunk_offsets, n_images)?;
        Ok(Self {
            d,
            n_images,
            flat,
            chunk_offsets,
            provenance,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn flat(&self) -> &[f32] {
        &self.flat
    }

    /// The concatenated vector widened to `f64` for profile computation.
    pub fn flat_f64(&self) -> Vec<f64> {
        self.flat.iter().map(|&v| v as f64).collect()
    }

    pub fn chunk_offsets(&self) -> &[usize] {
        &self.chunk_offsets
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Embedding of image `index`.
    pub fn image(&self, index: usize) -> &[f32] {
        &self.flat[index * self.d..(index + 1) * self.d]
    }

    /// Concatenated embeddings of images `[start, start + t)`.
    pub fn window(&self, start: usize, t: usize) -> &[f32] {
        &self.flat[start * self.d..(start + t) * self.d]
    }

    /// Size of the stored payload in bytes (`n_images * d * 4`).
    pub fn payload_bytes(&self) -> usize {
        self.flat.len() * std::mem::size_of::<f32>()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&(self.n_images as u64).to_le_bytes())?;
        w.write_all(&(self.chunk_offsets.len() as u64).to_le_bytes())?;
        for &o in &self.chunk_offsets {
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        let json = self.provenance.to_json();
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(json.as_bytes())?;
        let mut payload = Vec::with_capacity(self.payload_bytes());
        for v in &self.flat {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut fixed = [0u8; 28];
        let got = read_up_to(&mut r, &mut fixed)?;
        if got < 4 || &fixed[..4] != MAGIC {
            return Err(Error::NotAnEmbeddingArchive);
        }
        if got < fixed.len() {
            return Err(Error::CorruptHeader(format!("header truncated at {got} bytes")));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let d = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as usize;
        let n_images = u64::from_le_bytes(fixed[12..20].try_into().unwrap());
        let n_chunks = u64::from_le_bytes(fixed[20..28].try_into().unwrap());
        if d == 0 {
            return Err(Error::CorruptHeader("embedding dimension is zero".into()));
        }
        if n_chunks > n_images {
            return Err(Error::CorruptHeader(format!(
                "{n_chunks} chunks for {n_images} images"
            )));
        }
        let mut offsets_raw = vec![0u8; 8 * n_chunks as usize];
        if read_up_to(&mut r, &mut offsets_raw)? < offsets_raw.len() {
            return Err(Error::CorruptHeader("chunk offsets truncated".into()));
        }
        let chunk_offsets: Vec<usize> = offsets_raw
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let mut len_raw = [0u8; 4];
        if read_up_to(&mut r, &mut len_raw)? < 4 {
            return Err(Error::CorruptHeader("provenance length truncated".into()));
        }
        let mut json = vec![0u8; u32::from_le_bytes(len_raw) as usize];
        if read_up_to(&mut r, &mut json)? < json.len() {
            return Err(Error::CorruptHeader("provenance truncated".into()));
        }
        let json = String::from_utf8(json)
            .map_err(|_| Error::CorruptHeader("provenance is not UTF-8".into()))?;
        let provenance = Provenance::from_json(&json)?;

        let expected = n_images
            .checked_mul(d as u64 * 4)
            .ok_or_else(|| Error::CorruptHeader("image count overflows".into()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() as u64 != expected {
            return Err(Error::PayloadLengthMismatch {
                expected,
                found: payload.len() as u64,
            });
        }
        let flat: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(d, flat, chunk_offsets, provenance)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

pub fn write_embedding_archive(archive: &EmbeddingArchive, path: impl AsRef<Path>) -> Result<()> {
    archive.write_file(path)
}

pub fn read_embedding_archive(path: impl AsRef<Path>) -> Result<EmbeddingArchive> {
    EmbeddingArchive::read_file(path)
}
