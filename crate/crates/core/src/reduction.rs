//! Per-image embeddings: the Box-Cox + PCA baseline and the identity
//! embedding (image flattened as-is).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{EmbeddingArchive, Provenance};
use crate::dataset::{ChunkedArchive, ZrRelation};
use crate::error::{Error, Result};
use crate::grid::ScanGrid;

/// Maps one image to a fixed-length vector.
pub trait Embedder: Sync {
    /// Pixels per input image.
    fn input_len(&self) -> usize;

    /// Embedding length `d`.
    fn dim(&self) -> usize;

    /// Writes the embedding of `image` into `out` (length `dim()`).
    fn embed_values(&self, image: &[f32], out: &mut [f64]);

    fn provenance(&self) -> Provenance;

    fn embed_image(&self, image: &ScanGrid) -> Result<Vec<f64>> {
        if image.len() != self.input_len() {
            return Err(Error::shape(
                format!("{} pixels", self.input_len()),
                format!("{} pixels", image.len()),
            ));
        }
        let mut out = vec![0.0; self.dim()];
        self.embed_values(image.values(), &mut out);
        Ok(out)
    }
}

/// Embeds every image of an archive, preserving order and chunk offsets.
pub fn embed_archive<E: Embedder + ?Sized>(
    embedder: &E,
    archive: &ChunkedArchive,
) -> Result<EmbeddingArchive> {
    let d = embedder.dim();
    let p = embedder.input_len();
    if let Some(bad) = archive.scans().find(|g| g.len() != p) {
        return Err(Error::shape(format!("{p} pixels"), format!("{} pixels", bad.len())));
    }
    let scans: Vec<&ScanGrid> = archive.scans().collect();
    let mut flat = vec![0f32; scans.len() * d];
    flat.par_chunks_mut(d)
        .zip(scans.par_iter())
        .for_each_init(
            || vec![0.0; d],
            |buf, (slot, scan)| {
                embedder.embed_values(scan.values(), buf);
                for (s, &v) in slot.iter_mut().zip(buf.iter()) {
                    *s = v as f32;
                }
            },
        );
    EmbeddingArchive::new(d, flat, archive.chunk_offsets().to_vec(), embedder.provenance())
}

/// Embedding equal to the flattened image (`d = p`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityEmbedder {
    pub height: usize,
    pub width: usize,
}

impl IdentityEmbedder {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }
}

impl Embedder for IdentityEmbedder {
    fn input_len(&self) -> usize {
        self.height * self.width
    }

    fn dim(&self) -> usize {
        self.height * self.width
    }

    fn embed_values(&self, image: &[f32], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(image) {
            *o = v as f64;
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::identity(self.dim())
    }
}

#[inline]
fn boxcox(x: f64, lambda: f64, offset: f64) -> f64 {
    let shifted = x + offset;
    if lambda == 0.0 {
        shifted.ln()
    } else {
        (shifted.powf(lambda) - 1.0) / lambda
    }
}

/// `((x + offset)^λ - 1) / λ`, or `ln(x + offset)` at `λ = 0`.
pub fn boxcox_transform(values: &[f64], lambda: f64, offset: f64) -> Result<Vec<f64>> {
    if let Some(&x) = values.iter().find(|&&x| x.is_nan() || x + offset <= 0.0) {
        return Err(Error::NonPositiveShifted { value: x + offset });
    }
    Ok(values.iter().map(|&x| boxcox(x, lambda, offset)).collect())
}

/// Box-Cox profile log-likelihood of `λ` (up to a constant).
pub fn boxcox_log_likelihood(values: &[f64], lambda: f64, offset: f64) -> f64 {
    let n = values.len() as f64;
    let log_sum: f64 = values.iter().map(|&x| (x + offset).ln()).sum();
    let transformed: Vec<f64> = values.iter().map(|&x| boxcox(x, lambda, offset)).collect();
    let mean = transformed.iter().sum::<f64>() / n;
    let var = transformed.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    -0.5 * n * var.ln() + (lambda - 1.0) * log_sum
}

/// Maximum-likelihood `λ` by golden-section search on `[-3, 3]`.
pub fn boxcox_mle(values: &[f64], offset: f64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(
            "Box-Cox estimation needs at least two values".into(),
        ));
    }
    if let Some(&x) = values.iter().find(|&&x| x.is_nan() || x + offset <= 0.0) {
        return Err(Error::NonPositiveShifted { value: x + offset });
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return Err(Error::InvalidArgument(
            "Box-Cox estimation needs non-constant values".into(),
        ));
    }
    let f = |l: f64| -boxcox_log_likelihood(values, l, offset);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-3.0f64, 3.0f64);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-7 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    Ok((a + b) / 2.0)
}

/// How the Box-Cox exponent is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Fixed(f64),
    Mle,
}

impl std::str::FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("mle") {
            return Ok(Self::Mle);
        }
        s.parse::<f64>()
            .map(Self::Fixed)
            .map_err(|_| Error::InvalidArgument(format!("lambda must be \"mle\" or a number, got {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaConfig {
    pub lambda: LambdaMode,
    /// Added to the rain rate before Box-Cox.
    pub offset: f64,
    /// Reflectivity to rain-rate conversion; `None` feeds dBZ values straight
    /// into Box-Cox.
    pub zr: Option<ZrRelation>,
    /// Cap on pooled pixel values used for `λ` estimation (evenly strided).
    pub max_lambda_samples: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaMode::Mle,
            offset: 0.01,
            zr: Some(ZrRelation::default()),
            max_lambda_samples: 1_000_000,
        }
    }
}

/// Fitted Box-Cox + PCA transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub height: usize,
    pub width: usize,
    /// Per-pixel mean of the transformed training images.
    pub mean: Vec<f64>,
    /// `d × p` row-major; rows are orthonormal.
    pub components: Vec<f64>,
    /// Variance of the training data along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub boxcox_lambda: f64,
    pub offset: f64,
    pub zr: Option<ZrRelation>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let p = self.mean.len();
        &self.components[i * p..(i + 1) * p]
    }

    fn transform_pixel(&self, dbz: f32) -> f64 {
        let x = match &self.zr {
            Some(zr) => zr.rain_rate(dbz as f64),
            None => dbz as f64,
        };
        boxcox(x, self.boxcox_lambda, self.offset)
    }

    /// Rain-rate conversion, Box-Cox and centring of one image.
    pub fn centred_image(&self, image: &[f32]) -> Vec<f64> {
        image
            .iter()
            .zip(&self.mean)
            .map(|(&v, m)| self.transform_pixel(v) - m)
            .collect()
    }

    /// Maps component coefficients back to (transformed, uncentred) pixel space.
    pub fn reconstruct(&self, coefficients: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (i, &c) in coefficients.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.component(i)) {
                *o += c * w;
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

impl Embedder for PcaModel {
    fn input_len(&self) -> usize {
        self.mean.len()
    }

    fn dim(&self) -> usize {
        self.n_components()
    }

    fn embed_values(&self, image: &[f32], out: &mut [f64]) {
        let centred = self.centred_image(image);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self
                .component(i)
                .iter()
                .zip(&centred)
                .map(|(w, x)| w * x)
                .sum();
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::pca(self.n_components(), self.boxcox_lambda, self.offset)
    }
}

/// Fits the top-`d` principal components of the Box-Cox transformed,
/// per-pixel centred training images (SVD of the data matrix).
pub fn fit_pca(archive: &ChunkedArchive, d: usize, cfg: &PcaConfig) -> Result<PcaModel> {
    let (height, width) = archive
        .grid_shape()
        .ok_or_else(|| Error::InvalidArgument("cannot fit PCA on an empty archive".into()))?;
    archive.check_uniform_shape()?;
    let n = archive.len();
    let p = height * width;
    if d == 0 || d > n.min(p) {
        return Err(Error::TooManyComponents {
            requested: d,
            max: n.min(p),
        });
    }

    let rate = |v: f32| match &cfg.zr {
        Some(zr) => zr.rain_rate(v as f64),
        None => v as f64,
    };
    let lambda = match cfg.lambda {
        LambdaMode::Fixed(l) => l,
        LambdaMode::Mle => {
            let total = n * p;
            let stride = total.div_ceil(cfg.max_lambda_samples.max(2));
            let pooled: Vec<f64> = archive
                .scans()
                .flat_map(|g| g.values().iter().copied())
                .step_by(stride)
                .map(rate)
                .collect();
            boxcox_mle(&pooled, cfg.offset)?
        }
    };
    if let Some(g) = archive.scans().find(|g| g.values().iter().any(|&v| rate(v) + cfg.offset <= 0.0)) {
        let bad = g.values().iter().map(|&v| rate(v)).fold(f64::INFINITY, f64::min);
        return Err(Error::NonPositiveShifted { value: bad + cfg.offset });
    }

    let mut data = DMatrix::<f64>::zeros(n, p);
    for (r, scan) in archive.scans().enumerate() {
        for (c, &v) in scan.values().iter().enumerate() {
            data[(r, c)] = boxcox(rate(v), lambda, cfg.offset);
        }
    }
    let mean: Vec<f64> = (0..p).map(|c| data.column(c).mean()).collect();
    for (c, m) in mean.iter().enumerate() {
        data.column_mut(c).add_scalar_mut(-m);
    }

    let svd = data.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::InvalidArgument("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let denom = (n.max(2) - 1) as f64;
    let mut components = Vec::with_capacity(d * p);
    let mut explained_variance = Vec::with_capacity(d);
    for &i in order.iter().take(d) {
        let mut row: Vec<f64> = v_t.row(i).iter().copied().collect();
        let pivot = row
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.extend(row);
        let s = svd.singular_values[i];
        explained_variance.push(s * s / denom);
    }

    Ok(PcaModel {
        height,
        width,
        mean,
        components,
        explained_variance,
        boxcox_lambda: lambda,
        offset: cfg.offset,
        zr: cfg.zr,
    })
}

/// Embeds every image of `archive` with a fitted model.
pub fn pca_embed(model: &PcaModel, archive: &ChunkedArchive) -> Result<EmbeddingArchive> {
    if let Some(shape) = archive.grid_shape() {
        if shape != (model.height, model.width) {
            return Err(Error::shape(
                format!("{}x{}", model.height, model.width),
                format!("{}x{}", shape.0, shape.1),
            ));
        }
    }
    embed_archive(model, archive)
}
