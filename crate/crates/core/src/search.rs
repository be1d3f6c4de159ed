//! End-to-end analog retrieval: embed the query sequence, take the `k` best
//! aligned profile matches over the embedding archive, reorder them by
//! sequence MSE on the original images and keep the top `a`.

use serde::Serialize;

use crate::archive::EmbeddingArchive;
use crate::dataset::ChunkedArchive;
use crate::error::{Error, Result};
use crate::grid::{squared_error, ScanGrid};
use crate::mass::{distance_profile, top_k_aligned, AlignmentMask, ProfileMode};
use crate::reduction::Embedder;

/// `t` consecutive scans used as a search query.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySequence {
    scans: Vec<ScanGrid>,
}

impl QuerySequence {
    pub fn new(scans: Vec<ScanGrid>) -> Result<Self> {
        let first = scans
            .first()
            .ok_or_else(|| Error::InvalidArgument("query sequence is empty".into()))?;
        let shape = first.shape();
        if let Some(bad) = scans.iter().find(|s| s.shape() != shape) {
            return Err(Error::shape(
                format!("{}x{}", shape.0, shape.1),
                format!("{}x{}", bad.height(), bad.width()),
            ));
        }
        if let Some(i) = scans.windows(2).position(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::UnsortedScans { index: i + 1 });
        }
        Ok(Self { scans })
    }

    /// Builds a query that must also respect `cadence` (seconds) within the
    /// given relative tolerance between consecutive scans.
    pub fn with_cadence(scans: Vec<ScanGrid>, cadence: i64, tolerance: f64) -> Result<Self> {
        let query = Self::new(scans)?;
        for (i, w) in query.scans.windows(2).enumerate() {
            let gap = (w[1].timestamp - w[0].timestamp) as f64;
            if (gap - cadence as f64).abs() > tolerance * cadence as f64 {
                return Err(Error::InvalidArgument(format!(
                    "query is not contiguous between scans {i} and {}",
                    i + 1
                )));
            }
        }
        Ok(query)
    }

    /// The `t` scans at `[start, start + t)` of `archive`, if they share a chunk.
    pub fn from_archive(archive: &ChunkedArchive, start: usize, t: usize) -> Option<Self> {
        archive
            .sequence(start, t)
            .map(|s| Self { scans: s.to_vec() })
    }

    pub fn t(&self) -> usize {
        self.scans.len()
    }

    pub fn scans(&self) -> &[ScanGrid] {
        &self.scans
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Candidate pool taken from the distance profile.
    pub k: usize,
    /// Analogs returned after the MSE reorder.
    pub a: usize,
    /// Sequence length in images.
    pub t: usize,
    pub mode: ProfileMode,
    /// Minimum index separation between candidates (0 keeps overlaps).
    pub exclusion: usize,
}

impl SearchConfig {
    pub fn new(k: usize, a: usize, t: usize) -> Self {
        Self {
            k,
            a,
            t,
            mode: ProfileMode::ZNormalized,
            exclusion: 0,
        }
    }

    pub fn with_mode(mut self, mode: ProfileMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || self.a > self.k {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= a <= k, got a = {}, k = {}",
                self.a, self.k
            )));
        }
        if self.t == 0 {
            return Err(Error::InvalidArgument("sequence length t must be positive".into()));
        }
        Ok(())
    }
}

/// One retrieved analog sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalogMatch {
    /// 1-based position in the final ranking.
    pub rank: usize,
    /// First image of the sequence in the search archive.
    pub image_index: usize,
    /// Distance reported by the profile (NaN for linear-scan matches).
    pub profile_distance: f64,
    /// Mean squared pixel error against the query over the whole sequence.
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStatus {
    Complete,
    /// Fewer than `k` valid aligned starts existed.
    ShortCandidatePool { requested: usize, available: usize },
    /// No sequence of length `t` fits inside any chunk.
    EmptyCandidatePool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub matches: Vec<AnalogMatch>,
    pub status: SearchStatus,
}

/// Mean squared error over all `t · p` pixels of two sequences.
pub fn mse_sequence(a: &[ScanGrid], b: &[ScanGrid]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            format!("{} scans", a.len()),
            format!("{} scans", b.len()),
        ));
    }
    let mut total = 0.0;
    let mut pixels = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::shape(
                format!("{}x{}", x.height(), x.width()),
                format!("{}x{}", y.height(), y.width()),
            ));
        }
        total += squared_error(x.values(), y.values());
        pixels += x.len();
    }
    Ok(if pixels == 0 { 0.0 } else { total / pixels as f64 })
}

// Shapes already checked by the caller.
fn sequence_mse_unchecked(a: &[ScanGrid], b: &[ScanGrid]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| squared_error(x.values(), y.values()))
        .sum();
    let pixels: usize = a.iter().map(ScanGrid::len).sum();
    total / pixels as f64
}

/// Concatenated per-image embeddings of the query, length `d · t`.
pub fn embed_query<E: Embedder + ?Sized>(embedder: &E, query: &QuerySequence) -> Result<Vec<f64>> {
    let d = embedder.dim();
    let mut out = Vec::with_capacity(d * query.t());
    for scan in query.scans() {
        out.extend(embedder.embed_image(scan)?);
    }
    Ok(out)
}

fn rank_by_mse(mut scored: Vec<AnalogMatch>, a: usize) -> Vec<AnalogMatch> {
    let order = |x: &AnalogMatch, y: &AnalogMatch| {
        x.mse
            .total_cmp(&y.mse)
            .then(x.image_index.cmp(&y.image_index))
    };
    if scored.len() > a {
        scored.select_nth_unstable_by(a - 1, order);
        scored.truncate(a);
    }
    scored.sort_unstable_by(order);
    for (i, m) in scored.iter_mut().enumerate() {
        m.rank = i + 1;
    }
    scored
}

/// Embedding archive widened to `f64`, paired with the images it indexes.
#[derive(Debug)]
pub struct SearchIndex<'a> {
    images: &'a ChunkedArchive,
    series: Vec<f64>,
    d: usize,
    chunk_offsets: Vec<usize>,
}

impl<'a> SearchIndex<'a> {
    pub fn new(embeddings: &EmbeddingArchive, images: &'a ChunkedArchive) -> Result<Self> {
        if embeddings.n_images() != images.len() {
            return Err(Error::shape(
                format!("{} images in the embedding archive", embeddings.n_images()),
                format!("{} images in the image archive", images.len()),
            ));
        }
        if embeddings.chunk_offsets() != images.chunk_offsets() {
            return Err(Error::shape(
                "matching chunk offsets",
                "embedding and image archives chunked differently",
            ));
        }
        Ok(Self {
            images,
            series: embeddings.flat_f64(),
            d: embeddings.d(),
            chunk_offsets: embeddings.chunk_offsets().to_vec(),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn images(&self) -> &ChunkedArchive {
        self.images
    }

    pub fn mask(&self, t: usize) -> AlignmentMask {
        AlignmentMask::new(self.d, &self.chunk_offsets, self.images.len(), t)
    }

    /// Profile stage: the `k` best aligned starts for an embedded query.
    pub fn candidates(&self, query_vec: &[f64], cfg: &SearchConfig) -> Result<Vec<(usize, f64)>> {
        if query_vec.len() != self.d * cfg.t {
            return Err(Error::shape(
                format!("query embedding of length d·t = {}", self.d * cfg.t),
                format!("length {}", query_vec.len()),
            ));
        }
        let mask = self.mask(cfg.t);
        if mask.valid_starts().next().is_none() {
            return Ok(Vec::new());
        }
        let profile = distance_profile(query_vec, &self.series, cfg.mode)?;
        top_k_aligned(&profile, &mask, cfg.k, cfg.exclusion)
    }

    /// Reorder stage: MSE of each candidate against the query, best `a` kept.
    pub fn reorder(
        &self,
        query: &QuerySequence,
        candidates: &[(usize, f64)],
        a: usize,
    ) -> Vec<AnalogMatch> {
        let t = query.t();
        let scored = candidates
            .iter()
            .filter_map(|&(j, dist)| {
                let seq = self.images.sequence(j, t)?;
                Some(AnalogMatch {
                    rank: 0,
                    image_index: j,
                    profile_distance: dist,
                    mse: sequence_mse_unchecked(query.scans(), seq),
                })
            })
            .collect();
        rank_by_mse(scored, a)
    }

    fn check_query(&self, query: &QuerySequence, cfg: &SearchConfig) -> Result<()> {
        cfg.validate()?;
        if query.t() != cfg.t {
            return Err(Error::shape(
                format!("query of t = {} scans", cfg.t),
                format!("{} scans", query.t()),
            ));
        }
        if let Some(shape) = self.images.grid_shape() {
            let qs = query.scans()[0].shape();
            if qs != shape {
                return Err(Error::shape(
                    format!("{}x{} query grids", shape.0, shape.1),
                    format!("{}x{}", qs.0, qs.1),
                ));
            }
        }
        Ok(())
    }

    /// Profile search and MSE reorder for a query whose embedding is given.
    pub fn search(
        &self,
        query_vec: &[f64],
        query: &QuerySequence,
        cfg: &SearchConfig,
    ) -> Result<SearchOutcome> {
        self.check_query(query, cfg)?;
        let candidates = self.candidates(query_vec, cfg)?;
        let status = if candidates.is_empty() {
            log::warn!("no valid aligned sequence of length {} in the archive", cfg.t);
            SearchStatus::EmptyCandidatePool
        } else if candidates.len() < cfg.k {
            log::warn!(
                "candidate pool shrank to {} (k = {})",
                candidates.len(),
                cfg.k
            );
            SearchStatus::ShortCandidatePool {
                requested: cfg.k,
                available: candidates.len(),
            }
        } else {
            SearchStatus::Complete
        };
        Ok(SearchOutcome {
            matches: self.reorder(query, &candidates, cfg.a),
            status,
        })
    }

    /// Embeds the query with `embedder`, then [`search`](Self::search).
    pub fn search_with<E: Embedder + ?Sized>(
        &self,
        embedder: &E,
        query: &QuerySequence,
        cfg: &SearchConfig,
    ) -> Result<SearchOutcome> {
        if embedder.dim() != self.d {
            return Err(Error::shape(
                format!("embedder of d = {}", self.d),
                format!("d = {}", embedder.dim()),
            ));
        }
        let query_vec = embed_query(embedder, query)?;
        self.search(&query_vec, query, cfg)
    }
}

/// Retrieves the `cfg.a` best analogs of `query` from the search archive.
pub fn find_analogs<E: Embedder + ?Sized>(
    embeddings: &EmbeddingArchive,
    images: &ChunkedArchive,
    embedder: &E,
    query: &QuerySequence,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    SearchIndex::new(embeddings, images)?.search_with(embedder, query, cfg)
}

/// Brute-force baseline: MSE of the query against every aligned sequence
/// start inside a chunk, best `a` kept.
pub fn linear_mse_search(
    images: &ChunkedArchive,
    query: &QuerySequence,
    a: usize,
) -> Result<Vec<AnalogMatch>> {
    if a == 0 {
        return Err(Error::InvalidArgument("a must be at least 1".into()));
    }
    if let Some(shape) = images.grid_shape() {
        let qs = query.scans()[0].shape();
        if qs != shape {
            return Err(Error::shape(
                format!("{}x{} query grids", shape.0, shape.1),
                format!("{}x{}", qs.0, qs.1),
            ));
        }
    }
    let t = query.t();
    let mut scored = Vec::new();
    for chunk in images.chunks() {
        if chunk.len() < t {
            continue;
        }
        for local in 0..=chunk.len() - t {
            scored.push(AnalogMatch {
                rank: 0,
                image_index: chunk.start_index + local,
                profile_distance: f64::NAN,
                mse: sequence_mse_unchecked(query.scans(), &chunk.scans[local..local + t]),
            });
        }
    }
    Ok(rank_by_mse(scored, a))
}
