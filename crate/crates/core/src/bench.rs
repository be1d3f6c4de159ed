//! Timing harness: per-stage and end-to-end search times against the
//! aligned linear MSE scan, over a grid of sequence lengths.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::archive::EmbeddingArchive;
use crate::dataset::ChunkedArchive;
use crate::error::{Error, Result};
use crate::eval::Summary;
use crate::mass::{distance_profile, ProfileMode};
use crate::reduction::Embedder;
use crate::search::{embed_query, linear_mse_search, QuerySequence, SearchConfig, SearchIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub k: usize,
    pub a: usize,
    pub repetitions: usize,
    pub mode: ProfileMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![3, 6, 12, 24],
            k: 500,
            a: 20,
            repetitions: 10,
            mode: ProfileMode::ZNormalized,
        }
    }
}

/// Wall times in seconds for one sequence length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub t: usize,
    pub transform_mean: f64,
    pub transform_std: f64,
    pub mass_mean: f64,
    pub mass_std: f64,
    pub reorder_mean: f64,
    pub reorder_std: f64,
    pub end_to_end_mean: f64,
    pub end_to_end_std: f64,
    pub linear_mean: f64,
    pub linear_std: f64,
    pub speedup: f64,
    /// Every timed search returned the untimed result.
    pub results_identical: bool,
}

impl BenchRow {
    /// Sum of stage means over the end-to-end mean.
    pub fn stage_ratio(&self) -> f64 {
        (self.transform_mean + self.mass_mean + self.reorder_mean) / self.end_to_end_mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub n_images: usize,
    pub d: usize,
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Bytes needed to hold the embedding archive as `f32`.
    pub fn embedding_bytes(&self) -> usize {
        self.n_images * self.d * 4
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms = |m: f64, s: f64| format!("{:.2} ± {:.2}", m * 1e3, s * 1e3);
        writeln!(
            f,
            "{:>4} {:>16} {:>16} {:>16} {:>16} {:>18} {:>8}",
            "t", "transform ms", "mass ms", "reorder ms", "end-to-end ms", "linear ms", "speedup"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>4} {:>16} {:>16} {:>16} {:>16} {:>18} {:>7.1}x",
                r.t,
                ms(r.transform_mean, r.transform_std),
                ms(r.mass_mean, r.mass_std),
                ms(r.reorder_mean, r.reorder_std),
                ms(r.end_to_end_mean, r.end_to_end_std),
                ms(r.linear_mean, r.linear_std),
                r.speedup
            )?;
        }
        let bytes = self.embedding_bytes();
        write!(
            f,
            "embedding memory: {} * {} * 4 bytes = {:.1} MB ({} repetitions, single thread)",
            self.n_images,
            self.d,
            bytes as f64 / 1e6,
            self.repetitions
        )
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Times retrieval of the prefixes of `query` for every configured length.
/// Runs on the calling thread only.
pub fn run_bench<E: Embedder + ?Sized>(
    images: &ChunkedArchive,
    embeddings: &EmbeddingArchive,
    embedder: &E,
    query: &QuerySequence,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.repetitions < 3 {
        return Err(Error::InvalidArgument("at least 3 repetitions are required".into()));
    }
    let index = SearchIndex::new(embeddings, images)?;
    let mut rows = Vec::new();
    for &t in &cfg.lengths {
        if t > query.t() {
            return Err(Error::InvalidArgument(format!(
                "query has {} scans, t = {t} requested",
                query.t()
            )));
        }
        if index.mask(t).valid_starts().next().is_none() {
            return Err(Error::ArchiveTooSmall(format!(
                "no chunk holds a sequence of {t} images"
            )));
        }
        let q = QuerySequence::new(query.scans()[..t].to_vec())?;
        let search_cfg = SearchConfig::new(cfg.k, cfg.a, t).with_mode(cfg.mode);
        let reference = index.search_with(embedder, &q, &search_cfg)?;

        let mut stages = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        let mut identical = true;
        for _ in 0..cfg.repetitions {
            let (qv, dt) = timed(|| embed_query(embedder, &q));
            let qv = qv?;
            stages[0].push(dt);
            let (cands, dt) = timed(|| index.candidates(&qv, &search_cfg));
            let cands = cands?;
            stages[1].push(dt);
            let (_, dt) = timed(|| index.reorder(&q, &cands, cfg.a));
            stages[2].push(dt);
            let (out, dt) = timed(|| index.search_with(embedder, &q, &search_cfg));
            identical &= out? == reference;
            stages[3].push(dt);
            let (lin, dt) = timed(|| linear_mse_search(images, &q, cfg.a));
            lin?;
            stages[4].push(dt);
        }
        let s: Vec<Summary> = stages.iter().map(|v| Summary::of(v)).collect();
        rows.push(BenchRow {
            t,
            transform_mean: s[0].mean,
            transform_std: s[0].std,
            mass_mean: s[1].mean,
            mass_std: s[1].std,
            reorder_mean: s[2].mean,
            reorder_std: s[2].std,
            end_to_end_mean: s[3].mean,
            end_to_end_std: s[3].std,
            linear_mean: s[4].mean,
            linear_std: s[4].std,
            speedup: s[4].mean / s[3].mean,
            results_identical: identical,
        });
    }
    Ok(BenchReport {
        n_images: embeddings.n_images(),
        d: embeddings.d(),
        repetitions: cfg.repetitions,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassTiming {
    pub query_len: usize,
    pub mean: f64,
    pub std: f64,
}

/// Distance-profile wall time on a random series of `series_len` values for
/// each query length.
pub fn bench_mass(
    series_len: usize,
    query_lens: &[usize],
    repetitions: usize,
    mode: ProfileMode,
    seed: u64,
) -> Result<Vec<MassTiming>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series: Vec<f64> = (0..series_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::new();
    for &q in query_lens {
        let query: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        // warm-up run also validates the input
        distance_profile(&query, &series, mode)?;
        let times: Vec<f64> = (0..repetitions.max(1))
            .map(|_| timed(|| distance_profile(&query, &series, mode)).1)
            .collect();
        let s = Summary::of(&times);
        out.push(MassTiming {
            query_len: q,
            mean: s.mean,
            std: s.std,
        });
    }
    Ok(out)
}
