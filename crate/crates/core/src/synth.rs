//! Synthetic radar-like archives: Gaussian precipitation blobs advecting
//! linearly over a periodic domain, growing or decaying, one independent
//! scene per chunk and one chunk per calendar day.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Chunk, ChunkedArchive};
use crate::error::{Error, Result};
use crate::grid::{ScanGrid, MAX_DBZ, MIN_DBZ};

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Blobs per scene, inclusive range.
    pub blobs: (usize, usize),
    /// Speed in pixels per step; direction is uniform.
    pub velocity: (f64, f64),
    /// Peak reflectivity of a blob at its first scan, dBZ.
    pub intensity: (f64, f64),
    /// Gaussian standard deviation, pixels.
    pub scale: (f64, f64),
    /// Largest per-step log growth rate magnitude; 0 keeps intensity fixed.
    pub growth: f64,
    /// Scans per chunk, inclusive range.
    pub chunk_len: (usize, usize),
    pub cadence: i64,
    /// Timestamp of the first scan; each chunk starts on a new day.
    pub start: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 5000,
            height: 32,
            width: 32,
            blobs: (2, 6),
            velocity: (0.2, 1.5),
            intensity: (20.0, 50.0),
            scale: (1.5, 5.0),
            growth: 0.02,
            chunk_len: (25, 288),
            cadence: 300,
            start: 1_546_300_800,
            seed: 42,
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: (T, T)) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::InvalidArgument(format!("{name} range {r:?} is empty")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("blobs", self.blobs)?;
        check_range("velocity", self.velocity)?;
        check_range("intensity", self.intensity)?;
        check_range("scale", self.scale)?;
        check_range("chunk length", self.chunk_len)?;
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("grid must be non-empty".into()));
        }
        if self.intensity.0 < MIN_DBZ as f64 || self.intensity.1 > MAX_DBZ as f64 {
            return Err(Error::InvalidArgument(format!(
                "intensity range {:?} leaves [0, 55] dBZ",
                self.intensity
            )));
        }
        if self.scale.0 <= 0.0 || self.velocity.0 < 0.0 || self.growth < 0.0 {
            return Err(Error::InvalidArgument(
                "scale must be positive, velocity and growth non-negative".into(),
            ));
        }
        if self.cadence <= 0 || self.chunk_len.0 == 0 {
            return Err(Error::InvalidArgument("cadence and chunk length must be positive".into()));
        }
        if self.chunk_len.1 as i64 * self.cadence > SECONDS_PER_DAY {
            return Err(Error::InvalidArgument(format!(
                "{} scans at {} s do not fit in one day",
                self.chunk_len.1, self.cadence
            )));
        }
        if self.chunk_len.1 < 2 * self.chunk_len.0 && self.chunk_len.0 != self.chunk_len.1 {
            return Err(Error::InvalidArgument(
                "chunk length range must satisfy max >= 2 * min (or max == min)".into(),
            ));
        }
        Ok(())
    }
}

/// Chunk lengths summing to `n`, each inside `range` unless `n < range.0`.
fn chunk_lengths(n: usize, range: (usize, usize), rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (lo, hi) = range;
    let mut lens = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        if remaining <= hi {
            if remaining >= lo || lens.is_empty() || lo == hi {
                lens.push(remaining);
            } else {
                // Too short on its own: rebalance with the previous chunk.
                let prev = lens.pop().unwrap();
                let total = prev + remaining;
                if total <= hi {
                    lens.push(total);
                } else {
                    lens.push(total - lo);
                    lens.push(lo);
                }
            }
            break;
        }
        let len = rng.random_range(lo..=hi);
        lens.push(len);
        remaining -= len;
    }
    lens
}

struct Blob {
    row: f64,
    col: f64,
    v_row: f64,
    v_col: f64,
    peak: f64,
    growth: f64,
    sigma: f64,
}

fn sample_blob(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Blob {
    let speed = rng.random_range(cfg.velocity.0..=cfg.velocity.1);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    Blob {
        row: rng.random_range(0.0..cfg.height as f64),
        col: rng.random_range(0.0..cfg.width as f64),
        v_row: speed * angle.sin(),
        v_col: speed * angle.cos(),
        peak: rng.random_range(cfg.intensity.0..=cfg.intensity.1),
        growth: if cfg.growth > 0.0 {
            rng.random_range(-cfg.growth..=cfg.growth)
        } else {
            0.0
        },
        sigma: rng.random_range(cfg.scale.0..=cfg.scale.1),
    }
}

// Shortest signed separation on a ring of the given length.
fn wrapped(delta: f64, period: f64) -> f64 {
    delta - period * (delta / period).round()
}

fn render(cfg: &SynthConfig, blobs: &[Blob], step: usize, timestamp: i64) -> ScanGrid {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let s = step as f64;
    let mut values = vec![0.0f64; cfg.height * cfg.width];
    for b in blobs {
        let row = b.row + b.v_row * s;
        let col = b.col + b.v_col * s;
        let peak = b.peak * (b.growth * s).exp();
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for r in 0..cfg.height {
            let dr = wrapped(r as f64 - row, h);
            for c in 0..cfg.width {
                let dc = wrapped(c as f64 - col, w);
                values[r * cfg.width + c] += peak * (-(dr * dr + dc * dc) * inv).exp();
            }
        }
    }
    let values = values.into_iter().map(|v| v as f32).collect();
    // Clamping to the dBZ range happens in the constructor.
    ScanGrid::new(timestamp, cfg.height, cfg.width, values).expect("finite synthetic field")
}

fn generate_chunk(cfg: &SynthConfig, day: usize, len: usize, seed: u64) -> Chunk {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blobs = rng.random_range(cfg.blobs.0..=cfg.blobs.1);
    let blobs: Vec<Blob> = (0..n_blobs).map(|_| sample_blob(cfg, &mut rng)).collect();
    let t0 = cfg.start + day as i64 * SECONDS_PER_DAY;
    Chunk {
        scans: (0..len)
            .map(|step| render(cfg, &blobs, step, t0 + step as i64 * cfg.cadence))
            .collect(),
        start_index: 0,
    }
}

/// Deterministic synthetic archive of exactly `cfg.n_images` scans.
pub fn generate(cfg: &SynthConfig) -> Result<ChunkedArchive> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lens = chunk_lengths(cfg.n_images, cfg.chunk_len, &mut rng);
    let seeds: Vec<u64> = lens.iter().map(|_| rng.random()).collect();
    let chunks = lens
        .par_iter()
        .zip(seeds.par_iter())
        .enumerate()
        .map(|(day, (&len, &seed))| generate_chunk(cfg, day, len, seed))
        .collect();
    Ok(ChunkedArchive::from_chunks(chunks))
}

/// Archive whose centred images span at most `rank` dimensions before
/// clamping: a fixed base field plus `rank` smooth patterns with
/// coefficients following a bounded random walk inside each chunk.
pub fn generate_low_rank(cfg: &SynthConfig, rank: usize) -> Result<ChunkedArchive> {
    cfg.validate()?;
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_1a7e);
    let p = cfg.height * cfg.width;
    let pattern_cfg = SynthConfig {
        blobs: (1, 1),
        velocity: (0.0, 0.0),
        growth: 0.0,
        ..cfg.clone()
    };
    let patterns: Vec<Vec<f64>> = (0..rank)
        .map(|_| {
            let blob = sample_blob(&pattern_cfg, &mut rng);
            let g = render(&pattern_cfg, &[blob], 0, 0);
            let peak = g.values().iter().cloned().fold(0.0f32, f32::max) as f64;
            g.values().iter().map(|&v| v as f64 / peak.max(1e-9)).collect()
        })
        .collect();
    let lens = chunk_lengths(cfg.n_images, cfg.chunk_len, &mut rng);
    let seeds: Vec<u64> = lens.iter().map(|_| rng.random()).collect();
    let base = 5.0;
    let hi = cfg.intensity.1;
    let chunks = lens
        .par_iter()
        .zip(seeds.par_iter())
        .enumerate()
        .map(|(day, (&len, &seed))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t0 = cfg.start + day as i64 * SECONDS_PER_DAY;
            let step = (hi / 10.0).max(0.1);
            let mut coef: Vec<f64> = (0..rank).map(|_| rng.random_range(0.0..=hi)).collect();
            let scans = (0..len)
                .map(|s| {
                    let mut values = vec![base; p];
                    for (c, pat) in coef.iter().zip(&patterns) {
                        for (v, &x) in values.iter_mut().zip(pat) {
                            *v += c * x;
                        }
                    }
                    for c in coef.iter_mut() {
                        *c = (*c + rng.random_range(-step..=step)).clamp(0.0, hi);
                    }
                    let values = values.into_iter().map(|v| v as f32).collect();
                    ScanGrid::new(t0 + s as i64 * cfg.cadence, cfg.height, cfg.width, values)
                        .expect("finite synthetic field")
                })
                .collect();
            Chunk {
                scans,
                start_index: 0,
            }
        })
        .collect();
    Ok(ChunkedArchive::from_chunks(chunks))
}
