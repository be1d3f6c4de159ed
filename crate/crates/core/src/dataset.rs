//! Archive preparation: day/gap chunking, low-signal filtering, bilinear
//! resizing, the temporal search/verification split and wet area ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScanGrid;

const SECONDS_PER_DAY: i64 = 86_400;

/// Parameters controlling how a scan stream is cut into contiguous chunks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkingConfig {
    /// Nominal time between scans, seconds.
    pub cadence: i64,
    /// Chunks whose first-to-last span is shorter than this are dropped.
    pub min_duration: i64,
    /// Offset added to UTC timestamps before computing the calendar day.
    pub tz_offset: i64,
    /// Relative jitter on the cadence still counted as contiguous.
    pub cadence_tolerance: f64,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            cadence: 300,
            min_duration: 7200,
            tz_offset: 0,
            cadence_tolerance: 0.1,
        }
    }
}

impl ChunkingConfig {
    fn is_contiguous(&self, prev: i64, next: i64) -> bool {
        let gap = (next - prev) as f64;
        let cadence = self.cadence as f64;
        (gap - cadence).abs() <= self.cadence_tolerance * cadence
    }

    fn day(&self, timestamp: i64) -> i64 {
        (timestamp + self.tz_offset).div_euclid(SECONDS_PER_DAY)
    }

    fn long_enough(&self, scans: &[ScanGrid]) -> bool {
        match (scans.first(), scans.last()) {
            (Some(first), Some(last)) => last.timestamp - first.timestamp >= self.min_duration,
            _ => false,
        }
    }
}

/// A run of temporally contiguous scans.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub scans: Vec<ScanGrid>,
    /// Position of the first scan in the owning archive.
    pub start_index: usize,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Mean over every pixel of every scan.
    pub fn mean_value(&self) -> f64 {
        let (sum, count) = self.scans.iter().fold((0.0f64, 0usize), |(s, c), g| {
            (s + g.values().iter().map(|&v| v as f64).sum::<f64>(), c + g.len())
        });
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Ordered chunks with cumulative offsets into a global image index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChunkedArchive {
    chunks: Vec<Chunk>,
    chunk_offsets: Vec<usize>,
    total_scans: usize,
}

impl ChunkedArchive {
    /// Assembles an archive, renumbering `start_index` of every chunk.
    /// Empty chunks are dropped.
    pub fn from_chunks(chunks: Vec<Chunk>) -> Self {
        let mut offsets = Vec::with_capacity(chunks.len());
        let mut total = 0;
        let chunks: Vec<Chunk> = chunks
            .into_iter()
            .filter(|c| !c.is_empty())
            .map(|mut c| {
                c.start_index = total;
                offsets.push(total);
                total += c.len();
                c
            })
            .collect();
        Self {
            chunks,
            chunk_offsets: offsets,
            total_scans: total,
        }
    }

    /// Rebuilds chunk structure over a flat scan list from known offsets.
    pub fn from_scans_with_offsets(scans: Vec<ScanGrid>, offsets: &[usize]) -> Result<Self> {
        validate_offsets(offsets, scans.len())?;
        let mut chunks = Vec::with_capacity(offsets.len());
        let mut rest = scans;
        for &start in offsets.iter().rev() {
            let tail = rest.split_off(start);
            chunks.push(Chunk {
                scans: tail,
                start_index: start,
            });
        }
        chunks.reverse();
        Ok(Self::from_chunks(chunks))
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk_offsets(&self) -> &[usize] {
        &self.chunk_offsets
    }

    pub fn len(&self) -> usize {
        self.total_scans
    }

    pub fn is_empty(&self) -> bool {
        self.total_scans == 0
    }

    /// `(height, width)` of the first scan, if any.
    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.chunks.first().and_then(|c| c.scans.first()).map(|g| g.shape())
    }

    /// Chunk number and position within it of a global image index.
    pub fn locate(&self, index: usize) -> Option<(usize, usize)> {
        if index >= self.total_scans {
            return None;
        }
        let chunk = self.chunk_offsets.partition_point(|&o| o <= index) - 1;
        Some((chunk, index - self.chunk_offsets[chunk]))
    }

    pub fn scan(&self, index: usize) -> Option<&ScanGrid> {
        self.locate(index)
            .map(|(c, local)| &self.chunks[c].scans[local])
    }

    /// The `t` scans starting at `start`, provided they lie within one chunk.
    pub fn sequence(&self, start: usize, t: usize) -> Option<&[ScanGrid]> {
        let (c, local) = self.locate(start)?;
        self.chunks[c].scans.get(local..local + t)
    }

    pub fn scans(&self) -> impl Iterator<Item = &ScanGrid> + '_ {
        self.chunks.iter().flat_map(|c| c.scans.iter())
    }

    pub fn into_scans(self) -> Vec<ScanGrid> {
        self.chunks.into_iter().flat_map(|c| c.scans).collect()
    }

    /// Every scan has the same grid shape.
    pub fn check_uniform_shape(&self) -> Result<()> {
        if let Some(shape) = self.grid_shape() {
            if let Some(bad) = self.scans().find(|g| g.shape() != shape) {
                return Err(Error::shape(
                    format!("{}x{}", shape.0, shape.1),
                    format!("{}x{}", bad.height(), bad.width()),
                ));
            }
        }
        Ok(())
    }

    /// Applies `f` to every scan, keeping the chunk layout.
    pub fn try_map_scans<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&ScanGrid) -> Result<ScanGrid>,
    {
        let chunks = self
            .chunks
            .iter()
            .map(|c| {
                Ok(Chunk {
                    scans: c.scans.iter().map(&f).collect::<Result<_>>()?,
                    start_index: c.start_index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_chunks(chunks))
    }
}

pub(crate) fn validate_offsets(offsets: &[usize], n_images: usize) -> Result<()> {
    if n_images == 0 {
        if offsets.is_empty() {
            return Ok(());
        }
        return Err(Error::CorruptHeader("chunk offsets given for an empty archive".into()));
    }
    if offsets.first() != Some(&0) {
        return Err(Error::CorruptHeader("first chunk offset must be 0".into()));
    }
    if offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::CorruptHeader("chunk offsets not strictly increasing".into()));
    }
    if offsets.last().is_some_and(|&o| o >= n_images) {
        return Err(Error::CorruptHeader(format!(
            "chunk offset beyond image count {n_images}"
        )));
    }
    Ok(())
}

/// Cuts a time-sorted scan stream into chunks that stay within one calendar
/// day and have no gap beyond the cadence tolerance. Chunks spanning less
/// than `min_duration` are discarded.
pub fn split_into_chunks(scans: Vec<ScanGrid>, cfg: &ChunkingConfig) -> Result<Vec<Chunk>> {
    if let Some(i) = scans
        .windows(2)
        .position(|w| w[1].timestamp <= w[0].timestamp)
    {
        return Err(Error::UnsortedScans { index: i + 1 });
    }
    let mut chunks = Vec::new();
    let mut current: Vec<ScanGrid> = Vec::new();
    let mut next_start = 0;
    let mut flush = |current: &mut Vec<ScanGrid>, chunks: &mut Vec<Chunk>| {
        let run = std::mem::take(current);
        if cfg.long_enough(&run) {
            let len = run.len();
            chunks.push(Chunk {
                scans: run,
                start_index: next_start,
            });
            next_start += len;
        }
    };
    for scan in scans {
        if let Some(prev) = current.last() {
            let same_day = cfg.day(prev.timestamp) == cfg.day(scan.timestamp);
            if !same_day || !cfg.is_contiguous(prev.timestamp, scan.timestamp) {
                flush(&mut current, &mut chunks);
            }
        }
        current.push(scan);
    }
    flush(&mut current, &mut chunks);
    Ok(chunks)
}

/// Keeps chunks whose mean pixel value is at least `threshold` dBZ.
pub fn filter_low_signal(chunks: Vec<Chunk>, threshold: f64) -> Vec<Chunk> {
    chunks
        .into_iter()
        .filter(|c| c.mean_value() >= threshold)
        .collect()
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(grid: &ScanGrid, out_h: usize, out_w: usize) -> Result<ScanGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be non-empty, got {out_h}x{out_w}"
        )));
    }
    let (in_h, in_w) = grid.shape();
    if in_h == 0 || in_w == 0 {
        return Err(Error::InvalidArgument("cannot resize an empty grid".into()));
    }
    let rows: Vec<(usize, usize, f64)> = axis_weights(in_h, out_h);
    let cols: Vec<(usize, usize, f64)> = axis_weights(in_w, out_w);
    let mut values = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = grid.get(r0, c0) as f64 * (1.0 - fx) + grid.get(r0, c1) as f64 * fx;
            let bottom = grid.get(r1, c0) as f64 * (1.0 - fx) + grid.get(r1, c1) as f64 * fx;
            values.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    ScanGrid::new(grid.timestamp, out_h, out_w, values)
}

fn axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Splits at `boundary` (seconds since epoch): earlier scans go to the search
/// side, the rest to verification. A chunk straddling the boundary is cut and
/// each piece must again span `min_duration`.
pub fn temporal_split(
    archive: ChunkedArchive,
    boundary: i64,
    min_duration: i64,
) -> (ChunkedArchive, ChunkedArchive) {
    let mut search = Vec::new();
    let mut verif = Vec::new();
    let keep = |scans: &[ScanGrid]| {
        !scans.is_empty() && scans.last().unwrap().timestamp - scans[0].timestamp >= min_duration
    };
    for chunk in archive.chunks {
        let cut = chunk.scans.partition_point(|s| s.timestamp < boundary);
        if cut == 0 {
            verif.push(chunk);
        } else if cut == chunk.scans.len() {
            search.push(chunk);
        } else {
            let mut head = chunk.scans;
            let tail = head.split_off(cut);
            if keep(&head) {
                search.push(Chunk {
                    scans: head,
                    start_index: 0,
                });
            }
            if keep(&tail) {
                verif.push(Chunk {
                    scans: tail,
                    start_index: 0,
                });
            }
        }
    }
    (
        ChunkedArchive::from_chunks(search),
        ChunkedArchive::from_chunks(verif),
    )
}

/// Power-law reflectivity to rain-rate relation `Z = a·R^b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZrRelation {
    pub a: f64,
    pub b: f64,
}

impl Default for ZrRelation {
    /// Marshall–Palmer.
    fn default() -> Self {
        Self { a: 200.0, b: 1.6 }
    }
}

impl ZrRelation {
    /// Rain rate in mm/h. Non-positive reflectivity means no echo and maps to 0.
    pub fn rain_rate(&self, dbz: f64) -> f64 {
        if dbz <= 0.0 {
            return 0.0;
        }
        let z = 10f64.powf(dbz / 10.0);
        (z / self.a).powf(1.0 / self.b)
    }

    /// Reflectivity (dBZ) whose rain rate equals `rate`.
    pub fn dbz_for_rate(&self, rate: f64) -> f64 {
        10.0 * (self.a * rate.powf(self.b)).log10()
    }
}

/// Fraction of pixels whose rain rate exceeds `rate_threshold` mm/h.
pub fn wet_area_ratio(grid: &ScanGrid, zr: &ZrRelation, rate_threshold: f64) -> f64 {
    if grid.is_empty() {
        return 0.0;
    }
    let wet = grid
        .values()
        .iter()
        .filter(|&&v| zr.rain_rate(v as f64) > rate_threshold)
        .count();
    wet as f64 / grid.len() as f64
}

/// Full preprocessing: chunk, drop low-signal chunks, resize.
pub fn prepare(
    scans: Vec<ScanGrid>,
    cfg: &ChunkingConfig,
    signal_threshold: f64,
    resize: Option<(usize, usize)>,
) -> Result<ChunkedArchive> {
    let chunks = filter_low_signal(split_into_chunks(scans, cfg)?, signal_threshold);
    let archive = ChunkedArchive::from_chunks(chunks);
    match resize {
        Some((h, w)) => archive.try_map_scans(|g| resize_bilinear(g, h, w)),
        None => Ok(archive),
    }
}

/// Recovers chunk structure from a flat, already filtered scan list: only
/// contiguity and day boundaries split, nothing is discarded.
pub fn rechunk(scans: Vec<ScanGrid>, cadence: i64) -> Result<ChunkedArchive> {
    let cfg = ChunkingConfig {
        cadence,
        min_duration: 0,
        ..ChunkingConfig::default()
    };
    Ok(ChunkedArchive::from_chunks(split_into_chunks(scans, &cfg)?))
}
