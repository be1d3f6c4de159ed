//! FFT distance profiles (MASS) and aligned top-k extraction.
//!
//! A distance profile holds, for every start offset `i` of a long series,
//! the distance between the query and `series[i..i + q]`. The sliding dot
//! products come from a single FFT convolution, so the cost depends on the
//! series length only, not on `q`.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Which distance the profile reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProfileMode {
    /// Euclidean distance between z-normalized windows.
    #[default]
    ZNormalized,
    /// Plain Euclidean distance.
    Raw,
}

impl std::str::FromStr for ProfileMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "znorm" | "normalized" | "z" => Ok(Self::ZNormalized),
            "raw" | "euclidean" => Ok(Self::Raw),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile mode {other:?} (expected znorm or raw)"
            ))),
        }
    }
}

/// Distances from one query to every same-length window of a series.
/// Masked windows hold `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProfile {
    pub distances: Vec<f64>,
    pub query_len: usize,
    pub mode: ProfileMode,
}

impl DistanceProfile {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn normalized(&self) -> bool {
        self.mode == ProfileMode::ZNormalized
    }
}

/// Relative level below which the FFT identity loses too many digits and a
/// window's distance is recomputed directly.
const NEAR_ZERO: f64 = 1e-9;

fn fft_len(n: usize) -> usize {
    n.next_power_of_two()
}

/// `out[i] = Σ_j query[j] · series[i + j]` for every full window, via one
/// complex FFT carrying both real signals and one inverse FFT.
pub fn sliding_dot_product(query: &[f64], series: &[f64]) -> Result<Vec<f64>> {
    let q = query.len();
    let n = series.len();
    if q == 0 {
        return Err(Error::InvalidArgument("query is empty".into()));
    }
    if q > n {
        return Err(Error::QueryTooLong { query: q, series: n });
    }
    let size = fft_len(n);
    let (forward, inverse) = plans(size);
    Ok(sliding_dot_with(query, series, size, &forward, &inverse))
}

thread_local! {
    // The planner memoizes plans and twiddle tables per size.
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(size: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(size), p.plan_fft_inverse(size))
    })
}

fn sliding_dot_with(
    query: &[f64],
    series: &[f64],
    size: usize,
    forward: &Arc<dyn Fft<f64>>,
    inverse: &Arc<dyn Fft<f64>>,
) -> Vec<f64> {
    let q = query.len();
    let n = series.len();
    // series in the real part, reversed query in the imaginary part
    let mut buf = vec![Complex::new(0.0, 0.0); size];
    for (slot, &x) in buf.iter_mut().zip(series) {
        slot.re = x;
    }
    for (j, &y) in query.iter().rev().enumerate() {
        buf[j].im = y;
    }
    forward.process(&mut buf);

    // Split the packed spectrum into the two real spectra and multiply:
    // A[k] = (Z[k] + conj Z[-k]) / 2,  B[k] = (Z[k] - conj Z[-k]) / 2i.
    let mut product = vec![Complex::new(0.0, 0.0); size];
    for k in 0..size {
        let z = buf[k];
        let zc = buf[(size - k) % size].conj();
        let a = (z + zc) * 0.5;
        let b = (z - zc) * Complex::new(0.0, -0.5);
        product[k] = a * b;
    }
    inverse.process(&mut product);

    let scale = 1.0 / size as f64;
    product[q - 1..n].iter().map(|c| c.re * scale).collect()
}

/// Running sum carried as an unevaluated `hi + lo` pair (Neumaier), so the
/// difference of two prefix sums keeps its precision far from the origin.
#[derive(Clone, Copy, Default)]
struct Compensated {
    hi: f64,
    lo: f64,
}

impl Compensated {
    fn add(self, v: f64) -> Self {
        let hi = self.hi + v;
        let err = if self.hi.abs() >= v.abs() {
            (self.hi - hi) + v
        } else {
            (v - hi) + self.hi
        };
        Self { hi, lo: self.lo + err }
    }

    fn minus(self, other: Self) -> f64 {
        (self.hi - other.hi) + (self.lo - other.lo)
    }
}

/// Sliding window sums over compensated prefix sums.
struct WindowSums {
    sum: Vec<Compensated>,
    sum_sq: Vec<Compensated>,
}

impl WindowSums {
    fn new(values: &[f64]) -> Self {
        let mut sum = Vec::with_capacity(values.len() + 1);
        let mut sum_sq = Vec::with_capacity(values.len() + 1);
        let (mut s, mut s2) = (Compensated::default(), Compensated::default());
        sum.push(s);
        sum_sq.push(s2);
        for &v in values {
            s = s.add(v);
            s2 = s2.add(v * v);
            sum.push(s);
            sum_sq.push(s2);
        }
        Self { sum, sum_sq }
    }

    fn window(&self, start: usize, len: usize) -> (f64, f64) {
        (
            self.sum[start + len].minus(self.sum[start]),
            self.sum_sq[start + len].minus(self.sum_sq[start]),
        )
    }
}

/// Distance profile of `query` against every window of `series`.
///
/// Both inputs are centred on the series mean before the convolution, which
/// leaves either distance unchanged and keeps the subtraction well
/// conditioned. In z-normalized mode windows with (numerically) zero variance
/// are masked with `+inf`.
pub fn distance_profile(query: &[f64], series: &[f64], mode: ProfileMode) -> Result<DistanceProfile> {
    let size = fft_len(series.len().max(1));
    let (forward, inverse) = plans(size);
    profile_with(query, series, mode, size, &forward, &inverse)
}

fn profile_with(
    query: &[f64],
    series: &[f64],
    mode: ProfileMode,
    size: usize,
    forward: &Arc<dyn Fft<f64>>,
    inverse: &Arc<dyn Fft<f64>>,
) -> Result<DistanceProfile> {
    let q = query.len();
    let n = series.len();
    if q == 0 {
        return Err(Error::InvalidArgument("query is empty".into()));
    }
    if q > n {
        return Err(Error::QueryTooLong { query: q, series: n });
    }
    if let Some(index) = query.iter().chain(series).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let qf = q as f64;
    let centre = series.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = series.iter().map(|&x| x - centre).collect();
    let sums = WindowSums::new(&centred);

    let distances = match mode {
        ProfileMode::ZNormalized => {
            if q < 2 {
                return Err(Error::InvalidArgument(
                    "z-normalized profiles need a query of length >= 2".into(),
                ));
            }
            let q_mean = query.iter().sum::<f64>() / qf;
            let q_dev: Vec<f64> = query.iter().map(|&y| y - q_mean).collect();
            let q_var = q_dev.iter().map(|d| d * d).sum::<f64>() / qf;
            let q_scale = query.iter().map(|y| y * y).sum::<f64>() / qf;
            if q_var <= 1e-12 * q_scale || q_var == 0.0 {
                return Err(Error::ZeroVarianceQuery);
            }
            let q_std = q_var.sqrt();
            // Σ (y_j - μ_y)(x_{i+j} - μ_i) equals the plain dot product with the
            // centred query, because the centred query sums to zero.
            let dots = sliding_dot_with(&q_dev, &centred, size, forward, inverse);
            dots.iter()
                .enumerate()
                .map(|(i, &dot)| {
                    let (s, s2) = sums.window(i, q);
                    let mean = s / qf;
                    let mean_sq = s2 / qf;
                    let var = mean_sq - mean * mean;
                    if var <= 1e-12 * mean_sq || var <= 0.0 {
                        return f64::INFINITY;
                    }
                    let std = var.sqrt();
                    let corr = dot / (qf * q_std * std);
                    if 1.0 - corr <= NEAR_ZERO {
                        // cancellation dominates near a match; recompute directly
                        let window = &centred[i..i + q];
                        return q_dev
                            .iter()
                            .zip(window)
                            .map(|(&y, &x)| {
                                let diff = y / q_std - (x - mean) / std;
                                diff * diff
                            })
                            .sum::<f64>()
                            .sqrt();
                    }
                    (2.0 * qf * (1.0 - corr)).max(0.0).sqrt()
                })
                .collect()
        }
        ProfileMode::Raw => {
            let q_centred: Vec<f64> = query.iter().map(|&y| y - centre).collect();
            let q_norm = q_centred.iter().map(|y| y * y).sum::<f64>();
            let dots = sliding_dot_with(&q_centred, &centred, size, forward, inverse);
            dots.iter()
                .enumerate()
                .map(|(i, &dot)| {
                    let (_, s2) = sums.window(i, q);
                    let d2 = q_norm + s2 - 2.0 * dot;
                    if d2 <= NEAR_ZERO * (q_norm + s2) {
                        let window = &centred[i..i + q];
                        return q_centred
                            .iter()
                            .zip(window)
                            .map(|(&y, &x)| (y - x) * (y - x))
                            .sum::<f64>()
                            .sqrt();
                    }
                    d2.sqrt()
                })
                .collect()
        }
    };
    Ok(DistanceProfile {
        distances,
        query_len: q,
        mode,
    })
}

/// Same result as [`distance_profile`], computed over overlapping segments
/// of `segment_length` values in parallel. Consecutive segments overlap by
/// `q - 1` so every start offset is covered exactly once.
pub fn parallel_distance_profile(
    query: &[f64],
    series: &[f64],
    mode: ProfileMode,
    segment_length: usize,
) -> Result<DistanceProfile> {
    let q = query.len();
    if q == 0 {
        return Err(Error::InvalidArgument("query is empty".into()));
    }
    if segment_length < q {
        return Err(Error::InvalidArgument(format!(
            "segment length {segment_length} shorter than query length {q}"
        )));
    }
    if q > series.len() {
        return Err(Error::QueryTooLong {
            query: q,
            series: series.len(),
        });
    }
    let step = segment_length - q + 1;
    let starts: Vec<usize> = (0..=series.len() - q).step_by(step).collect();
    let size = fft_len(segment_length.min(series.len()));
    let (forward, inverse) = plans(size);
    let parts = starts
        .par_iter()
        .map(|&s| {
            let end = (s + segment_length).min(series.len());
            profile_with(query, &series[s..end], mode, size, &forward, &inverse)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut distances = Vec::with_capacity(series.len() - q + 1);
    for part in parts {
        distances.extend(part.distances);
    }
    Ok(DistanceProfile {
        distances,
        query_len: q,
        mode,
    })
}

/// Which profile offsets correspond to whole-image sequences that stay inside
/// one chunk: offset `d·j` is valid when images `[j, j + t)` share a chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMask {
    pub d: usize,
    pub chunk_offsets: Vec<usize>,
    pub n_images: usize,
    pub t: usize,
}

impl AlignmentMask {
    pub fn new(d: usize, chunk_offsets: &[usize], n_images: usize, t: usize) -> Self {
        Self {
            d,
            chunk_offsets: chunk_offsets.to_vec(),
            n_images,
            t,
        }
    }

    /// Image indices that may start a sequence of length `t`.
    pub fn valid_starts(&self) -> impl Iterator<Item = usize> + '_ {
        let t = self.t;
        self.chunk_offsets.iter().enumerate().flat_map(move |(c, &start)| {
            let end = self
                .chunk_offsets
                .get(c + 1)
                .copied()
                .unwrap_or(self.n_images);
            let last = (end + 1).saturating_sub(t);
            start..last.max(start)
        })
    }

    pub fn is_valid_start(&self, image: usize) -> bool {
        if self.t == 0 || image >= self.n_images {
            return false;
        }
        let c = self.chunk_offsets.partition_point(|&o| o <= image);
        if c == 0 {
            return false;
        }
        let end = self.chunk_offsets.get(c).copied().unwrap_or(self.n_images);
        image + self.t <= end
    }

    pub fn is_valid_offset(&self, offset: usize) -> bool {
        offset.is_multiple_of(self.d) && self.is_valid_start(offset / self.d)
    }

    pub fn query_len(&self) -> usize {
        self.d * self.t
    }
}

/// The `k` smallest-distance valid sequence starts, as `(image_index,
/// distance)` ascending by distance, ties to the lower index. With
/// `exclusion > 0` any two returned indices differ by more than `exclusion`.
pub fn top_k_aligned(
    profile: &DistanceProfile,
    mask: &AlignmentMask,
    k: usize,
    exclusion: usize,
) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let expected_q = mask.query_len();
    if profile.query_len != expected_q {
        return Err(Error::shape(
            format!("query length d·t = {expected_q}"),
            format!("profile query length {}", profile.query_len),
        ));
    }
    let series_len = mask.d * mask.n_images;
    if series_len < expected_q || profile.len() != series_len - expected_q + 1 {
        return Err(Error::shape(
            format!("profile over {series_len} values"),
            format!("{} offsets", profile.len()),
        ));
    }
    let by_rank = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    let mut pool: Vec<(usize, f64)> = mask
        .valid_starts()
        .map(|j| (j, profile.distances[j * mask.d]))
        .filter(|(_, dist)| dist.is_finite())
        .collect();

    if exclusion == 0 {
        if pool.len() > k {
            pool.select_nth_unstable_by(k - 1, by_rank);
            pool.truncate(k);
        }
        pool.sort_unstable_by(by_rank);
        return Ok(pool);
    }

    pool.sort_unstable_by(by_rank);
    let mut taken = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    for (j, dist) in pool {
        let lo = j.saturating_sub(exclusion);
        if taken.range(lo..=j + exclusion).next().is_none() {
            taken.insert(j);
            out.push((j, dist));
            if out.len() == k {
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dot(query: &[f64], series: &[f64]) -> Vec<f64> {
        (0..=series.len() - query.len())
            .map(|i| query.iter().enumerate().map(|(j, y)| y * series[i + j]).sum())
            .collect()
    }

    #[test]
    fn picks_elements() {
        let out = sliding_dot_product(&[1.0, 0.0], &[3.0, 4.0, 5.0]).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ones_query_gives_sliding_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let series: Vec<f64> = (0..1000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q = 37;
        let mut prefix = vec![0.0];
        for v in &series {
            prefix.push(prefix.last().unwrap() + v);
        }
        let out = sliding_dot_product(&vec![1.0; q], &series).unwrap();
        for (i, v) in out.iter().enumerate() {
            assert!((v - (prefix[i + q] - prefix[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let series: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let query: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = sliding_dot_product(&query, &series).unwrap();
        let slow = naive_dot(&query, &series);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_long_query() {
        assert!(matches!(
            sliding_dot_product(&[1.0; 4], &[1.0; 3]),
            Err(Error::QueryTooLong { query: 4, series: 3 })
        ));
        assert!(distance_profile(&[1.0; 4], &[1.0; 3], ProfileMode::Raw).is_err());
    }

    #[test]
    fn self_match_is_zero_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..50.0)).collect();
        let query = series[17..37].to_vec();
        for mode in [ProfileMode::ZNormalized, ProfileMode::Raw] {
            let p = distance_profile(&query, &series, mode).unwrap();
            assert_eq!(p.len(), 481);
            assert!(p.distances[17] < 1e-6, "{mode:?}: {}", p.distances[17]);
        }
    }

    #[test]
    fn znorm_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut series: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..10.0)).collect();
        let query: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..10.0)).collect();
        for (j, y) in query.iter().enumerate() {
            series[100 + j] = y + 10.0;
        }
        let p = distance_profile(&query, &series, ProfileMode::ZNormalized).unwrap();
        assert!(p.distances[100] < 1e-6);
        let raw = distance_profile(&query, &series, ProfileMode::Raw).unwrap();
        assert!((raw.distances[100] - 50.0).abs() < 1e-6);
    }

    #[test]
    fn zero_variance_handling() {
        let mut series = vec![3.0; 40];
        for (i, v) in series.iter_mut().enumerate().skip(20) {
            *v = i as f64;
        }
        assert!(matches!(
            distance_profile(&[2.0; 5], &series, ProfileMode::ZNormalized),
            Err(Error::ZeroVarianceQuery)
        ));
        let p = distance_profile(&[1.0, 2.0, 3.0, 4.0, 5.0], &series, ProfileMode::ZNormalized).unwrap();
        assert!(p.distances[..16].iter().all(|d| d.is_infinite()));
        assert!(p.distances[20] < 1e-6);
        assert!(distance_profile(&[1.0], &series, ProfileMode::ZNormalized).is_err());
        assert!(distance_profile(&[1.0], &series, ProfileMode::Raw).is_ok());
    }

    #[test]
    fn parallel_segments_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let series: Vec<f64> = (0..4000).map(|_| rng.random_range(-3.0..3.0)).collect();
        let query: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        for mode in [ProfileMode::ZNormalized, ProfileMode::Raw] {
            let whole = distance_profile(&query, &series, mode).unwrap();
            let one = parallel_distance_profile(&query, &series, mode, series.len()).unwrap();
            assert_eq!(one, whole);
            // four segments, boundaries not aligned to the query width
            for seg in [1015, 1000, 30, 517] {
                let split = parallel_distance_profile(&query, &series, mode, seg).unwrap();
                assert_eq!(split.len(), whole.len());
                for (a, b) in split.distances.iter().zip(&whole.distances) {
                    assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} {b}");
                }
            }
        }
        assert!(parallel_distance_profile(&query, &series, ProfileMode::Raw, 10).is_err());
    }

    #[test]
    fn mask_valid_starts() {
        let mask = AlignmentMask::new(5, &[0, 4, 10], 12, 3);
        let starts: Vec<usize> = mask.valid_starts().collect();
        assert_eq!(starts, vec![0, 1, 4, 5, 6, 7]);
        for j in 0..12 {
            assert_eq!(mask.is_valid_start(j), starts.contains(&j));
        }
        assert!(mask.is_valid_offset(25));
        assert!(!mask.is_valid_offset(26));
    }

    fn profile_of(distances: Vec<f64>, q: usize) -> DistanceProfile {
        DistanceProfile {
            distances,
            query_len: q,
            mode: ProfileMode::Raw,
        }
    }

    #[test]
    fn unique_minimum_first_and_small_pools() {
        let mask = AlignmentMask::new(1, &[0], 10, 2);
        let mut d: Vec<f64> = (0..9).map(|i| 10.0 - i as f64).collect();
        d[4] = 0.0;
        let top = top_k_aligned(&profile_of(d, 2), &mask, 3, 0).unwrap();
        assert_eq!(top[0], (4, 0.0));
        let all = top_k_aligned(&profile_of(vec![1.0; 9], 2), &mask, 50, 0).unwrap();
        assert_eq!(all.iter().map(|p| p.0).collect::<Vec<_>>(), (0..9).collect::<Vec<_>>());
        assert!(top_k_aligned(&profile_of(vec![1.0; 9], 2), &mask, 0, 0).is_err());
        assert!(top_k_aligned(&profile_of(vec![1.0; 8], 2), &mask, 1, 0).is_err());
    }

    #[test]
    fn over_masking_gives_empty() {
        let mask = AlignmentMask::new(1, &[0, 3, 6], 9, 4);
        let top = top_k_aligned(&profile_of(vec![1.0; 6], 4), &mask, 5, 0).unwrap();
        assert!(top.is_empty());
    }

    #[test]
    fn matches_filter_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (d, t) = (5, 3);
        let offsets = [0usize, 23];
        let n_images = 50;
        let q = d * t;
        let len = d * n_images - q + 1;
        let distances: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..100.0)).collect();
        let profile = profile_of(distances.clone(), q);
        let mask = AlignmentMask::new(d, &offsets, n_images, t);
        for k in [1, 7, 40, 500] {
            let mut oracle: Vec<(usize, f64)> = (0..n_images)
                .filter(|&j| {
                    let chunk_end = if j < 23 { 23 } else { 50 };
                    j + t <= chunk_end
                })
                .map(|j| (j, distances[j * d]))
                .collect();
            oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(k);
            assert_eq!(top_k_aligned(&profile, &mask, k, 0).unwrap(), oracle);
        }
    }

    #[test]
    fn exclusion_zone_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask = AlignmentMask::new(1, &[0], 200, 1);
        let p = profile_of((0..200).map(|_| rng.random::<f64>()).collect(), 1);
        let top = top_k_aligned(&p, &mask, 20, 4).unwrap();
        assert_eq!(top.len(), 20);
        for (i, a) in top.iter().enumerate() {
            for b in &top[i + 1..] {
                assert!(a.0.abs_diff(b.0) > 4);
            }
        }
        assert!(top.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn ties_break_to_lower_index() {
        let mask = AlignmentMask::new(1, &[0], 6, 1);
        let top = top_k_aligned(&profile_of(vec![2.0, 1.0, 1.0, 0.5, 1.0, 3.0], 1), &mask, 3, 0).unwrap();
        assert_eq!(top, vec![(3, 0.5), (1, 1.0), (2, 1.0)]);
    }
}
