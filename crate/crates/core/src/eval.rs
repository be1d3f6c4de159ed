//! Ranking-quality evaluation against a brute-force MSE oracle: per-image
//! ground truth, Jaccard and top-k Canberra comparisons of embedding-space
//! rankings (part I) and rank-wise MSE curves of sequence search (part II).

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::sync::{Mutex, OnceLock};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::archive::EmbeddingArchive;
use crate::dataset::ChunkedArchive;
use crate::error::{Error, Result};
use crate::grid::{squared_error, ScanGrid};
use crate::mass::ProfileMode;
use crate::search::{linear_mse_search, QuerySequence, SearchConfig, SearchIndex};

/// Monte Carlo sample count behind the Canberra normalization for n > 8.
pub const CANBERRA_MC_SAMPLES: usize = 100_000;
/// Seed of that Monte Carlo estimate.
pub const CANBERRA_MC_SEED: u64 = 0x00CA_BE22A;
const EXACT_LIMIT: usize = 8;

/// Archive indices ordered best first; ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub items: Vec<usize>,
    pub k_limit: usize,
}

impl RankedList {
    /// Ranks `scores` ascending and keeps the best `depth` indices.
    pub fn from_scores(scores: &[f64], depth: usize) -> Self {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        let order = |a: &usize, b: &usize| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b));
        let depth = depth.min(idx.len());
        if depth > 0 && depth < idx.len() {
            idx.select_nth_unstable_by(depth - 1, order);
            idx.truncate(depth);
        }
        idx.sort_unstable_by(order);
        Self {
            items: idx,
            k_limit: depth,
        }
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.items[..k.min(self.items.len())]
    }
}

fn check_same_shape(search: &ChunkedArchive, verif: &ChunkedArchive) -> Result<()> {
    search.check_uniform_shape()?;
    verif.check_uniform_shape()?;
    match (search.grid_shape(), verif.grid_shape()) {
        (Some(a), Some(b)) if a != b => Err(Error::shape(
            format!("{}x{}", a.0, a.1),
            format!("{}x{}", b.0, b.1),
        )),
        _ => Ok(()),
    }
}

fn image_mse(a: &ScanGrid, b: &ScanGrid) -> f64 {
    squared_error(a.values(), b.values()) / a.len() as f64
}

/// Full per-image MSE matrix, `n_verif × n_search` row-major.
pub fn mse_matrix(search: &ChunkedArchive, verif: &ChunkedArchive) -> Result<Vec<f64>> {
    check_same_shape(search, verif)?;
    let s: Vec<&ScanGrid> = search.scans().collect();
    let v: Vec<&ScanGrid> = verif.scans().collect();
    Ok(v.par_iter()
        .flat_map_iter(|q| s.iter().map(move |x| image_mse(q, x)))
        .collect())
}

/// Per-verification-image MSE rankings of the search archive, kept to a
/// fixed depth so the full matrix never has to be stored.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rankings: Vec<RankedList>,
    pub n_search: usize,
}

/// Ranks the search archive by per-image MSE for every verification image.
pub fn mse_ground_truth(
    search: &ChunkedArchive,
    verif: &ChunkedArchive,
    depth: usize,
) -> Result<GroundTruth> {
    check_same_shape(search, verif)?;
    let s: Vec<&ScanGrid> = search.scans().collect();
    let v: Vec<&ScanGrid> = verif.scans().collect();
    let rankings = v
        .par_iter()
        .map_init(Vec::new, |row, q| {
            row.clear();
            row.extend(s.iter().map(|x| image_mse(q, x)));
            RankedList::from_scores(row, depth)
        })
        .collect();
    Ok(GroundTruth {
        rankings,
        n_search: s.len(),
    })
}

/// `1 − |A∩B| / |A∪B|`; two empty sets count as identical.
pub fn jaccard_distance(a: &[usize], b: &[usize]) -> f64 {
    let a: HashSet<usize> = a.iter().copied().collect();
    let b: HashSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(&b).count() as f64 / union as f64
}

fn canberra_term(r: usize, s: usize) -> f64 {
    (r as f64 - s as f64).abs() / (r + s) as f64
}

/// Top-k Canberra distance between two rankings: every rank beyond `k`,
/// including items missing from a list, is replaced by `k + 1`. Only the
/// first `k` entries of each list matter.
pub fn canberra_topk_distance(a: &[usize], b: &[usize], k: usize) -> f64 {
    let loc = k + 1;
    let ra: HashMap<usize, usize> = a.iter().take(k).enumerate().map(|(i, &x)| (x, i + 1)).collect();
    let mut total = 0.0;
    for (i, &x) in b.iter().take(k).enumerate() {
        total += canberra_term(ra.get(&x).copied().unwrap_or(loc), i + 1);
    }
    let in_b: HashSet<usize> = b.iter().take(k).copied().collect();
    for (&x, &r) in &ra {
        if !in_b.contains(&x) {
            total += canberra_term(r, loc);
        }
    }
    total
}

/// Expected top-k Canberra distance between two uniformly random
/// permutations of `n` items.
pub struct CanberraExpectation;

impl CanberraExpectation {
    /// Average over all `n!` permutations against the identity.
    pub fn exact(n: usize, k: usize) -> f64 {
        assert!(n <= 10, "exact enumeration is limited to small n");
        let identity: Vec<usize> = (0..n).collect();
        let mut perm = identity.clone();
        let mut total = 0.0;
        let mut count = 0usize;
        // Heap's algorithm, iterative form.
        let mut c = vec![0usize; n];
        total += canberra_topk_distance(&identity, &perm, k);
        count += 1;
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                total += canberra_topk_distance(&identity, &perm, k);
                count += 1;
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        total / count as f64
    }

    /// Seeded Monte Carlo estimate over `samples` random permutations.
    pub fn monte_carlo(n: usize, k: usize, samples: usize, seed: u64) -> f64 {
        let k = k.min(n);
        let loc = k + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = vec![false; k];
        let mut total = 0.0;
        for _ in 0..samples {
            // Only the top k of the random list can differ from the locator.
            let top = index::sample(&mut rng, n, k);
            seen.iter_mut().for_each(|s| *s = false);
            for (p, x) in top.iter().enumerate() {
                let r_identity = if x < k {
                    seen[x] = true;
                    x + 1
                } else {
                    loc
                };
                total += canberra_term(p + 1, r_identity);
            }
            for (x, &s) in seen.iter().enumerate() {
                if !s {
                    total += canberra_term(x + 1, loc);
                }
            }
        }
        total / samples as f64
    }

    /// Exact for `n ≤ 8`, seeded Monte Carlo otherwise; memoized.
    pub fn get(n: usize, k: usize) -> f64 {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), f64>>> = OnceLock::new();
        let k = k.min(n);
        let cache = CACHE.get_or_init(Default::default);
        if let Some(&v) = cache.lock().unwrap().get(&(n, k)) {
            return v;
        }
        let v = if n <= EXACT_LIMIT {
            Self::exact(n, k)
        } else {
            Self::monte_carlo(n, k, CANBERRA_MC_SAMPLES, CANBERRA_MC_SEED)
        };
        cache.lock().unwrap().insert((n, k), v);
        v
    }
}

/// Top-k Canberra stability indicator of a set of complete rankings over one
/// item universe: mean pairwise distance over the random-permutation
/// expectation. Near 0 for stable sets, near 1 for random ones.
pub fn canberra_stability(lists: &[RankedList], k: usize) -> Result<f64> {
    if lists.len() < 2 {
        return Err(Error::InvalidArgument("need at least two lists".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("locator k must be at least 1".into()));
    }
    let universe: HashSet<usize> = lists[0].items.iter().copied().collect();
    if universe.len() != lists[0].items.len() {
        return Err(Error::InvalidArgument("ranked list contains duplicates".into()));
    }
    for l in &lists[1..] {
        if l.items.len() != universe.len() || !l.items.iter().all(|x| universe.contains(x)) {
            return Err(Error::MismatchedUniverse);
        }
    }
    let n = universe.len();
    let expected = CanberraExpectation::get(n, k);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..lists.len() {
        for j in i + 1..lists.len() {
            total += canberra_topk_distance(&lists[i].items, &lists[j].items, k);
            pairs += 1;
        }
    }
    let mean = total / pairs as f64;
    Ok(if expected > 0.0 { mean / expected } else { 0.0 })
}

/// Search-side and verification-side embeddings produced by one model.
#[derive(Debug, Clone)]
pub struct ModelEmbeddings {
    pub label: String,
    pub search: EmbeddingArchive,
    pub verif: EmbeddingArchive,
}

impl ModelEmbeddings {
    pub fn new(search: EmbeddingArchive, verif: EmbeddingArchive) -> Result<Self> {
        if search.d() != verif.d() {
            return Err(Error::shape(
                format!("verification d = {}", search.d()),
                format!("d = {}", verif.d()),
            ));
        }
        Ok(Self {
            label: search.provenance().label(),
            search,
            verif,
        })
    }

    pub fn d(&self) -> usize {
        self.search.d()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Population mean and standard deviation, summed in input order.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    /// Mean plus one standard deviation.
    pub fn suboptimal(&self) -> f64 {
        self.mean + self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalCell {
    pub model: String,
    pub method: String,
    pub d: usize,
    pub n: Option<u64>,
    pub k: usize,
    pub jaccard_mean: f64,
    pub jaccard_std: f64,
    pub jaccard_suboptimal: f64,
    pub canberra_mean: f64,
    pub canberra_std: f64,
    pub canberra_suboptimal: f64,
    pub intersection_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for c in &self.cells {
            out.serialize(c)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn cell(&self, model: &str, k: usize) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.model == model && c.k == k)
    }
}

fn embedding_ranking(search: &[f32], d: usize, query: &[f32], depth: usize, buf: &mut Vec<f64>) -> RankedList {
    buf.clear();
    buf.extend(search.chunks_exact(d).map(|x| {
        x.iter()
            .zip(query)
            .map(|(&a, &b)| {
                let diff = a as f64 - b as f64;
                diff * diff
            })
            .sum::<f64>()
    }));
    RankedList::from_scores(buf, depth)
}

/// Part I: for each model and limit `k`, compares the embedding-space top-k
/// of every verification image with its MSE top-k.
pub fn part1_grid_eval(
    models: &[ModelEmbeddings],
    truth: &GroundTruth,
    limits: &[usize],
) -> Result<EvalReport> {
    let max_k = limits.iter().copied().max().unwrap_or(0);
    if limits.contains(&0) {
        return Err(Error::InvalidArgument("limits must be positive".into()));
    }
    let mut report = EvalReport::default();
    for m in models {
        if m.search.n_images() != truth.n_search || m.verif.n_images() != truth.rankings.len() {
            return Err(Error::shape(
                format!("{} search / {} verification images", truth.n_search, truth.rankings.len()),
                format!("{} / {} in model {}", m.search.n_images(), m.verif.n_images(), m.label),
            ));
        }
        if truth.rankings.iter().any(|r| r.items.len() < max_k.min(truth.n_search)) {
            return Err(Error::InvalidArgument(format!(
                "ground truth depth is below the largest limit {max_k}"
            )));
        }
        let d = m.d();
        let n_s = truth.n_search;
        // per query, per limit: (jaccard, canberra, intersection)
        let per_query: Vec<Vec<(f64, f64, f64)>> = (0..truth.rankings.len())
            .into_par_iter()
            .map_init(Vec::new, |buf, v| {
                let emb = embedding_ranking(m.search.flat(), d, m.verif.image(v), max_k, buf);
                limits
                    .iter()
                    .map(|&k| {
                        let a = emb.top(k);
                        let b = truth.rankings[v].top(k);
                        let inter = a.iter().filter(|x| b.contains(x)).count();
                        let can = canberra_topk_distance(b, a, k) / CanberraExpectation::get(n_s, k);
                        (jaccard_distance(a, b), can, inter as f64)
                    })
                    .collect()
            })
            .collect();
        for (li, &k) in limits.iter().enumerate() {
            let col = |f: fn(&(f64, f64, f64)) -> f64| -> Vec<f64> {
                per_query.iter().map(|q| f(&q[li])).collect()
            };
            let jac = Summary::of(&col(|x| x.0));
            let can = Summary::of(&col(|x| x.1));
            let inter = Summary::of(&col(|x| x.2));
            let prov = m.search.provenance();
            report.cells.push(EvalCell {
                model: m.label.clone(),
                method: prov.method().to_string(),
                d,
                n: prov.get_u64("n"),
                k,
                jaccard_mean: jac.mean,
                jaccard_std: jac.std,
                jaccard_suboptimal: jac.suboptimal(),
                canberra_mean: can.mean,
                canberra_std: can.std,
                canberra_suboptimal: can.suboptimal(),
                intersection_mean: inter.mean,
            });
        }
    }
    Ok(report)
}

/// Query starts in the verification archive: from its first image, each
/// sequence of `t_max` scans stays inside one chunk and the next start
/// leaves `gap` images after the previous sequence when the chunk allows,
/// otherwise it moves to the next chunk.
pub fn select_queries(verif: &ChunkedArchive, t_max: usize, gap: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = Vec::new();
    for chunk in verif.chunks() {
        let end = chunk.start_index + chunk.len();
        let mut s = match starts.last() {
            Some(&prev) => (prev + t_max + gap).max(chunk.start_index),
            None => chunk.start_index,
        };
        while s + t_max <= end {
            starts.push(s);
            s += t_max + gap;
        }
    }
    starts
}

/// Label of the brute-force curve in part II output.
pub const LINEAR_MODEL: &str = "linear-mse";

#[derive(Debug, Clone, PartialEq)]
pub struct Part2Config {
    /// Sequence lengths `T`.
    pub lengths: Vec<usize>,
    pub k: usize,
    pub a: usize,
    /// Images left between consecutive query sequences.
    pub gap: usize,
    pub mode: ProfileMode,
}

impl Default for Part2Config {
    fn default() -> Self {
        Self {
            lengths: vec![3, 6, 12, 24],
            k: 500,
            a: 20,
            gap: 100,
            mode: ProfileMode::ZNormalized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub model: String,
    pub t: usize,
    pub rank: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Part2Report {
    pub query_starts: Vec<usize>,
    /// Queries dropped because some model embeds them with zero variance.
    pub skipped: Vec<usize>,
    pub curves: Vec<CurvePoint>,
}

impl Part2Report {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.curves {
            out.serialize(p)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn curve(&self, model: &str, t: usize) -> Vec<&CurvePoint> {
        self.curves.iter().filter(|p| p.model == model && p.t == t).collect()
    }
}

fn flat_variance(v: &[f32]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n
}

fn rank_curves(model: &str, t: usize, a: usize, per_query: &[Vec<f64>]) -> Vec<CurvePoint> {
    (0..a)
        .map(|r| {
            let vals: Vec<f64> = per_query.iter().filter_map(|q| q.get(r).copied()).collect();
            let s = Summary::of(&vals);
            CurvePoint {
                model: model.to_string(),
                t,
                rank: r + 1,
                mean_mse: s.mean,
                std_mse: s.std,
                count: vals.len(),
            }
        })
        .filter(|p| p.count > 0)
        .collect()
}

/// Part II: rank-wise mean MSE of the analogs returned for verification
/// queries, per model and sequence length, plus the brute-force curve.
pub fn part2_sequence_eval(
    models: &[ModelEmbeddings],
    search_images: &ChunkedArchive,
    verif_images: &ChunkedArchive,
    cfg: &Part2Config,
) -> Result<Part2Report> {
    let Part2Config { ref lengths, k, a, gap, mode } = *cfg;
    let t_max = lengths.iter().copied().max().ok_or_else(|| {
        Error::InvalidArgument("at least one sequence length is required".into())
    })?;
    check_same_shape(search_images, verif_images)?;
    let candidates = select_queries(verif_images, t_max, gap);
    if candidates.is_empty() {
        return Err(Error::ArchiveTooSmall(format!(
            "no verification chunk holds a sequence of {t_max} images"
        )));
    }
    let indexes: Vec<SearchIndex> = models
        .iter()
        .map(|m| {
            if m.verif.n_images() != verif_images.len()
                || m.verif.chunk_offsets() != verif_images.chunk_offsets()
            {
                return Err(Error::shape(
                    "verification embeddings aligned with verification images",
                    format!("model {} differs", m.label),
                ));
            }
            SearchIndex::new(&m.search, search_images)
        })
        .collect::<Result<_>>()?;

    let (mut query_starts, mut skipped) = (Vec::new(), Vec::new());
    for &s in &candidates {
        let blank = mode == ProfileMode::ZNormalized
            && lengths.iter().any(|&t| {
                models.iter().any(|m| flat_variance(m.verif.window(s, t)) == 0.0)
            });
        if blank {
            skipped.push(s);
        } else {
            query_starts.push(s);
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} queries skipped for zero embedding variance", skipped.len());
    }

    let mut curves = Vec::new();
    for &t in lengths {
        let queries: Vec<QuerySequence> = query_starts
            .iter()
            .map(|&s| QuerySequence::from_archive(verif_images, s, t).expect("query fits its chunk"))
            .collect();
        let search_cfg = SearchConfig::new(k, a, t).with_mode(mode);
        for (m, index) in models.iter().zip(&indexes) {
            let per_query = query_starts
                .par_iter()
                .zip(&queries)
                .map(|(&s, q)| {
                    let qv: Vec<f64> = m.verif.window(s, t).iter().map(|&x| x as f64).collect();
                    let out = index.search(&qv, q, &search_cfg)?;
                    Ok(out.matches.iter().map(|x| x.mse).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            curves.extend(rank_curves(&m.label, t, a, &per_query));
        }
        let per_query = queries
            .par_iter()
            .map(|q| Ok(linear_mse_search(search_images, q, a)?.iter().map(|x| x.mse).collect()))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        curves.extend(rank_curves(LINEAR_MODEL, t, a, &per_query));
    }
    Ok(Part2Report {
        query_starts,
        skipped,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Chunk;
    use crate::reduction::{embed_archive, IdentityEmbedder};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_archive(rng: &mut ChaCha8Rng, lens: &[usize], h: usize, w: usize, day0: i64) -> ChunkedArchive {
        let chunks = lens
            .iter()
            .enumerate()
            .map(|(c, &n)| Chunk {
                scans: (0..n)
                    .map(|i| {
                        let v = (0..h * w).map(|_| rng.random_range(0.0..50.0)).collect();
                        ScanGrid::new((day0 + c as i64) * 86_400 + 300 * i as i64, h, w, v).unwrap()
                    })
                    .collect(),
                start_index: 0,
            })
            .collect();
        ChunkedArchive::from_chunks(chunks)
    }

    #[test]
    fn mse_matrix_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_archive(&mut rng, &[120, 80], 3, 4, 0);
        let v = random_archive(&mut rng, &[100], 3, 4, 10);
        let m = mse_matrix(&s, &v).unwrap();
        assert_eq!(m.len(), 200 * 100);
        for (i, q) in v.scans().enumerate() {
            for (j, x) in s.scans().enumerate() {
                let mut acc = 0.0;
                for r in 0..3 {
                    for c in 0..4 {
                        acc += (q.get(r, c) as f64 - x.get(r, c) as f64).powi(2);
                    }
                }
                assert!((m[i * 200 + j] - acc / 12.0).abs() < 1e-10);
            }
        }
        let gt = mse_ground_truth(&s, &v, 200).unwrap();
        for (i, r) in gt.rankings.iter().enumerate() {
            let row = &m[i * 200..(i + 1) * 200];
            assert!(r.items.windows(2).all(|w| row[w[0]] <= row[w[1]]));
        }
    }

    #[test]
    fn ground_truth_orders() {
        let base = ScanGrid::filled(0, 2, 2, 10.0);
        let arch = ChunkedArchive::from_chunks(vec![Chunk {
            scans: vec![base.shifted(3.0).with_timestamp(0), base.shifted(1.0).with_timestamp(300), base.shifted(2.0).with_timestamp(600), base.clone().with_timestamp(900)],
            start_index: 0,
        }]);
        let q = ChunkedArchive::from_chunks(vec![Chunk { scans: vec![base], start_index: 0 }]);
        let gt = mse_ground_truth(&arch, &q, 4).unwrap();
        assert_eq!(gt.rankings[0].items, vec![3, 1, 2, 0]);
        let wrong = ChunkedArchive::from_chunks(vec![Chunk { scans: vec![ScanGrid::filled(0, 3, 2, 1.0)], start_index: 0 }]);
        assert!(mse_ground_truth(&arch, &wrong, 4).is_err());
    }

    #[test]
    fn ranked_list_ties_by_index() {
        let l = RankedList::from_scores(&[1.0, 0.5, 1.0, 0.5, 2.0], 4);
        assert_eq!(l.items, vec![1, 3, 0, 2]);
        assert_eq!(l.top(2), &[1, 3]);
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard_distance(&[1, 2, 3], &[3, 2, 1]), 0.0);
        assert_eq!(jaccard_distance(&[1, 2], &[3, 4]), 1.0);
        assert_eq!(jaccard_distance(&[1, 2, 3], &[2, 3, 4]), 0.5);
        assert_eq!(jaccard_distance(&[], &[]), 0.0);
        assert_eq!(jaccard_distance(&[], &[1]), 1.0);
    }

    // Brute-force top-k Canberra over an explicit full rank vector.
    fn canberra_oracle(a: &[usize], b: &[usize], k: usize, n: usize) -> f64 {
        let rank = |l: &[usize], x: usize| l.iter().position(|&y| y == x).map_or(k + 1, |p| (p + 1).min(k + 1));
        (0..n).map(|x| {
            let (r, s) = (rank(a, x) as f64, rank(b, x) as f64);
            (r - s).abs() / (r + s)
        }).sum()
    }

    #[test]
    fn canberra_distance_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let k = rng.random_range(1..=n);
            let mut a: Vec<usize> = (0..n).collect();
            let mut b = a.clone();
            a.shuffle(&mut rng);
            b.shuffle(&mut rng);
            let got = canberra_topk_distance(&a, &b, k);
            assert!((got - canberra_oracle(&a, &b, k, n)).abs() < 1e-12);
            assert!((got - canberra_topk_distance(&b, &a, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn canberra_locator_ignores_tail() {
        let a = vec![4, 2, 0, 1, 3, 5];
        let b = vec![4, 2, 0, 5, 3, 1];
        assert_eq!(canberra_topk_distance(&a, &b, 3), 0.0);
        let lists = [RankedList { items: a, k_limit: 3 }, RankedList { items: b, k_limit: 3 }];
        assert_eq!(canberra_stability(&lists, 3).unwrap(), 0.0);
    }

    #[test]
    fn exact_expectation_matches_s4_enumeration() {
        // every ordered pair of S4 permutations
        let mut perms = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let p = vec![a, b, c, d];
                        let mut s = p.clone();
                        s.sort();
                        s.dedup();
                        if s.len() == 4 {
                            perms.push(p);
                        }
                    }
                }
            }
        }
        assert_eq!(perms.len(), 24);
        for k in 1..=4 {
            let mut total = 0.0;
            for p in &perms {
                for q in &perms {
                    total += canberra_oracle(p, q, k, 4);
                }
            }
            let brute = total / (24.0 * 24.0);
            assert!((CanberraExpectation::exact(4, k) - brute).abs() < 1e-12);
        }
    }

    // By linearity each item's ranks are independent uniforms on 1..=n.
    fn marginal_expectation(n: usize, k: usize) -> f64 {
        let loc = k + 1;
        let p = |r: usize| if r <= k { 1.0 / n as f64 } else { (n - k) as f64 / n as f64 };
        let mut e = 0.0;
        for r in 1..=loc {
            for s in 1..=loc {
                e += p(r) * p(s) * canberra_term(r, s);
            }
        }
        n as f64 * e
    }

    #[test]
    fn monte_carlo_agrees() {
        for (n, k) in [(4, 4), (6, 2), (8, 5)] {
            let exact = CanberraExpectation::exact(n, k);
            assert!((exact - marginal_expectation(n, k)).abs() < 1e-9);
            let mc = CanberraExpectation::monte_carlo(n, k, 20_000, 9);
            assert!((mc - exact).abs() < 0.02, "{n} {k}: {mc} vs {exact}");
        }
        for (n, k) in [(100, 100), (1000, 20), (5000, 200)] {
            let mc = CanberraExpectation::monte_carlo(n, k, 20_000, 9);
            let e = marginal_expectation(n, k);
            assert!((mc - e).abs() / e < 0.01, "{n} {k}: {mc} vs {e}");
        }
    }

    #[test]
    fn stability_errors() {
        let l = |v: Vec<usize>| RankedList { k_limit: 2, items: v };
        assert!(canberra_stability(&[l(vec![0, 1])], 2).is_err());
        assert!(matches!(
            canberra_stability(&[l(vec![0, 1]), l(vec![0, 2])], 2),
            Err(Error::MismatchedUniverse)
        ));
        assert!(canberra_stability(&[l(vec![0, 1]), l(vec![1, 0])], 0).is_err());
    }

    #[test]
    fn query_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_archive(&mut rng, &[30, 10, 300], 1, 1, 0);
        // chunk 0: [0,30), chunk 1: [30,40), chunk 2: [40,340)
        assert_eq!(select_queries(&v, 24, 100), vec![0, 124, 248]);
        assert_eq!(select_queries(&v, 3, 5), {
            let mut e: Vec<usize> = (0..=27).step_by(8).collect();
            e.extend((32..=37).step_by(8));
            let last = *e.last().unwrap() + 8;
            e.extend((last.max(40)..=337).step_by(8));
            e
        });
    }

    #[test]
    fn identity_models_have_zero_part1_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_archive(&mut rng, &[60, 60], 3, 3, 0);
        let v = random_archive(&mut rng, &[40], 3, 3, 10);
        let e = IdentityEmbedder::new(3, 3);
        let m = ModelEmbeddings::new(embed_archive(&e, &s).unwrap(), embed_archive(&e, &v).unwrap()).unwrap();
        let gt = mse_ground_truth(&s, &v, 50).unwrap();
        let rep = part1_grid_eval(&[m], &gt, &[5, 20, 50]).unwrap();
        assert_eq!(rep.cells.len(), 3);
        for c in &rep.cells {
            assert_eq!(c.jaccard_mean, 0.0);
            assert_eq!(c.canberra_mean, 0.0);
            assert_eq!(c.intersection_mean, c.k as f64);
        }
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("model,method,d,n,k,jaccard_mean"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn part2_identity_matches_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_archive(&mut rng, &[80, 90], 2, 2, 0);
        let v = random_archive(&mut rng, &[60, 60], 2, 2, 10);
        let e = IdentityEmbedder::new(2, 2);
        let m = ModelEmbeddings::new(embed_archive(&e, &s).unwrap(), embed_archive(&e, &v).unwrap()).unwrap();
        let cfg = Part2Config {
            lengths: vec![3, 6],
            k: 150,
            a: 5,
            gap: 10,
            mode: ProfileMode::Raw,
        };
        let rep = part2_sequence_eval(std::slice::from_ref(&m), &s, &v, &cfg).unwrap();
        assert!(!rep.query_starts.is_empty());
        for t in [3, 6] {
            let ours = rep.curve(&m.label, t);
            let lin = rep.curve(LINEAR_MODEL, t);
            assert_eq!(ours.len(), 5);
            for (a, b) in ours.iter().zip(&lin) {
                assert!((a.mean_mse - b.mean_mse).abs() < 1e-9);
            }
            assert!(ours.windows(2).all(|w| w[0].mean_mse <= w[1].mean_mse));
        }
    }
}
