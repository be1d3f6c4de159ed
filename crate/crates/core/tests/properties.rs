use analog::archive::EmbeddingArchive;
use analog::dataset::{split_into_chunks, Chunk, ChunkedArchive, ChunkingConfig};
use analog::eval::{canberra_topk_distance, jaccard_distance};
use analog::grid::{MAX_DBZ, MIN_DBZ};
use analog::mass::{distance_profile, parallel_distance_profile, top_k_aligned, AlignmentMask};
use analog::reduction::{embed_archive, IdentityEmbedder};
use analog::search::{embed_query, SearchIndex};
use analog::{ProfileMode, Provenance, QuerySequence, ScanGrid, SearchConfig};
use proptest::prelude::*;

fn naive_profile(q: &[f64], s: &[f64], mode: ProfileMode) -> Vec<f64> {
    let m = q.len();
    let znorm = |w: &[f64]| -> Vec<f64> {
        let mean = w.iter().sum::<f64>() / m as f64;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
        w.iter().map(|x| (x - mean) / sd).collect()
    };
    s.windows(m)
        .map(|w| {
            let (a, b) = match mode {
                ProfileMode::Raw => (q.to_vec(), w.to_vec()),
                ProfileMode::ZNormalized => (znorm(q), znorm(w)),
            };
            a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

fn mode() -> impl Strategy<Value = ProfileMode> {
    prop_oneof![Just(ProfileMode::Raw), Just(ProfileMode::ZNormalized)]
}

fn series_and_query() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..24).prop_flat_map(|m| {
        (
            prop::collection::vec(-50.0f64..50.0, m..200),
            prop::collection::vec(-50.0f64..50.0, m),
        )
    })
}

/// Random archive of 4x4 grids cut into chunks of the given lengths.
fn archive(chunk_lens: &[usize], values: &[f32]) -> ChunkedArchive {
    let mut k = 0;
    let mut day = 0;
    let chunks = chunk_lens
        .iter()
        .map(|&n| {
            day += 86_400;
            let scans = (0..n)
                .map(|i| {
                    let v = (0..16)
                        .map(|_| {
                            k += 1;
                            values[k % values.len()] + (k % 7) as f32
                        })
                        .collect();
                    ScanGrid::new(day + 300 * i as i64, 4, 4, v).unwrap()
                })
                .collect();
            Chunk { scans, start_index: 0 }
        })
        .collect();
    ChunkedArchive::from_chunks(chunks)
}

fn archive_strategy() -> impl Strategy<Value = ChunkedArchive> {
    (
        prop::collection::vec(1usize..30, 1..5),
        prop::collection::vec(0.0f32..45.0, 37..64),
    )
        .prop_map(|(lens, values)| archive(&lens, &values))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn profile_matches_direct_computation((s, q) in series_and_query(), mode in mode()) {
        let fast = distance_profile(&q, &s, mode).unwrap();
        let slow = naive_profile(&q, &s, mode);
        prop_assert_eq!(fast.len(), s.len() - q.len() + 1);
        let scale = (q.len() as f64).sqrt() * 100.0;
        for (a, b) in fast.distances.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-6 * scale, "{} vs {}", a, b);
        }
    }

    #[test]
    fn znorm_profile_ignores_affine_query_changes(
        (s, q) in series_and_query(),
        gain in 0.1f64..20.0,
        bias in -100.0f64..100.0,
    ) {
        let base = distance_profile(&q, &s, ProfileMode::ZNormalized).unwrap();
        let moved: Vec<f64> = q.iter().map(|x| gain * x + bias).collect();
        let other = distance_profile(&moved, &s, ProfileMode::ZNormalized).unwrap();
        for (a, b) in base.distances.iter().zip(&other.distances) {
            prop_assert!((a - b).abs() <= 1e-6 * (q.len() as f64).sqrt());
        }
    }

    #[test]
    fn segmented_profile_equals_whole((s, q) in series_and_query(), extra in 0usize..64, mode in mode()) {
        let whole = distance_profile(&q, &s, mode).unwrap();
        let parts = parallel_distance_profile(&q, &s, mode, q.len() + extra).unwrap();
        prop_assert_eq!(whole.len(), parts.len());
        for (a, b) in whole.distances.iter().zip(&parts.distances) {
            prop_assert!((a - b).abs() <= 1e-6 * (q.len() as f64).sqrt() * 100.0);
        }
    }

    #[test]
    fn top_k_returns_valid_sorted_starts(
        lens in prop::collection::vec(1usize..20, 1..6),
        d in 1usize..4,
        t in 1usize..6,
        k in 1usize..40,
        seed in any::<u64>(),
    ) {
        let n: usize = lens.iter().sum();
        let offsets: Vec<usize> = lens.iter().scan(0, |acc, &l| { let o = *acc; *acc += l; Some(o) }).collect();
        prop_assume!(n * d >= d * t);
        let series: Vec<f64> = (0..n * d).map(|i| ((i as u64 ^ seed).wrapping_mul(2654435761) % 1000) as f64).collect();
        let query: Vec<f64> = series[..d * t].iter().map(|x| x * 0.5 + 3.0).collect();
        let profile = distance_profile(&query, &series, ProfileMode::Raw).unwrap();
        let mask = AlignmentMask::new(d, &offsets, n, t);
        let top = top_k_aligned(&profile, &mask, k, 0).unwrap();
        let valid = mask.valid_starts().count();
        prop_assert_eq!(top.len(), k.min(valid));
        for &(j, _) in &top {
            prop_assert!(mask.is_valid_offset(j * d));
            let c = offsets.partition_point(|&o| o <= j) - 1;
            let end = offsets.get(c + 1).copied().unwrap_or(n);
            prop_assert!(j + t <= end);
        }
        prop_assert!(top.windows(2).all(|w| w[0].1 <= w[1].1));
        let mut idx: Vec<usize> = top.iter().map(|p| p.0).collect();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), top.len());
    }

    #[test]
    fn grid_values_are_clamped(values in prop::collection::vec(prop::num::f32::ANY, 12)) {
        let built = ScanGrid::new(0, 3, 4, values.clone());
        if values.iter().any(|v| v.is_nan()) {
            prop_assert!(built.is_err());
        } else {
            let g = built.unwrap();
            for (v, orig) in g.values().iter().zip(&values) {
                prop_assert!((MIN_DBZ..=MAX_DBZ).contains(v));
                if (MIN_DBZ..=MAX_DBZ).contains(orig) {
                    prop_assert_eq!(v, orig);
                }
            }
        }
    }

    #[test]
    fn chunks_are_contiguous_single_day_runs(
        gaps in prop::collection::vec(prop_oneof![8 => Just(300i64), 1 => 301i64..20_000], 1..400),
        min_duration in 0i64..3000,
        tz in -7200i64..7200,
    ) {
        let cfg = ChunkingConfig { min_duration, tz_offset: tz, ..ChunkingConfig::default() };
        let mut ts = 1_546_300_800i64;
        let scans: Vec<ScanGrid> = gaps.iter().map(|g| { ts += g; ScanGrid::filled(ts, 1, 1, 5.0) }).collect();
        let chunks = split_into_chunks(scans, &cfg).unwrap();
        let mut next = 0;
        for c in &chunks {
            prop_assert_eq!(c.start_index, next);
            next += c.len();
            let first = c.scans[0].timestamp;
            let last = c.scans[c.len() - 1].timestamp;
            prop_assert!(last - first >= min_duration);
            prop_assert_eq!((first + tz).div_euclid(86_400), (last + tz).div_euclid(86_400));
            for w in c.scans.windows(2) {
                prop_assert!(((w[1].timestamp - w[0].timestamp) as f64 - 300.0).abs() <= 30.0);
            }
        }
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(
        a in prop::collection::hash_set(0usize..50, 0..20),
        b in prop::collection::hash_set(0usize..50, 0..20),
    ) {
        let a: Vec<usize> = a.into_iter().collect();
        let b: Vec<usize> = b.into_iter().collect();
        let d = jaccard_distance(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, jaccard_distance(&b, &a));
        prop_assert_eq!(jaccard_distance(&a, &a), 0.0);
    }

    #[test]
    fn canberra_ignores_labels_and_ranks_past_k(
        (a, b) in (1usize..30).prop_flat_map(|n| {
            let perm = Just((0..n).collect::<Vec<_>>()).prop_shuffle();
            (perm.clone(), perm)
        }),
        k in 1usize..30,
        shift in 1usize..1000,
    ) {
        let d = canberra_topk_distance(&a, &b, k);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(canberra_topk_distance(&a, &a, k), 0.0);
        prop_assert!((d - canberra_topk_distance(&b, &a, k)).abs() < 1e-12);
        let relabel = |v: &[usize]| v.iter().map(|x| x * 7 + shift).collect::<Vec<_>>();
        prop_assert!((d - canberra_topk_distance(&relabel(&a), &relabel(&b), k)).abs() < 1e-12);
        let cut = k.min(a.len());
        prop_assert!((d - canberra_topk_distance(&a[..cut], &b[..cut], k)).abs() < 1e-12);
    }

    #[test]
    fn embedding_archive_round_trips(
        d in 1usize..6,
        lens in prop::collection::vec(1usize..10, 1..5),
        seed in any::<u32>(),
    ) {
        let n: usize = lens.iter().sum();
        let offsets: Vec<usize> = lens.iter().scan(0, |acc, &l| { let o = *acc; *acc += l; Some(o) }).collect();
        let flat: Vec<f32> = (0..n * d).map(|i| ((i as u32).wrapping_mul(seed | 1) % 10_007) as f32 / 13.0 - 300.0).collect();
        let prov = Provenance::new("test", d).with("seed", seed);
        let a = EmbeddingArchive::new(d, flat, offsets, prov).unwrap();
        let mut bytes = Vec::new();
        a.write(&mut bytes).unwrap();
        let b = EmbeddingArchive::read(&bytes[..]).unwrap();
        prop_assert_eq!(&a, &b);
        let mut again = Vec::new();
        b.write(&mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn search_results_are_consistent(
        arch in archive_strategy(),
        t in 1usize..5,
        k in 1usize..30,
        a in 1usize..10,
        pick in any::<prop::sample::Index>(),
        mode in mode(),
    ) {
        prop_assume!(a <= k);
        let e = IdentityEmbedder::new(4, 4);
        let emb = embed_archive(&e, &arch).unwrap();
        let index = SearchIndex::new(&emb, &arch).unwrap();
        let starts: Vec<usize> = index.mask(t).valid_starts().collect();
        prop_assume!(!starts.is_empty());
        let start = starts[pick.index(starts.len())];
        let q = QuerySequence::from_archive(&arch, start, t).unwrap();
        let cfg = SearchConfig::new(k, a, t).with_mode(mode);
        let qv = embed_query(&e, &q).unwrap();

        let cands = index.candidates(&qv, &cfg).unwrap();
        let out = index.search(&qv, &q, &cfg).unwrap();
        prop_assert_eq!(out.matches.len(), a.min(cands.len()));
        for (i, m) in out.matches.iter().enumerate() {
            prop_assert_eq!(m.rank, i + 1);
            prop_assert!(cands.iter().any(|c| c.0 == m.image_index));
        }
        prop_assert!(out.matches.windows(2).all(|w| w[0].mse <= w[1].mse));

        // the query itself is an exact match and is always a candidate
        prop_assert_eq!(out.matches[0].mse, 0.0);

        let wider = SearchConfig { k: k + 10, ..cfg };
        let more = index.search(&qv, &q, &wider).unwrap();
        prop_assert!(more.matches[0].mse <= out.matches[0].mse);
        for (x, y) in more.matches.iter().zip(&out.matches) {
            prop_assert!(x.mse <= y.mse);
        }
    }
}
