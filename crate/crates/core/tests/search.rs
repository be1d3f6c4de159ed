use analog::reduction::{embed_archive, fit_pca};
use analog::search::{embed_query, linear_mse_search, SearchIndex};
use analog::synth::{generate, SynthConfig};
use analog::{ChunkedArchive, Embedder, PcaConfig, PcaModel, QuerySequence, SearchConfig, SearchStatus};

fn archive(n: usize, seed: u64) -> ChunkedArchive {
    generate(&SynthConfig {
        n_images: n,
        height: 16,
        width: 16,
        chunk_len: (40, 120),
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Marshall-Palmer rain rate, Box-Cox, centring and projection written out
/// pixel by pixel.
fn project_by_hand(model: &PcaModel, scan: &[f32]) -> Vec<f64> {
    let lambda = model.boxcox_lambda;
    let x: Vec<f64> = scan
        .iter()
        .zip(&model.mean)
        .map(|(&dbz, m)| {
            let r = if dbz <= 0.0 {
                0.0
            } else {
                (10f64.powf(dbz as f64 / 10.0) / 200.0).powf(1.0 / 1.6)
            };
            let y = if lambda == 0.0 {
                (r + model.offset).ln()
            } else {
                ((r + model.offset).powf(lambda) - 1.0) / lambda
            };
            y - m
        })
        .collect();
    let p = x.len();
    (0..model.components.len() / p)
        .map(|i| {
            model.components[i * p..(i + 1) * p]
                .iter()
                .zip(&x)
                .map(|(w, v)| w * v)
                .sum()
        })
        .collect()
}

#[test]
fn query_embedding_is_concatenation_of_image_projections() {
    let arch = archive(400, 3);
    let model = fit_pca(&arch, 5, &PcaConfig::default()).unwrap();
    let q = QuerySequence::from_archive(&arch, 10, 6).unwrap();
    let got = embed_query(&model, &q).unwrap();
    assert_eq!(got.len(), 30);
    let want: Vec<f64> = q.scans().iter().flat_map(|s| project_by_hand(&model, s.values())).collect();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()), "{g} vs {w}");
    }
    assert_eq!(model.dim(), 5);
}

#[test]
fn pipeline_agrees_with_brute_force_when_candidates_cover_it() {
    let (k, a, t) = (100, 10, 6);
    let search = archive(2000, 11);
    let verif = archive(400, 12);
    let model = fit_pca(&search, 5, &PcaConfig::default()).unwrap();
    let emb = embed_archive(&model, &search).unwrap();
    let index = SearchIndex::new(&emb, &search).unwrap();
    let cfg = SearchConfig::new(k, a, t);

    let mut covered = 0;
    let mut queries = 0;
    for start in (0..verif.len()).step_by(37) {
        let Some(q) = QuerySequence::from_archive(&verif, start, t) else { continue };
        if verif.locate(start).map(|(c, i)| i + t > verif.chunks()[c].len()).unwrap_or(true) {
            continue;
        }
        let qv = embed_query(&model, &q).unwrap();
        if qv.iter().all(|v| (v - qv[0]).abs() < 1e-12) {
            continue;
        }
        queries += 1;
        let out = index.search(&qv, &q, &cfg).unwrap();
        assert_eq!(out.status, SearchStatus::Complete);
        assert_eq!(out.matches.len(), a);

        let truth = linear_mse_search(&search, &q, a).unwrap();
        let pool: Vec<usize> = index.candidates(&qv, &cfg).unwrap().iter().map(|c| c.0).collect();
        assert_eq!(pool.len(), k);
        if truth.iter().all(|m| pool.contains(&m.image_index)) {
            covered += 1;
            let got: Vec<usize> = out.matches.iter().map(|m| m.image_index).collect();
            let want: Vec<usize> = truth.iter().map(|m| m.image_index).collect();
            assert_eq!(got, want, "query at {start}");
            for (g, w) in out.matches.iter().zip(&truth) {
                assert!((g.mse - w.mse).abs() <= 1e-9 * w.mse.max(1.0));
            }
        }
        // whatever the pool, the pipeline never beats the exhaustive scan
        for (g, w) in out.matches.iter().zip(&truth) {
            assert!(g.mse >= w.mse - 1e-9);
        }
    }
    assert!(queries >= 5, "only {queries} usable queries");
    assert!(covered >= 1, "brute-force top {a} never inside the top {k} pool");
}
