use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use analog::archive::{read_embedding_archive, write_embedding_archive};
use analog::bench::{bench_mass, run_bench, BenchConfig};
use analog::container::{read_scans_file, write_scans_file};
use analog::dataset::{
    prepare, rechunk, temporal_split, wet_area_ratio, ChunkedArchive, ChunkingConfig, ZrRelation,
};
use analog::eval::{mse_ground_truth, part1_grid_eval, part2_sequence_eval, ModelEmbeddings, Part2Config};
use analog::mass::ProfileMode;
use analog::reduction::{embed_archive, fit_pca, Embedder, IdentityEmbedder, LambdaMode, PcaConfig, PcaModel};
use analog::search::{embed_query, QuerySequence, SearchConfig, SearchIndex};
use analog::synth::{generate, generate_low_rank, SynthConfig};
use analog::EmbeddingArchive;

#[derive(Parser)]
#[command(name = "analog", version, about = "Analog sequence retrieval over gridded radar archives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk, filter and resize a raw scan container; optionally split it.
    Preprocess(PreprocessArgs),
    /// Write a synthetic archive.
    Synth(SynthArgs),
    /// Fit a Box-Cox + PCA model and save it as JSON.
    FitPca(FitPcaArgs),
    /// Embed every image of a container into an embedding archive.
    Embed(EmbedArgs),
    /// Dump embedding components as CSV, optionally with wet area ratio.
    EmbedDump(EmbedDumpArgs),
    /// Retrieve the best analogs of one query sequence.
    Search(SearchArgs),
    /// Ranking-quality evaluation.
    Evaluate {
        #[command(subcommand)]
        part: EvaluateCommand,
    },
    /// Time the search pipeline against a linear MSE scan.
    Bench(BenchArgs),
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("grid must look like 64x64")?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((h, w))
}

fn parse_time(s: &str) -> Result<i64, String> {
    if let Ok(t) = s.parse::<i64>() {
        return Ok(t);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|d| d.timestamp())
        .map_err(|e| format!("expected RFC 3339 time or Unix seconds, got {s:?}: {e}"))
}

#[derive(Args)]
struct ChunkArgs {
    /// Nominal scan cadence in seconds.
    #[arg(long, default_value_t = 300)]
    cadence: i64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output file (the search part when splitting).
    #[arg(long, alias = "out")]
    out_search: PathBuf,
    /// Output grid, e.g. 64x64.
    #[arg(long, alias = "grid", value_parser = parse_grid)]
    resize: Option<(usize, usize)>,
    /// Chunks with mean reflectivity below this (dBZ) are dropped.
    #[arg(long, default_value_t = 0.5)]
    signal_threshold: f64,
    #[arg(long, default_value_t = 300)]
    cadence: i64,
    #[arg(long, default_value_t = 7200)]
    min_duration: i64,
    /// Seconds added to UTC before cutting at midnight.
    #[arg(long, default_value_t = 0)]
    tz_offset: i64,
    /// Time separating search (before) from verification (after): RFC 3339
    /// or Unix seconds.
    #[arg(long, alias = "split", requires = "out_verif", value_parser = parse_time)]
    split_at: Option<i64>,
    #[arg(long, alias = "verif-out")]
    out_verif: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5000)]
    images: usize,
    #[arg(long, value_parser = parse_grid, default_value = "32x32")]
    grid: (usize, usize),
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Generate a low-rank archive with this many patterns instead of blobs.
    #[arg(long)]
    low_rank: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitPcaArgs {
    #[arg(long, alias = "archive")]
    input: PathBuf,
    #[arg(long, alias = "components")]
    d: usize,
    /// Box-Cox exponent: a number or "mle".
    #[arg(long, default_value = "mle")]
    lambda: String,
    #[arg(long, default_value_t = 0.01)]
    offset: f64,
    /// Apply Box-Cox to dBZ directly instead of Marshall-Palmer rain rate.
    #[arg(long)]
    no_zr: bool,
    #[command(flatten)]
    chunking: ChunkArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Fitted PCA model (JSON).
    #[arg(long, conflicts_with = "identity")]
    model: Option<PathBuf>,
    /// Use the flattened image as its own embedding.
    #[arg(long)]
    identity: bool,
}

impl ModelArgs {
    fn load(&self, shape: Option<(usize, usize)>) -> anyhow::Result<Box<dyn Embedder>> {
        if let Some(path) = &self.model {
            return Ok(Box::new(PcaModel::load(path)?));
        }
        if self.identity {
            let (h, w) = shape.context("identity embedding needs a non-empty image archive")?;
            return Ok(Box::new(IdentityEmbedder::new(h, w)));
        }
        bail!("pass --model <pca.json> or --identity")
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, alias = "archive")]
    input: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    chunking: ChunkArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedDumpArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Append the wet area ratio of each image (needs --images).
    #[arg(long, requires = "images")]
    war: bool,
    #[arg(long)]
    images: Option<PathBuf>,
    /// Rain rate threshold for the wet area ratio, mm/h.
    #[arg(long, default_value_t = 0.1)]
    war_threshold: f64,
    /// First component to dump.
    #[arg(long, default_value_t = 0)]
    i: usize,
    /// Second component to dump.
    #[arg(long, default_value_t = 1)]
    j: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    query_images: PathBuf,
    #[arg(long, default_value_t = 0)]
    query_start: usize,
    /// Precomputed embeddings of the query images, instead of a model.
    #[arg(long)]
    query_embeddings: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 6)]
    t: usize,
    #[arg(long, default_value_t = 500)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    a: usize,
    #[arg(long, default_value = "znorm")]
    mode: ProfileMode,
    #[arg(long, default_value_t = 0)]
    exclusion: usize,
    #[command(flatten)]
    chunking: ChunkArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvaluateCommand {
    /// Jaccard and Canberra of embedding top-k against MSE top-k per image.
    Part1(Part1Args),
    /// Rank-wise MSE curves of sequence search.
    Part2(Part2Args),
}

#[derive(Args)]
struct ModelSetArgs {
    /// Search-side embedding archives named `<prefix>.search.anle`; each is
    /// paired with `<prefix>.verif.anle`. Repeat or comma-separate.
    #[arg(long, required = true, value_delimiter = ',')]
    embeddings: Vec<PathBuf>,
    #[arg(long)]
    search: PathBuf,
    #[arg(long)]
    verif: PathBuf,
}

#[derive(Args)]
struct Part1Args {
    #[command(flatten)]
    models: ModelSetArgs,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,50,100,200,500")]
    limits: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Part2Args {
    #[command(flatten)]
    models: ModelSetArgs,
    #[arg(long, value_delimiter = ',', default_value = "3,6,12,24")]
    t: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    a: usize,
    #[arg(long, default_value_t = 100)]
    gap: usize,
    #[arg(long, default_value = "znorm")]
    mode: ProfileMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct BenchArgs {
    #[command(subcommand)]
    mass: Option<BenchCommand>,
    /// Image archive; a synthetic one is generated when omitted.
    #[arg(long, requires = "embeddings")]
    images: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Source of the query sequence (defaults to the image archive).
    #[arg(long)]
    query_images: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    query_start: usize,
    /// Size of the synthetic archive used without --images.
    #[arg(long, default_value_t = 50_000)]
    synthetic: usize,
    #[arg(long, value_delimiter = ',', default_value = "3,6,12,24")]
    t: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    a: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value = "znorm")]
    mode: ProfileMode,
    #[command(flatten)]
    chunking: ChunkArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Distance-profile time against query length.
    Mass {
        #[arg(long, default_value_t = 1 << 20)]
        archive_len: usize,
        #[arg(long, value_delimiter = ',', default_value = "15,30,60,120")]
        query_len: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value = "znorm")]
        mode: ProfileMode,
    },
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_chunked(path: &Path, cadence: i64) -> anyhow::Result<ChunkedArchive> {
    let scans = read_scans_file(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(rechunk(scans, cadence)?)
}

/// Images laid out with the chunk offsets stored in their embedding archive.
fn load_aligned(path: &Path, emb: &EmbeddingArchive) -> anyhow::Result<ChunkedArchive> {
    let scans = read_scans_file(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ChunkedArchive::from_scans_with_offsets(scans, emb.chunk_offsets())?)
}

fn verif_path(search: &Path) -> anyhow::Result<PathBuf> {
    let name = search.to_string_lossy();
    match name.strip_suffix(".search.anle") {
        Some(prefix) => Ok(PathBuf::from(format!("{prefix}.verif.anle"))),
        None => bail!("{name} does not follow the <prefix>.search.anle naming"),
    }
}

fn load_models(paths: &[PathBuf]) -> anyhow::Result<Vec<ModelEmbeddings>> {
    paths
        .iter()
        .map(|p| {
            let search = read_embedding_archive(p).with_context(|| format!("reading {}", p.display()))?;
            let vp = verif_path(p)?;
            let verif = read_embedding_archive(&vp).with_context(|| format!("reading {}", vp.display()))?;
            Ok(ModelEmbeddings::new(search, verif)?)
        })
        .collect()
}

#[derive(Serialize)]
struct MatchRecord {
    rank: usize,
    image_index: usize,
    iso_timestamp: String,
    profile_distance: f64,
    mse: f64,
}

fn iso(ts: i64) -> String {
    chrono::DateTime::from_timestamp(ts, 0)
        .map(|d| d.to_rfc3339())
        .unwrap_or_else(|| ts.to_string())
}

fn cmd_preprocess(a: PreprocessArgs) -> anyhow::Result<()> {
    let scans = read_scans_file(&a.input)?;
    let cfg = ChunkingConfig {
        cadence: a.cadence,
        min_duration: a.min_duration,
        tz_offset: a.tz_offset,
        ..ChunkingConfig::default()
    };
    let archive = prepare(scans, &cfg, a.signal_threshold, a.resize)?;
    log::info!("{} scans in {} chunks", archive.len(), archive.chunks().len());
    match (a.split_at, a.out_verif) {
        (Some(boundary), Some(verif_out)) => {
            let (search, verif) = temporal_split(archive, boundary, a.min_duration);
            println!("search: {} scans, verification: {} scans", search.len(), verif.len());
            write_scans_file(&a.out_search, &search.into_scans())?;
            write_scans_file(&verif_out, &verif.into_scans())?;
        }
        _ => {
            println!("{} scans in {} chunks", archive.len(), archive.chunks().len());
            write_scans_file(&a.out_search, &archive.into_scans())?;
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_images: a.images,
        height: a.grid.0,
        width: a.grid.1,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let archive = match a.low_rank {
        Some(r) => generate_low_rank(&cfg, r)?,
        None => generate(&cfg)?,
    };
    println!("{} scans in {} chunks", archive.len(), archive.chunks().len());
    write_scans_file(&a.out, &archive.into_scans())?;
    Ok(())
}

fn cmd_fit_pca(a: FitPcaArgs) -> anyhow::Result<()> {
    let archive = load_chunked(&a.input, a.chunking.cadence)?;
    let cfg = PcaConfig {
        lambda: a.lambda.parse::<LambdaMode>()?,
        offset: a.offset,
        zr: if a.no_zr { None } else { Some(ZrRelation::default()) },
        ..PcaConfig::default()
    };
    let model = fit_pca(&archive, a.d, &cfg)?;
    println!(
        "d = {}, lambda = {:.4}, explained variance {:?}",
        model.n_components(),
        model.boxcox_lambda,
        model.explained_variance
    );
    model.save(&a.out)?;
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> anyhow::Result<()> {
    let archive = load_chunked(&a.input, a.chunking.cadence)?;
    let embedder = a.model.load(archive.grid_shape())?;
    let emb = embed_archive(embedder.as_ref(), &archive)?;
    println!("{} images, d = {}, {}", emb.n_images(), emb.d(), emb.provenance().label());
    write_embedding_archive(&emb, &a.out)?;
    Ok(())
}

fn cmd_embed_dump(a: EmbedDumpArgs) -> anyhow::Result<()> {
    let emb = read_embedding_archive(&a.embeddings)?;
    if a.i >= emb.d() || a.j >= emb.d() {
        bail!("components {} and {} requested, archive has d = {}", a.i, a.j, emb.d());
    }
    let images = match &a.images {
        Some(p) if a.war => Some(load_aligned(p, &emb)?),
        _ => None,
    };
    let zr = ZrRelation::default();
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    if images.is_some() {
        w.write_record(["image_index", "component_i", "component_j", "war"])?;
    } else {
        w.write_record(["image_index", "component_i", "component_j"])?;
    }
    for idx in 0..emb.n_images() {
        let e = emb.image(idx);
        let mut rec = vec![idx.to_string(), e[a.i].to_string(), e[a.j].to_string()];
        if let Some(images) = &images {
            let grid = images.scan(idx).context("image index out of range")?;
            rec.push(wet_area_ratio(grid, &zr, a.war_threshold).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_search(a: SearchArgs) -> anyhow::Result<()> {
    let emb = read_embedding_archive(&a.embeddings)?;
    let images = load_aligned(&a.images, &emb)?;
    let query_archive = match &a.query_embeddings {
        Some(p) => load_aligned(&a.query_images, &read_embedding_archive(p)?)?,
        None => load_chunked(&a.query_images, a.chunking.cadence)?,
    };
    let query = QuerySequence::from_archive(&query_archive, a.query_start, a.t).with_context(|| {
        format!(
            "no contiguous query of {} scans starts at index {}",
            a.t, a.query_start
        )
    })?;
    let cfg = SearchConfig {
        k: a.k,
        a: a.a,
        t: a.t,
        mode: a.mode,
        exclusion: a.exclusion,
    };
    let index = SearchIndex::new(&emb, &images)?;
    let query_vec: Vec<f64> = match &a.query_embeddings {
        Some(p) => read_embedding_archive(p)?
            .window(a.query_start, a.t)
            .iter()
            .map(|&x| x as f64)
            .collect(),
        None => embed_query(a.model.load(query_archive.grid_shape())?.as_ref(), &query)?,
    };
    let outcome = index.search(&query_vec, &query, &cfg)?;
    log::info!("search status: {:?}", outcome.status);
    let records: Vec<MatchRecord> = outcome
        .matches
        .iter()
        .map(|m| MatchRecord {
            rank: m.rank,
            image_index: m.image_index,
            iso_timestamp: iso(images.scan(m.image_index).map_or(0, |s| s.timestamp)),
            profile_distance: m.profile_distance,
            mse: m.mse,
        })
        .collect();
    let mut out = output(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &records)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_evaluate(part: EvaluateCommand) -> anyhow::Result<()> {
    match part {
        EvaluateCommand::Part1(a) => {
            let models = load_models(&a.models.embeddings)?;
            let search = read_scans_file(&a.models.search)?;
            let verif = read_scans_file(&a.models.verif)?;
            let search = ChunkedArchive::from_scans_with_offsets(search, models[0].search.chunk_offsets())?;
            let verif = ChunkedArchive::from_scans_with_offsets(verif, models[0].verif.chunk_offsets())?;
            let depth = a.limits.iter().copied().max().unwrap_or(0);
            let truth = mse_ground_truth(&search, &verif, depth)?;
            let report = part1_grid_eval(&models, &truth, &a.limits)?;
            report.write_csv(output(Some(&a.out))?)?;
            println!("{} cells written to {}", report.cells.len(), a.out.display());
        }
        EvaluateCommand::Part2(a) => {
            let models = load_models(&a.models.embeddings)?;
            let search = read_scans_file(&a.models.search)?;
            let verif = read_scans_file(&a.models.verif)?;
            let search = ChunkedArchive::from_scans_with_offsets(search, models[0].search.chunk_offsets())?;
            let verif = ChunkedArchive::from_scans_with_offsets(verif, models[0].verif.chunk_offsets())?;
            let cfg = Part2Config {
                lengths: a.t,
                k: a.k,
                a: a.a,
                gap: a.gap,
                mode: a.mode,
            };
            let report = part2_sequence_eval(&models, &search, &verif, &cfg)?;
            report.write_csv(output(Some(&a.out))?)?;
            println!(
                "{} queries ({} skipped), {} curve points written to {}",
                report.query_starts.len(),
                report.skipped.len(),
                report.curves.len(),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    if let Some(BenchCommand::Mass {
        archive_len,
        query_len,
        reps,
        mode,
    }) = a.mass
    {
        println!("{:>6} {:>12} {:>10}", "q", "mean ms", "std ms");
        for t in bench_mass(archive_len, &query_len, reps, mode, 0)? {
            println!("{:>6} {:>12.3} {:>10.3}", t.query_len, t.mean * 1e3, t.std * 1e3);
        }
        return Ok(());
    }
    let cfg = BenchConfig {
        lengths: a.t.clone(),
        k: a.k,
        a: a.a,
        repetitions: a.reps,
        mode: a.mode,
    };
    let t_max = cfg.lengths.iter().copied().max().unwrap_or(1);
    let (images, emb, embedder): (ChunkedArchive, EmbeddingArchive, Box<dyn Embedder>) =
        match (&a.images, &a.embeddings) {
            (Some(ip), Some(ep)) => {
                let emb = read_embedding_archive(ep)?;
                let images = load_aligned(ip, &emb)?;
                let embedder = a.model.load(images.grid_shape())?;
                (images, emb, embedder)
            }
            _ => {
                println!("generating {} synthetic images", a.synthetic);
                let images = generate(&SynthConfig {
                    n_images: a.synthetic,
                    ..SynthConfig::default()
                })?;
                let train = ChunkedArchive::from_chunks(images.chunks().iter().take(20).cloned().collect());
                let model = fit_pca(&train, 5, &PcaConfig::default())?;
                let emb = embed_archive(&model, &images)?;
                (images, emb, Box::new(model))
            }
        };
    let query_source = match &a.query_images {
        Some(p) => load_chunked(p, a.chunking.cadence)?,
        None => images.clone(),
    };
    let query = QuerySequence::from_archive(&query_source, a.query_start, t_max)
        .with_context(|| format!("no contiguous query of {t_max} scans at {}", a.query_start))?;
    let report = run_bench(&images, &emb, embedder.as_ref(), &query, &cfg)?;
    println!("{report}");
    if let Some(out) = &a.out {
        report.write_csv(output(Some(out))?)?;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a),
        Command::FitPca(a) => cmd_fit_pca(a),
        Command::Embed(a) => cmd_embed(a),
        Command::EmbedDump(a) => cmd_embed_dump(a),
        Command::Search(a) => cmd_search(a),
        Command::Evaluate { part } => cmd_evaluate(part),
        Command::Bench(a) => cmd_bench(a),
    }
}
