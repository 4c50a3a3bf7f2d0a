//! Command-line pipeline: synthetic data, two-stage training, staining,
//! evaluation and the (N, t'_0) sweep. Every command writes under one run
//! directory and records its outputs with SHA-256 checksums in
//! `manifest.json`.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vstain_core::data::{self, layout};
use vstain_core::guidance::{virtual_stain, GuidanceConfig};
use vstain_core::metrics::{evaluate_pairs, MetricsReport, PairRecord};
use vstain_core::mi::{train_critic, CriticNet};
use vstain_core::score::{train_score, ScoreNet};
use vstain_core::{rng, Error, Image, NoiseSchedule, Result};

pub use config::{RunConfig, RunLayout, Stage};

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub layout: RunLayout,
    /// Images processed concurrently by `stain` and `sweep`.
    pub jobs: usize,
    /// Directory for per-image step traces.
    pub trace: Option<PathBuf>,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Self {
        let layout = RunLayout::new(&cfg.paths.run_dir);
        Self { cfg, layout, jobs: 1, trace: None }
    }
}

/// Result of a command that ran to completion. `failures` counts items
/// (images, pairs, sweep cells) that could not be produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub failures: usize,
}

// ---------------------------------------------------------------------------
// run manifest

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub config_sha256: String,
    /// Output path (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub type Manifest = BTreeMap<String, CommandRecord>;

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn read_manifest(layout: &RunLayout) -> Result<Manifest> {
    let path = layout.manifest();
    if !path.exists() {
        return Ok(Manifest::new());
    }
    serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

/// Writes the effective config and replaces this command's manifest entry.
fn record(ctx: &Context, command: &str, outputs: &[PathBuf]) -> Result<()> {
    let layout = &ctx.layout;
    fs::create_dir_all(&layout.root)?;
    let cfg_path = layout.effective_config();
    fs::write(&cfg_path, ctx.cfg.to_toml_string()?)?;
    let mut files = Vec::new();
    for p in outputs {
        if p.is_dir() {
            files_under(p, &mut files)?;
        } else if p.exists() {
            files.push(p.clone());
        }
    }
    let mut rec = CommandRecord { config_sha256: sha256_file(&cfg_path)?, outputs: BTreeMap::new() };
    for f in files {
        let rel = f.strip_prefix(&layout.root).unwrap_or(&f);
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        rec.outputs.insert(key, sha256_file(&f)?);
    }
    let mut manifest = read_manifest(layout)?;
    manifest.insert(command.to_string(), rec);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.into()))?;
    fs::write(layout.manifest(), text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data

pub fn cmd_gen_data(ctx: &Context) -> Result<Outcome> {
    let corpus = data::gen_corpus(&ctx.cfg.corpus_spec())?;
    let root = ctx.layout.data();
    if root.exists() {
        fs::remove_dir_all(&root)?;
    }
    let records = data::write_corpus(&corpus, &root)?;
    log::info!("wrote {} tiles to {}", records.len(), root.display());
    record(ctx, "gen-data", &[root])?;
    Ok(Outcome::default())
}

// ---------------------------------------------------------------------------
// training

fn training_tiles(ctx: &Context) -> Result<Vec<Image>> {
    let dir = ctx.layout.data().join(layout::TRAIN_TARGET);
    if !dir.is_dir() {
        return Err(Error::Ingestion(format!("no training corpus at {} (run gen-data first)", dir.display())));
    }
    let tiles = data::load_tiles(&dir, ctx.cfg.data.image_size)?;
    log::info!("loaded {} target tiles ({} skipped)", tiles.images.len(), tiles.skipped.len());
    Ok(tiles.images)
}

/// Writes `(iteration, value)` rows numbered from `start + 1`, appending when
/// `append` is set and the file exists.
fn write_trace(path: &Path, column: &str, start: usize, values: &[f64], append: bool) -> Result<()> {
    fs::create_dir_all(path.parent().expect("trace paths have a parent"))?;
    let fresh = !(append && path.exists());
    let mut f = fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
    let mut buf = String::new();
    if fresh {
        buf.push_str(&format!("iteration\t{column}\n"));
    }
    for (i, v) in values.iter().enumerate() {
        buf.push_str(&format!("{}\t{v}\n", start + i + 1));
    }
    f.write_all(buf.as_bytes())?;
    Ok(())
}

/// Reads a two-column trace back as `(iteration, value)` rows.
pub fn read_trace(path: &Path) -> Result<Vec<(usize, f64)>> {
    let bad = |n: usize| Error::Ingestion(format!("{}: malformed line {n}", path.display()));
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .skip(1)
        .map(|(n, line)| {
            let (i, v) = line.split_once('\t').ok_or_else(|| bad(n + 1))?;
            Ok((i.parse().map_err(|_| bad(n + 1))?, v.parse().map_err(|_| bad(n + 1))?))
        })
        .collect()
}

pub fn cmd_train_score(ctx: &Context, resume: bool) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let sched = cfg.schedule()?;
    let tiles = training_tiles(ctx)?;
    let ckpt = ctx.layout.score_checkpoint();
    let start = if resume {
        let (net, it) = ScoreNet::load(&ckpt)?;
        if net.arch() != cfg.score.arch {
            return Err(Error::Config(format!(
                "checkpoint architecture {:?} does not match score.arch {:?}",
                net.arch(),
                cfg.score.arch
            )));
        }
        log::info!("resuming score training from iteration {it}");
        Some((net, it))
    } else {
        None
    };
    let first = start.as_ref().map_or(0, |(_, it)| *it);
    let trained = train_score(&tiles, cfg.score.arch, &cfg.score_train(), &sched, start)?;
    fs::create_dir_all(ckpt.parent().expect("checkpoint has a parent"))?;
    trained.net.save(&ckpt, trained.iteration)?;
    write_trace(&ctx.layout.score_trace(), "loss", first, &trained.losses, resume)?;
    record(ctx, "train-score", &[ckpt, ctx.layout.score_trace()])?;
    Ok(Outcome::default())
}

pub fn cmd_train_mi(ctx: &Context) -> Result<Outcome> {
    let sched = ctx.cfg.schedule()?;
    let tiles = training_tiles(ctx)?;
    let trained = train_critic(&tiles, &ctx.cfg.critic_train(), &sched)?;
    let ckpt = ctx.layout.critic_checkpoint();
    fs::create_dir_all(ckpt.parent().expect("checkpoint has a parent"))?;
    trained.critic.save(&ckpt)?;
    write_trace(&ctx.layout.critic_trace(), "bound", 0, &trained.bounds, false)?;
    record(ctx, "train-mi", &[ckpt, ctx.layout.critic_trace()])?;
    Ok(Outcome::default())
}

// ---------------------------------------------------------------------------
// staining

/// Trained networks needed for staining.
pub struct Models {
    pub score: ScoreNet,
    pub critic: CriticNet,
}

impl Models {
    pub fn load(layout: &RunLayout) -> Result<Self> {
        let (score, _) = ScoreNet::load(&layout.score_checkpoint())?;
        let critic = CriticNet::load(&layout.critic_checkpoint())?.frozen();
        Ok(Self { score, critic })
    }
}

/// Per-image stream id, keyed by file name so a sample does not depend on
/// which other files sit in the directory.
pub fn image_stream(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn output_name(name: &str) -> String {
    let stem = Path::new(name).file_stem().map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned());
    format!("{stem}.png")
}

#[derive(Debug, Clone, Default)]
pub struct StainReport {
    /// Output file names, in input order.
    pub written: Vec<String>,
    /// Input file name and error.
    pub failed: Vec<(String, String)>,
}

/// Options for one staining pass over a directory.
pub struct StainJob<'a> {
    pub models: &'a Models,
    pub sched: &'a NoiseSchedule,
    pub guidance: &'a GuidanceConfig,
    pub seed: u64,
    pub image_size: usize,
    pub limit: Option<usize>,
    pub trace: Option<&'a Path>,
    pub jobs: usize,
}

fn stain_one(job: &StainJob, input: &Path, output: &Path, name: &str) -> Result<String> {
    let img = data::load_image(input)?;
    let img = if img.height() != job.image_size || img.width() != job.image_size {
        data::resize_area(&img, job.image_size, job.image_size)
    } else {
        img
    };
    let mut r = rng::stream(job.seed, image_stream(name));
    let out = virtual_stain(&img, &job.models.score, &job.models.critic, job.sched, job.guidance, &mut r)?;
    let out_name = output_name(name);
    data::save_image(&out.image, &output.join(&out_name))?;
    if let Some(dir) = job.trace {
        out.trace.save(&dir.join(format!("{}.jsonl", Path::new(&out_name).with_extension("").display())))?;
    }
    Ok(out_name)
}

/// Stains every file in `input` into `output`. Per-image failures are logged
/// and collected; the pass continues.
pub fn stain_dir(job: &StainJob, input: &Path, output: &Path) -> Result<StainReport> {
    let mut files = data::list_files(input)?;
    if let Some(n) = job.limit {
        files.truncate(n);
    }
    if files.is_empty() {
        return Err(Error::Ingestion(format!("no input files in {}", input.display())));
    }
    fs::create_dir_all(output)?;
    if let Some(dir) = job.trace {
        fs::create_dir_all(dir)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job.jobs.max(1))
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let results: Vec<(String, Result<String>)> = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let res = stain_one(job, path, output, &name);
                match &res {
                    Ok(_) => log::info!("stained {name}"),
                    Err(e) => log::error!("failed to stain {name}: {e}"),
                }
                (name, res)
            })
            .collect()
    });
    let mut report = StainReport::default();
    for (name, res) in results {
        match res {
            Ok(out) => report.written.push(out),
            Err(e) => report.failed.push((name, e.to_string())),
        }
    }
    Ok(report)
}

pub fn cmd_stain(ctx: &Context, input: Option<&Path>, output: Option<&Path>) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let sched = cfg.schedule()?;
    let models = Models::load(&ctx.layout)?;
    let input = input.map_or_else(|| ctx.layout.data().join(layout::EVAL_SOURCE), Path::to_path_buf);
    let output = output.map_or_else(|| ctx.layout.stained(), Path::to_path_buf);
    let job = StainJob {
        models: &models,
        sched: &sched,
        guidance: &cfg.guidance,
        seed: cfg.stage_seed(Stage::Stain),
        image_size: cfg.data.image_size,
        limit: None,
        trace: ctx.trace.as_deref(),
        jobs: ctx.jobs,
    };
    let report = stain_dir(&job, &input, &output)?;
    log::info!("stained {} images, {} failed", report.written.len(), report.failed.len());
    let outputs: Vec<PathBuf> = report.written.iter().map(|n| output.join(n)).collect();
    record(ctx, "stain", &outputs)?;
    Ok(Outcome { failures: report.failed.len() })
}

// ---------------------------------------------------------------------------
// evaluation

fn file_names(dir: &Path) -> Result<BTreeSet<String>> {
    Ok(data::list_files(dir)?
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

/// Scores `names` from `gen_dir` against the same names in `gt_dir`. Pairs
/// that fail to load or score are kept as failed records.
pub fn evaluate_names(ctx: &Context, names: &[String], gen_dir: &Path, gt_dir: &Path) -> Result<MetricsReport> {
    let records = names
        .iter()
        .map(|name| {
            let loaded = data::load_image(&gen_dir.join(name)).and_then(|g| Ok((g, data::load_image(&gt_dir.join(name))?)));
            match loaded {
                Ok((gen, gt)) => {
                    let rep = evaluate_pairs(&[(name.clone(), gen, gt)], &ctx.cfg.metrics)?;
                    Ok(rep.records.into_iter().next().expect("one pair in, one record out"))
                }
                Err(e) => Ok(PairRecord::failed(name.clone(), e)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for r in records.iter().filter(|r| !r.ok()) {
        log::error!("failed to evaluate {}: {}", r.name, r.error);
    }
    Ok(MetricsReport::from_records(records))
}

pub fn cmd_eval(ctx: &Context, gen: Option<&Path>, gt: Option<&Path>) -> Result<Outcome> {
    let gen = gen.map_or_else(|| ctx.layout.stained(), Path::to_path_buf);
    let gt = gt.map_or_else(|| ctx.layout.data().join(layout::EVAL_TARGET), Path::to_path_buf);
    let (g, t) = (file_names(&gen)?, file_names(&gt)?);
    let only_gen: Vec<&String> = g.difference(&t).collect();
    let only_gt: Vec<&String> = t.difference(&g).collect();
    if !only_gen.is_empty() || !only_gt.is_empty() {
        return Err(Error::Ingestion(format!(
            "unmatched files: only in {}: {only_gen:?}; only in {}: {only_gt:?}",
            gen.display(),
            gt.display()
        )));
    }
    if g.is_empty() {
        return Err(Error::Ingestion(format!("no files to evaluate in {}", gen.display())));
    }
    let names: Vec<String> = g.into_iter().collect();
    let report = evaluate_names(ctx, &names, &gen, &gt)?;
    let out = ctx.layout.eval();
    fs::create_dir_all(&out)?;
    report.save_csv(&out.join("metrics.csv"))?;
    fs::write(out.join("summary.txt"), report.summary_text())?;
    print!("{}", report.summary_text());
    record(ctx, "eval", &[out])?;
    Ok(Outcome { failures: report.failures() })
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub guided_steps: usize,
    pub t0_prime: usize,
    /// `ok`, `failed` (some images or pairs failed), `error` or `invalid`.
    pub status: String,
    pub pairs: usize,
    pub vif: f64,
    pub hist: f64,
    pub iod_dev: f64,
    pub message: String,
}

impl SweepRow {
    fn empty(n: usize, t0: usize, status: &str, message: String) -> Self {
        let nan = f64::NAN;
        Self { guided_steps: n, t0_prime: t0, status: status.into(), pairs: 0, vif: nan, hist: nan, iod_dev: nan, message }
    }
}

pub fn cell_dir(n: usize, t0: usize) -> String {
    format!("N{n}_t{t0}")
}

/// Guidance settings for one cell: the chain starts at `S = N`.
pub fn cell_guidance(base: &GuidanceConfig, n: usize, t0: usize) -> GuidanceConfig {
    GuidanceConfig { start_step: n, guided_steps: n, t0_prime: t0, ..base.clone() }
}

fn run_cell(ctx: &Context, models: &Models, sched: &NoiseSchedule, n: usize, t0: usize) -> Result<SweepRow> {
    let guidance = cell_guidance(&ctx.cfg.guidance, n, t0);
    if let Err(e) = guidance.validate(sched) {
        return Ok(SweepRow::empty(n, t0, "invalid", e.to_string()));
    }
    let dir = ctx.layout.sweep().join(cell_dir(n, t0));
    let trace = ctx.trace.as_ref().map(|t| t.join(cell_dir(n, t0)));
    let job = StainJob {
        models,
        sched,
        guidance: &guidance,
        seed: ctx.cfg.stage_seed(Stage::Stain),
        image_size: ctx.cfg.data.image_size,
        limit: ctx.cfg.sweep.limit,
        trace: trace.as_deref(),
        jobs: ctx.jobs,
    };
    let images = dir.join("images");
    let stained = stain_dir(&job, &ctx.layout.data().join(layout::EVAL_SOURCE), &images)?;
    let report = evaluate_names(ctx, &stained.written, &images, &ctx.layout.data().join(layout::EVAL_TARGET))?;
    report.save_csv(&dir.join("metrics.csv"))?;
    let failed = stained.failed.len() + report.failures();
    let message = stained.failed.iter().map(|(n, e)| format!("{n}: {e}")).collect::<Vec<_>>().join("; ");
    Ok(SweepRow {
        guided_steps: n,
        t0_prime: t0,
        status: if failed == 0 { "ok" } else { "failed" }.into(),
        pairs: report.records.len() - report.failures(),
        vif: report.mean.vif,
        hist: report.mean.hist,
        iod_dev: report.mean.iod_dev,
        message,
    })
}

/// Metric rows by grid-cell columns.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:<8}", "");
    for r in rows {
        s.push_str(&format!("{:>14}", format!("N={} t0={}", r.guided_steps, r.t0_prime)));
    }
    s.push('\n');
    for (label, f) in [
        ("VIF", (|r: &SweepRow| r.vif) as fn(&SweepRow) -> f64),
        ("Hist", |r: &SweepRow| r.hist),
        ("IOD", |r: &SweepRow| r.iod_dev),
    ] {
        s.push_str(&format!("{label:<8}"));
        for r in rows {
            let cell = if r.status == "invalid" { "invalid".to_string() } else { format!("{:.4}", f(r)) };
            s.push_str(&format!("{cell:>14}"));
        }
        s.push('\n');
    }
    s
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    rd.deserialize()
        .map(|r| r.map_err(|e| Error::Ingestion(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn cmd_sweep(ctx: &Context) -> Result<Outcome> {
    let sched = ctx.cfg.schedule()?;
    let models = Models::load(&ctx.layout)?;
    let mut rows = Vec::new();
    for &n in &ctx.cfg.sweep.guided_steps {
        for &t0 in &ctx.cfg.sweep.t0_prime {
            log::info!("sweep cell N={n} t0'={t0}");
            let row = run_cell(ctx, &models, &sched, n, t0)
                .unwrap_or_else(|e| SweepRow::empty(n, t0, "error", e.to_string()));
            if row.status != "ok" {
                log::warn!("cell N={n} t0'={t0}: {} {}", row.status, row.message);
            }
            rows.push(row);
        }
    }
    let dir = ctx.layout.sweep();
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv")).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    let table = sweep_table(&rows);
    fs::write(dir.join("sweep.txt"), &table)?;
    print!("{table}");
    record(ctx, "sweep", &[dir])?;
    Ok(Outcome { failures: rows.iter().filter(|r| r.status == "failed" || r.status == "error").count() })
}
