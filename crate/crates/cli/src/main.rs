//! `melody`: train, predict, evaluate, saliency and render.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure,
//! 4 empty result.

mod config;
mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use melody_core::convnet::{checkpoint, train_with_progress, write_history, ModelParams, TrainingPiece};
use melody_core::evaluation::{EvalReport, PieceEval, Prf};
use melody_core::pianoroll::quantize;
use melody_core::saliency::{saliency_map_parallel, RectSampler};
use melody_core::score_io::{parse_midi, write_json, write_midi, NoteRecord};
use melody_core::{predict, Method, NoteId, Score};

use config::RunConfig;
use render::{Overlay, RenderOptions};

#[derive(Parser)]
#[command(name = "melody", version, about = "Melody line identification in MIDI scores")]
struct Cli {
    /// Flat key = value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-piece and per-iteration work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory (output file for `render`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Track holding the annotated melody.
    #[arg(long)]
    melody_track: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a directory of annotated MIDI files.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Write 0 instead of wall-clock time into the history.
        #[arg(long)]
        no_elapsed: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Identify the melody of one MIDI file.
    Predict {
        input: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the masked probability roll as PGM.
        #[arg(long)]
        pgm: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score methods against the annotations of a corpus.
    Evaluate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Repeatable; defaults to every method the inputs allow.
        #[arg(long = "method")]
        methods: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Occlusion saliency map of one note.
    Saliency {
        input: PathBuf,
        #[arg(long)]
        note: u32,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Draw a MIDI file as an SVG piano roll.
    Render {
        input: PathBuf,
        /// JSON array of melody note ids to highlight.
        #[arg(long)]
        melody_ids: Option<PathBuf>,
        /// JSON records written by `predict`; shades notes by probability
        /// when present, otherwise highlights the predicted melody.
        #[arg(long)]
        prediction: Option<PathBuf>,
        #[arg(long)]
        scale: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(f) = e.downcast_ref::<Failure>() {
        return f.code;
    }
    match e.chain().find_map(|c| c.downcast_ref::<melody_core::Error>()) {
        Some(melody_core::Error::Numeric(_)) => 3,
        _ => 2,
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for Failure {}

fn empty_result(msg: String) -> anyhow::Error {
    Failure {
        code: 4,
        error: anyhow!(msg),
    }
    .into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    jobs: usize,
}

impl Ctx {
    fn out(&self, common: &Common) -> Result<PathBuf> {
        common
            .out
            .clone()
            .or_else(|| self.cfg.out.clone())
            .ok_or_else(|| anyhow!("no output location; pass --out"))
    }

    fn melody_track(&self, common: &Common) -> usize {
        common.melody_track.or(self.cfg.melody_track).unwrap_or(0)
    }

    fn seed(&self, common: &Common) -> u64 {
        common.seed.or(self.cfg.seed).unwrap_or(0)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let jobs = cli.jobs.or(cfg.jobs).unwrap_or(1).max(1);
    let ctx = Ctx { cfg, jobs };
    match cli.command {
        Command::Train {
            corpus,
            no_elapsed,
            common,
        } => cmd_train(&ctx, corpus, no_elapsed, &common),
        Command::Predict {
            input,
            method,
            checkpoint,
            pgm,
            common,
        } => cmd_predict(&ctx, &input, method, checkpoint, pgm, &common),
        Command::Evaluate {
            corpus,
            methods,
            checkpoint,
            common,
        } => cmd_evaluate(&ctx, corpus, methods, checkpoint, &common),
        Command::Saliency {
            input,
            note,
            checkpoint,
            iterations,
            common,
        } => cmd_saliency(&ctx, &input, NoteId(note), checkpoint, iterations, &common),
        Command::Render {
            input,
            melody_ids,
            prediction,
            scale,
            common,
        } => cmd_render(&ctx, &input, melody_ids, prediction, scale, &common),
    }
}

fn read_score(path: &Path, melody_track: Option<usize>) -> Result<Score> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    // an annotation track that does not exist leaves the piece unannotated
    match parse_midi(&bytes, melody_track) {
        Err(melody_core::Error::Argument(_)) if melody_track.is_some() => parse_midi(&bytes, None),
        other => other,
    }
    .with_context(|| format!("parsing {}", path.display()))
}

/// MIDI files of a directory, sorted by name.
fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "piece".into())
}

fn load_checkpoint(path: Option<PathBuf>) -> Result<ModelParams> {
    let path = path.ok_or_else(|| anyhow!("this method needs --checkpoint"))?;
    let bytes = fs::read(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let (params, _) = checkpoint::decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(params)
}

/// Applies `f` to every item on up to `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    let results: Vec<Vec<(usize, R)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs.min(items.len()))
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break done;
                        }
                        done.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, r) in results.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}

fn cmd_train(ctx: &Ctx, corpus: Option<PathBuf>, no_elapsed: bool, common: &Common) -> Result<()> {
    let corpus = corpus
        .or_else(|| ctx.cfg.corpus.clone())
        .ok_or_else(|| anyhow!("no corpus; pass --corpus"))?;
    let out = ctx.out(common)?;
    let mut tc = ctx.cfg.train_config();
    tc.seed = ctx.seed(common);
    if no_elapsed {
        tc.record_elapsed = false;
    }
    let track = ctx.melody_track(common);
    let mut pieces = Vec::new();
    for path in corpus_files(&corpus)? {
        let score = read_score(&path, Some(track))?;
        if score.melody_ids().map_or(true, |m| m.is_empty()) {
            eprintln!("warning: {} has no melody on track {track}; skipped", path.display());
            continue;
        }
        pieces.push(TrainingPiece::from_score(stem(&path), &score)?);
    }
    if pieces.len() < 2 {
        bail!(
            "training needs at least 2 annotated MIDI files in {}, found {}",
            corpus.display(),
            pieces.len()
        );
    }
    let outcome = train_with_progress(&pieces, &tc, |r| {
        eprintln!("epoch {:>4}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss)
    })?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("checkpoint.bin"), checkpoint::encode(&outcome.params, &tc)?)?;
    let mut history = Vec::new();
    write_history(&outcome.history, &mut history)?;
    fs::write(out.join("history.jsonl"), history)?;
    println!(
        "best epoch {} of {}; wrote {}",
        outcome.best_epoch,
        outcome.history.len(),
        out.join("checkpoint.bin").display()
    );
    Ok(())
}

fn parse_method(s: &str) -> Result<Method> {
    Ok(s.parse::<Method>()?)
}

fn cmd_predict(
    ctx: &Ctx,
    input: &Path,
    method: Option<String>,
    checkpoint: Option<PathBuf>,
    pgm: bool,
    common: &Common,
) -> Result<()> {
    let method = parse_method(method.or_else(|| ctx.cfg.method.clone()).as_deref().unwrap_or("cnn_mono"))?;
    let model = if method.needs_model() {
        Some(load_checkpoint(checkpoint.or_else(|| ctx.cfg.checkpoint.clone()))?)
    } else {
        None
    };
    let track = (method == Method::Vosa).then(|| ctx.melody_track(common));
    let score = read_score(input, track)?;
    if score.is_empty() {
        return Err(empty_result(format!("{} contains no notes", input.display())));
    }
    let out = ctx.out(common)?;
    let prediction = predict(&score, method, model.as_ref())?;
    let name = stem(input);
    fs::create_dir_all(&out)?;
    fs::write(out.join(format!("{name}.melody.mid")), write_midi(&score, &prediction.melody)?)?;
    fs::write(
        out.join(format!("{name}.melody.json")),
        write_json(&score, &prediction.melody, prediction.probabilities.as_ref())?,
    )?;
    if pgm {
        if let Some(roll) = &prediction.probability_roll {
            let mut buf = Vec::new();
            roll.write_pgm(&mut buf)?;
            fs::write(out.join(format!("{name}.prob.pgm")), buf)?;
        } else {
            eprintln!("warning: method {method} yields no probability roll; no PGM written");
        }
    }
    println!("{} of {} notes selected by {method}", prediction.melody.len(), score.len());
    Ok(())
}

fn cmd_evaluate(
    ctx: &Ctx,
    corpus: Option<PathBuf>,
    methods: Vec<String>,
    checkpoint: Option<PathBuf>,
    common: &Common,
) -> Result<()> {
    let corpus = corpus
        .or_else(|| ctx.cfg.corpus.clone())
        .ok_or_else(|| anyhow!("no corpus; pass --corpus"))?;
    let checkpoint = checkpoint.or_else(|| ctx.cfg.checkpoint.clone());
    let methods: Vec<Method> = if methods.is_empty() {
        match &ctx.cfg.method {
            Some(m) => vec![parse_method(m)?],
            None => Method::ALL
                .into_iter()
                .filter(|m| !m.needs_model() || checkpoint.is_some())
                .collect(),
        }
    } else {
        methods
            .iter()
            .flat_map(|m| m.split(','))
            .map(parse_method)
            .collect::<Result<_>>()?
    };
    let model = if methods.iter().any(|m| m.needs_model()) {
        Some(load_checkpoint(checkpoint)?)
    } else {
        None
    };
    let out = ctx.out(common)?;
    let track = ctx.melody_track(common);
    let files = corpus_files(&corpus)?;
    if files.is_empty() {
        bail!("no MIDI files in {}", corpus.display());
    }

    let results = par_map(&files, ctx.jobs, |path| -> Result<Option<Vec<PieceEval>>> {
        let score = read_score(path, Some(track))?;
        let Some(truth) = score.melody_ids().filter(|m| !m.is_empty()) else {
            return Ok(None);
        };
        methods
            .iter()
            .map(|&m| {
                let p = predict(&score, m, model.as_ref())?;
                Ok(PieceEval {
                    piece: stem(path),
                    method: m.to_string(),
                    metrics: Prf::from_sets(&p.melody, truth),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    });
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (path, r) in files.iter().zip(results) {
        match r.with_context(|| format!("evaluating {}", path.display()))? {
            Some(v) => rows.extend(v),
            None => {
                eprintln!("warning: {} has no melody on track {track}; skipped", path.display());
                skipped.push(stem(path));
            }
        }
    }
    if rows.is_empty() {
        bail!("no annotated pieces in {}", corpus.display());
    }
    let report = EvalReport::from_pieces(rows, skipped)?;
    fs::create_dir_all(&out)?;
    let mut json = Vec::new();
    report.write_json(&mut json)?;
    fs::write(out.join("report.json"), json)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(out.join("report.csv"), csv)?;
    println!("{:<10} {:>6} {:>9} {:>9} {:>9} {:>9}", "method", "pieces", "mean P", "mean R", "mean F", "median F");
    for s in &report.corpus {
        println!(
            "{:<10} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            s.method, s.pieces, s.mean.precision, s.mean.recall, s.mean.f_measure, s.median.f_measure
        );
    }
    Ok(())
}

fn cmd_saliency(
    ctx: &Ctx,
    input: &Path,
    note: NoteId,
    checkpoint: Option<PathBuf>,
    iterations: Option<usize>,
    common: &Common,
) -> Result<()> {
    let model = load_checkpoint(checkpoint.or_else(|| ctx.cfg.checkpoint.clone()))?;
    let score = read_score(input, None)?;
    if !score.contains(note) {
        bail!("note {note} is not part of {}", input.display());
    }
    let out = ctx.out(common)?;
    let iterations = iterations.or(ctx.cfg.iterations).unwrap_or(3000);
    let roll = quantize(&score)?;
    let sampler = RectSampler::new(ctx.seed(common));
    let map = saliency_map_parallel(&model, &roll, note, iterations, &sampler, ctx.jobs)?;
    let name = format!("{}.note{}", stem(input), note);
    fs::create_dir_all(&out)?;
    let mut pgm = Vec::new();
    map.write_pgm(&mut pgm)?;
    fs::write(out.join(format!("{name}.saliency.pgm")), pgm)?;
    fs::write(
        out.join(format!("{name}.saliency.json")),
        serde_json::to_vec_pretty(&map.to_json())?,
    )?;
    println!("{} iterations, {} skipped", map.iterations, map.skipped);
    Ok(())
}

fn cmd_render(
    ctx: &Ctx,
    input: &Path,
    melody_ids: Option<PathBuf>,
    prediction: Option<PathBuf>,
    scale: Option<f64>,
    common: &Common,
) -> Result<()> {
    let track = common.melody_track.or(ctx.cfg.melody_track);
    let score = read_score(input, track)?;
    if score.is_empty() {
        return Err(empty_result(format!("{} contains no notes", input.display())));
    }
    let mut overlay = Overlay {
        melody: score.melody_ids().cloned().unwrap_or_default(),
        probabilities: None,
    };
    if let Some(p) = melody_ids {
        let ids = melody_core::score_io::parse_melody_ids(&fs::read(&p)?)?;
        score.check_ids(&ids)?;
        overlay.melody = ids;
    }
    if let Some(p) = prediction {
        let records: Vec<NoteRecord> =
            serde_json::from_slice(&fs::read(&p)?).with_context(|| format!("reading {}", p.display()))?;
        overlay.melody = records.iter().filter(|r| r.is_melody).map(|r| r.id).collect::<BTreeSet<_>>();
        score.check_ids(&overlay.melody)?;
        let probs: BTreeMap<NoteId, f64> = records.iter().filter_map(|r| r.probability.map(|p| (r.id, p))).collect();
        if !probs.is_empty() {
            overlay.probabilities = Some(probs);
        }
    }
    let mut opts = RenderOptions::default();
    if let Some(s) = scale.or(ctx.cfg.scale) {
        if !(s > 0.0) {
            bail!("scale must be positive");
        }
        opts.scale = s;
    }
    if let Some(c) = &ctx.cfg.melody_color {
        opts.melody_color = c.clone();
    }
    if let Some(c) = &ctx.cfg.accompaniment_color {
        opts.accompaniment_color = c.clone();
    }
    let roll = quantize(&score)?;
    let out = ctx.out(common)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, render::svg(&roll, &overlay, &opts))?;
    Ok(())
}
