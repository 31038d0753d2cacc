use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use pitchnet::audio::{load_wav, resample, save_wav, AudioClip};
use pitchnet::dataset::{
    ingest_directory, manifest, synthesize_corpus, Corpus, Layout, SynthSpec, TARGET_RATE,
};
use pitchnet::eval::{
    eval_corpus, ncc, pitch_sweep, sweep_csv, EvalClip, EvalMode, DEFAULT_MAX_LAG,
};
use pitchnet::model::{checkpoint_load, ModelBundle, ModelConfig, Sampling};
use pitchnet::pitch::{contour_csv, contour_from_csv, extract_pitch, normalize_pitch, PitchConfig, PitchContour};
use pitchnet::training::{prepare_corpus, train, LossWeights, TrainSchedule};
use pitchnet::{Error, Result};

#[derive(Parser)]
#[command(name = "pitchnet", version, about = "Singing voice conversion: train, convert, and evaluate")]
struct Cli {
    /// Cap the worker thread count
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic multi-singer corpus with ground-truth pitch
    Synth {
        /// TOML spec describing singers, harmonics, melody, vibrato
        #[arg(long)]
        spec: PathBuf,
        /// Output corpus directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus directory
    Train {
        /// TOML file with [model], [schedule], [weights], [pitch] sections
        #[arg(long)]
        config: PathBuf,
        /// Corpus root (one subdirectory of WAVs per singer)
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory for checkpoints, metrics, and the resolved config
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the schedule seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert one clip to a target singer's voice
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input WAV
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target_singer: usize,
        /// Multiply the input pitch contour by this factor
        #[arg(long, default_value_t = 1.0)]
        pitch_scale: f64,
        /// Output WAV
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score reconstruction or conversion over a corpus
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Report CSV path
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-synthesize one clip under several pitch-scale factors
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Singer embedding to condition on
        #[arg(long)]
        singer: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.7, 1.0, 1.3])]
        factors: Vec<f64>,
        /// Output directory for per-factor contour CSVs
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Mode {
    Reconstruction,
    Conversion,
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // ignore the error if a pool already exists; the default is fine then
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {}", e);
        std::process::exit(match e {
            Error::Argument(_) => 2,
            _ => 1,
        });
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { spec, out } => cmd_synth(&spec, &out),
        Cmd::Train {
            config,
            corpus,
            out,
            resume,
            seed,
        } => cmd_train(&config, &corpus, &out, resume.as_deref(), seed),
        Cmd::Convert {
            checkpoint,
            input,
            target_singer,
            pitch_scale,
            out,
            seed,
        } => cmd_convert(&checkpoint, &input, target_singer, pitch_scale, &out, seed),
        Cmd::Eval {
            checkpoint,
            corpus,
            mode,
            out,
            seed,
        } => cmd_eval(&checkpoint, &corpus, mode, &out, seed),
        Cmd::Sweep {
            checkpoint,
            input,
            singer,
            factors,
            out,
            seed,
        } => cmd_sweep(&checkpoint, &input, singer, &factors, &out, seed),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Argument(format!("{}: {}", path.display(), e)))
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: SynthSpec = read_toml(spec_path)?;
    let (corpus, truth) = synthesize_corpus(&spec)?;
    let pitch_cfg = PitchConfig::default();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (entry, contour) in corpus.clips.iter().zip(&truth) {
        let dir = out.join(&corpus.singer_names[entry.singer_id]);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_wav(&entry.clip, &dir.join(format!("{}.wav", entry.clip_id)))?;
        let norm = normalize_pitch(contour, pitch_cfg.f_min, pitch_cfg.f_max)?;
        let csv_path = dir.join(format!("{}.csv", entry.clip_id));
        std::fs::write(&csv_path, contour_csv(contour, &norm))
            .map_err(|e| Error::io(&csv_path, e))?;
    }
    let manifest_path = out.join("manifest.txt");
    std::fs::write(&manifest_path, manifest(&corpus)).map_err(|e| Error::io(&manifest_path, e))?;
    eprintln!(
        "wrote {} clips for {} singers to {}",
        corpus.clips.len(),
        corpus.n_singers(),
        out.display()
    );
    Ok(())
}

/// Full training configuration as written to and read from disk.
#[derive(Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    schedule: TrainSchedule,
    weights: LossWeights,
    pitch: PitchConfig,
}

/// Ground-truth contours when every clip has a sibling CSV; tracker
/// otherwise.
fn load_ground_truth(root: &Path, corpus: &Corpus) -> Result<Option<Vec<PitchContour>>> {
    let mut contours = Vec::with_capacity(corpus.clips.len());
    for entry in &corpus.clips {
        let csv = root.join(&entry.clip_id).with_extension("csv");
        if !csv.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
        contours.push(contour_from_csv(&text, 100, entry.clip.sample_rate)?);
    }
    Ok(Some(contours))
}

fn cmd_train(
    config_path: &Path,
    corpus_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut file: TrainFile = read_toml(config_path)?;
    if let Some(s) = seed {
        file.schedule.seed = s;
    }
    let (corpus, skips) = ingest_directory(corpus_dir, Layout::Flat, None)?;
    for (path, why) in &skips.skipped {
        eprintln!("skipped {}: {}", path.display(), why);
    }
    if file.model.n_singers != corpus.n_singers() {
        return Err(Error::Argument(format!(
            "model.n_singers is {} but the corpus has {} singers",
            file.model.n_singers,
            corpus.n_singers()
        )));
    }

    let mut bundle = match resume {
        Some(ckpt) => {
            let bundle = checkpoint_load(ckpt)?;
            let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let step: u64 = stem
                .rsplit('_')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    Error::Argument(format!(
                        "cannot infer step from checkpoint name {}; expected checkpoint_<step>.pnck",
                        ckpt.display()
                    ))
                })?;
            file.schedule.start_step = step;
            if bundle.config != file.model {
                eprintln!("note: using the checkpoint's model config, not the config file's");
                file.model = bundle.config.clone();
            }
            bundle
        }
        None => ModelBundle::init(file.model.clone(), file.schedule.seed)?,
    };

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = toml::to_string_pretty(&file)
        .map_err(|e| Error::Internal(format!("serializing resolved config: {}", e)))?;
    let resolved_path = out.join("config.toml");
    std::fs::write(&resolved_path, resolved).map_err(|e| Error::io(&resolved_path, e))?;

    let ground_truth = load_ground_truth(corpus_dir, &corpus)?;
    if ground_truth.is_some() {
        eprintln!("using ground-truth pitch CSVs from the corpus directory");
    }
    let prepared = prepare_corpus(
        &corpus,
        ground_truth.as_deref(),
        &file.pitch,
        file.schedule.augment,
    )?;
    let state = train(&mut bundle, &prepared, &file.schedule, &file.weights, Some(out))?;
    if let Some(last) = state.loss_log.last() {
        eprintln!(
            "finished at step {}: recon {:.4} singer {:.4} pitch {:.4}",
            last.step + 1,
            last.recon,
            last.singer,
            last.pitch
        );
    }
    Ok(())
}

/// Load a WAV, downmix/resample to the model rate, and pitch-track it.
fn load_input(path: &Path, pitch_cfg: &PitchConfig) -> Result<(AudioClip, PitchContour)> {
    let clip = resample(&load_wav(path)?, TARGET_RATE)?;
    let contour = extract_pitch(&clip, pitch_cfg)?;
    Ok((clip, contour))
}

fn cmd_convert(
    checkpoint: &Path,
    input: &Path,
    target_singer: usize,
    pitch_scale: f64,
    out: &Path,
    seed: u64,
) -> Result<()> {
    if pitch_scale <= 0.0 {
        return Err(Error::Argument(format!(
            "pitch scale must be positive, got {}",
            pitch_scale
        )));
    }
    let bundle = checkpoint_load(checkpoint)?;
    // validate the singer before the expensive generation pass
    bundle.lookup_embedding(target_singer)?;
    let pitch_cfg = PitchConfig::default();
    let (clip, contour) = load_input(input, &pitch_cfg)?;
    let conv = pitchnet::eval::convert(
        &bundle,
        &clip.samples,
        &contour,
        target_singer,
        pitch_scale,
        &pitch_cfg,
        Sampling::Argmax,
        seed,
    )?;
    save_wav(
        &AudioClip::new(conv.samples.clone(), conv.stream.sample_rate),
        out,
    )?;
    match ncc(&conv.scaled_input, &conv.output_pitch, DEFAULT_MAX_LAG) {
        Ok(r) => println!("ncc: {:.6} (lag {}, {} frames)", r.ncc, r.lag, r.frames),
        Err(e) => println!("ncc: unavailable ({})", e),
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn eval_clips(corpus_dir: &Path, pitch_cfg: &PitchConfig) -> Result<(Vec<EvalClip>, usize)> {
    let (corpus, skips) = ingest_directory(corpus_dir, Layout::Flat, None)?;
    for (path, why) in &skips.skipped {
        eprintln!("skipped {}: {}", path.display(), why);
    }
    let ground_truth = load_ground_truth(corpus_dir, &corpus)?;
    let mut clips = Vec::with_capacity(corpus.clips.len());
    for (i, entry) in corpus.clips.iter().enumerate() {
        let pitch_hz = match &ground_truth {
            Some(gt) => gt[i].clone(),
            None => extract_pitch(&entry.clip, pitch_cfg)?,
        };
        clips.push(EvalClip {
            clip_id: entry.clip_id.clone(),
            samples: entry.clip.samples.clone(),
            pitch_hz,
            singer_id: entry.singer_id,
        });
    }
    Ok((clips, corpus.n_singers()))
}

fn cmd_eval(checkpoint: &Path, corpus_dir: &Path, mode: Mode, out: &Path, seed: u64) -> Result<()> {
    let bundle = checkpoint_load(checkpoint)?;
    let pitch_cfg = PitchConfig::default();
    let (clips, n_singers) = eval_clips(corpus_dir, &pitch_cfg)?;
    let mode = match mode {
        Mode::Reconstruction => EvalMode::Reconstruction,
        Mode::Conversion => EvalMode::Conversion,
    };
    let report = eval_corpus(&bundle, &clips, n_singers, mode, &pitch_cfg, seed);
    std::fs::write(out, report.to_csv()).map_err(|e| Error::io(out, e))?;
    match report.mean_ncc() {
        Some(m) => println!(
            "mean ncc: {:.6} over {} pairs ({} missing)",
            m,
            report.pairs.len() - report.missing(),
            report.missing()
        ),
        None => println!("mean ncc: unavailable (no pair scored)"),
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(
    checkpoint: &Path,
    input: &Path,
    singer: usize,
    factors: &[f64],
    out: &Path,
    seed: u64,
) -> Result<()> {
    if factors.is_empty() || factors.iter().any(|&f| f <= 0.0) {
        return Err(Error::Argument("factors must be positive".into()));
    }
    let bundle = checkpoint_load(checkpoint)?;
    bundle.lookup_embedding(singer)?;
    let pitch_cfg = PitchConfig::default();
    let (clip, contour) = load_input(input, &pitch_cfg)?;
    let entries = pitch_sweep(
        &bundle,
        &clip.samples,
        &contour,
        singer,
        factors,
        &pitch_cfg,
        seed,
    )?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut summary = String::from("factor,ncc,lag,frames,median_output_f0\n");
    for e in &entries {
        let path = out.join(format!("sweep_{:.2}.csv", e.factor));
        std::fs::write(
            &path,
            sweep_csv(&contour, &e.conversion.scaled_input, &e.conversion.output_pitch),
        )
        .map_err(|err| Error::io(&path, err))?;
        summary.push_str(&format!(
            "{:.2},{:.6},{},{},{:.3}\n",
            e.factor, e.report.ncc, e.report.lag, e.report.frames, e.median_output_f0
        ));
        println!(
            "factor {:.2}: ncc {:.4}, median output f0 {:.1} Hz",
            e.factor, e.report.ncc, e.median_output_f0
        );
    }
    let summary_path = out.join("summary.csv");
    std::fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
    eprintln!("wrote {} factor CSVs to {}", entries.len(), out.display());
    Ok(())
}
