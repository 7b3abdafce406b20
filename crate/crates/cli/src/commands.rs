//! One function per subcommand, plus the output-directory lock.

use crate::config::{ConfigOverrides, DecoderKind};
use crate::CliError;
use asr_core::audio::{decode_wav, resample, AudioClip, CANONICAL_RATE_HZ};
use asr_core::augment::parse_augment_pipeline;
use asr_core::ctc::{beam_decode, greedy_decode, BeamConfig};
use asr_core::eval::{
    evaluate_manifest, render_json, render_text, write_records_csv, EvalDecoder,
};
use asr_core::features::{stack_context, MfccPlan};
use asr_core::lm::NgramModel;
use asr_core::manifest::{
    read_manifest, scan_corpus, split_corpus, validate_manifest, write_manifest, SplitSpec,
};
use asr_core::model::forward;
use asr_core::text::{build_alphabet, normalize_transcript, Alphabet};
use asr_core::train::{load_checkpoint, run_training, TrainPlan, TrainState, BEST_MARKER};
use clap::Args;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Exclusive marker preventing two runs from clobbering one output tree.
/// Removed on drop; a crash can leave it behind, in which case the error
/// message tells the user what to delete.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::user(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".asr-lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::user(format!(
                "{} is locked by another run (delete {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::user(format!(
                "cannot lock {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_state(path: &Path) -> Result<TrainState, CliError> {
    if !path.exists() {
        return Err(CliError::user(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?)
}

fn alphabet_from_state(state: &TrainState) -> Alphabet {
    Alphabet::new(state.meta.alphabet.chars().collect())
}

fn load_canonical_clip(path: &Path) -> Result<AudioClip, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
    let clip = decode_wav(&bytes)?;
    if clip.sample_rate_hz() == CANONICAL_RATE_HZ {
        Ok(clip)
    } else {
        Ok(resample(&clip, CANONICAL_RATE_HZ))
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory holding the source `<id>.wav` files
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Tab-separated transcript index: `<id>\t<raw text>`
    #[arg(long, value_name = "FILE")]
    index: PathBuf,
    /// Output directory for converted audio and manifests
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Train,dev,test fractions, e.g. 0.8,0.1,0.1
    #[arg(long, value_name = "A,B,C")]
    split: Option<String>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

pub fn run_prepare(args: &PrepareArgs) -> Result<(), CliError> {
    let mut cfg = args.overrides.resolve()?;
    if let Some(spec) = &args.split {
        let parts: Vec<&str> = spec.split(',').collect();
        if parts.len() != 3 {
            return Err(CliError::user(format!(
                "--split expects three comma-separated fractions, got `{spec}`"
            )));
        }
        let mut values = [0.0f64; 3];
        for (slot, part) in values.iter_mut().zip(&parts) {
            *slot = part
                .trim()
                .parse()
                .map_err(|_| CliError::user(format!("bad split fraction `{part}`")))?;
        }
        cfg.split.train = values[0];
        cfg.split.dev = values[1];
        cfg.split.test = values[2];
    }
    let spec = SplitSpec {
        train_fraction: cfg.split.train,
        dev_fraction: cfg.split.dev,
        test_fraction: cfg.split.test,
        seed: cfg.split.seed,
    };
    spec.validate()?;

    let _lock = LockGuard::acquire(&args.out)?;
    let rows = scan_corpus(&args.corpus, &args.index, &args.out, &mut |w| {
        eprintln!("{w}")
    })?;
    let (train, dev, test) = split_corpus(&rows, &spec)?;
    write_manifest(&train, &args.out.join("train.csv"))?;
    write_manifest(&dev, &args.out.join("dev.csv"))?;
    write_manifest(&test, &args.out.join("test.csv"))?;

    let transcripts: Vec<&str> = rows.iter().map(|r| r.transcript.as_str()).collect();
    let alphabet = build_alphabet(&transcripts)?;
    alphabet.save(&args.out.join("alphabet.txt"))?;

    eprintln!(
        "prepared {} utterances: train={} dev={} test={} alphabet={}",
        rows.len(),
        train.len(),
        dev.len(),
        test.len(),
        alphabet.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory produced by `asr prepare`
    #[arg(long, value_name = "DIR")]
    work: PathBuf,
    /// Training manifest (default <work>/train.csv)
    #[arg(long, value_name = "FILE")]
    train_manifest: Option<PathBuf>,
    /// Held-out manifest (default <work>/dev.csv)
    #[arg(long, value_name = "FILE")]
    dev_manifest: Option<PathBuf>,
    /// Alphabet file (default <work>/alphabet.txt)
    #[arg(long, value_name = "FILE")]
    alphabet: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

pub fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = args.overrides.resolve()?;
    let train_csv = args
        .train_manifest
        .clone()
        .unwrap_or_else(|| args.work.join("train.csv"));
    let dev_csv = args
        .dev_manifest
        .clone()
        .unwrap_or_else(|| args.work.join("dev.csv"));
    let alphabet_path = args
        .alphabet
        .clone()
        .unwrap_or_else(|| args.work.join("alphabet.txt"));
    let alphabet = Alphabet::load(&alphabet_path)?;

    if cfg.train.checkpoint_dir.is_relative() {
        cfg.train.checkpoint_dir = args.work.join(&cfg.train.checkpoint_dir);
    }
    let model_cfg = cfg
        .model
        .to_model_config(cfg.mfcc.input_width(), alphabet.n_outputs());
    let augments = parse_augment_pipeline(&cfg.augments)?;

    let _lock = LockGuard::acquire(&cfg.train.checkpoint_dir)?;
    let plan = TrainPlan {
        train_manifest: &train_csv,
        dev_manifest: &dev_csv,
        alphabet: &alphabet,
        mfcc: &cfg.mfcc,
        model: &model_cfg,
        train: &cfg.train,
        augments: &augments,
    };
    let outcome = run_training(&plan, &mut |line| eprintln!("{line}"))?;
    eprintln!("final checkpoint {}", outcome.final_checkpoint.display());
    if let Some(best) = &outcome.best_checkpoint {
        eprintln!(
            "best checkpoint {} (dev loss {:.6})",
            best.display(),
            outcome.best_dev_loss.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// Accepts `best`, a path, or a bare file name inside the checkpoint dir.
fn resolve_checkpoint(arg: &str, ckpt_dir: &Path) -> Result<PathBuf, CliError> {
    if arg == "best" {
        let marker = ckpt_dir.join(BEST_MARKER);
        let name = fs::read_to_string(&marker).map_err(|_| {
            CliError::user(format!(
                "no best-checkpoint marker at {} (train first, or pass --checkpoint)",
                marker.display()
            ))
        })?;
        return Ok(ckpt_dir.join(name.trim()));
    }
    let direct = PathBuf::from(arg);
    if direct.exists() {
        return Ok(direct);
    }
    let nested = ckpt_dir.join(arg);
    if nested.exists() {
        return Ok(nested);
    }
    Err(CliError::user(format!("checkpoint `{arg}` not found")))
}

struct DecoderParts {
    kind: DecoderKind,
    beam_width: usize,
    lm_weight: f64,
    insertion_bonus: f64,
    lm: Option<NgramModel>,
}

impl DecoderParts {
    fn from_config(cfg: &crate::config::DecoderSection) -> Result<Self, CliError> {
        let lm = match (&cfg.kind, &cfg.lm_path) {
            (DecoderKind::Beam, Some(path)) => Some(NgramModel::load(path)?),
            _ => None,
        };
        Ok(DecoderParts {
            kind: cfg.kind,
            beam_width: cfg.beam_width,
            lm_weight: cfg.lm_weight,
            insertion_bonus: cfg.insertion_bonus,
            lm,
        })
    }

    fn as_eval_decoder(&self) -> EvalDecoder<'_> {
        match self.kind {
            DecoderKind::Greedy => EvalDecoder::Greedy,
            DecoderKind::Beam => EvalDecoder::Beam(self.beam_config()),
        }
    }

    fn beam_config(&self) -> BeamConfig<'_> {
        BeamConfig {
            beam_width: self.beam_width,
            lm_weight: self.lm_weight,
            insertion_bonus: self.insertion_bonus,
            lm: self.lm.as_ref(),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory produced by `asr prepare`
    #[arg(long, value_name = "DIR")]
    work: PathBuf,
    /// Manifest to score (default <work>/test.csv)
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Checkpoint file, bare name, or `best`
    #[arg(long, value_name = "FILE", default_value = "best")]
    checkpoint: String,
    /// Report directory (default <work>/eval)
    #[arg(long, value_name = "DIR")]
    report_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = args.overrides.resolve()?;
    let mut ckpt_dir = cfg.train.checkpoint_dir.clone();
    if ckpt_dir.is_relative() {
        ckpt_dir = args.work.join(ckpt_dir);
    }
    let ckpt_path = resolve_checkpoint(&args.checkpoint, &ckpt_dir)?;
    let state = load_state(&ckpt_path)?;
    let alphabet = alphabet_from_state(&state);
    let mut mfcc = state.meta.mfcc.clone();
    args.overrides.apply_mfcc(&mut mfcc);

    let decoder = DecoderParts::from_config(&cfg.decoder)?;
    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| args.work.join("test.csv"));
    let report_dir = args
        .report_dir
        .clone()
        .unwrap_or_else(|| args.work.join("eval"));
    let _lock = LockGuard::acquire(&report_dir)?;

    let (records, report) = evaluate_manifest(
        &manifest,
        &state.params,
        &alphabet,
        &mfcc,
        &decoder.as_eval_decoder(),
        &mut |w| eprintln!("{w}"),
    )?;
    let text = render_text(&report);
    fs::write(report_dir.join("report.txt"), &text)?;
    fs::write(report_dir.join("report.json"), render_json(&report))?;
    write_records_csv(&records, &report_dir.join("records.csv"))?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct TranscribeArgs {
    /// Trained checkpoint file
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// WAV file to transcribe
    #[arg(long, value_name = "FILE")]
    wav: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

pub fn run_transcribe(args: &TranscribeArgs) -> Result<(), CliError> {
    let cfg = args.overrides.resolve()?;
    let state = load_state(&args.checkpoint)?;
    let alphabet = alphabet_from_state(&state);
    let mut mfcc = state.meta.mfcc.clone();
    args.overrides.apply_mfcc(&mut mfcc);

    let decoder = DecoderParts::from_config(&cfg.decoder)?;
    let clip = load_canonical_clip(&args.wav)?;
    let plan = MfccPlan::new(&mfcc, CANONICAL_RATE_HZ)?;
    let features = plan.compute(&clip)?;
    let input = stack_context(&features.frames, mfcc.context);
    let (_, cache) = forward(&state.params, &input)?;
    let logprobs = cache.log_probs();
    let raw = match decoder.kind {
        DecoderKind::Greedy => greedy_decode(&logprobs, &alphabet),
        DecoderKind::Beam => beam_decode(&logprobs, &decoder.beam_config(), &alphabet),
    };
    println!("{}", normalize_transcript(&raw));
    Ok(())
}

#[derive(Debug, Args)]
pub struct LmTrainArgs {
    /// Directory produced by `asr prepare`
    #[arg(long, value_name = "DIR")]
    work: Option<PathBuf>,
    /// Transcript manifest(s) (default <work>/train.csv)
    #[arg(long = "manifest", value_name = "FILE")]
    manifests: Vec<PathBuf>,
    /// Alphabet file (default <work>/alphabet.txt)
    #[arg(long, value_name = "FILE")]
    alphabet: Option<PathBuf>,
    /// Output model file (default <work>/lm.txt)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

pub fn run_lm_train(args: &LmTrainArgs) -> Result<(), CliError> {
    let cfg = args.overrides.resolve()?;
    let from_work = |file: &str| args.work.as_ref().map(|w| w.join(file));
    let manifests = if args.manifests.is_empty() {
        vec![from_work("train.csv").ok_or_else(|| {
            CliError::user("pass --work or at least one --manifest".to_string())
        })?]
    } else {
        args.manifests.clone()
    };
    let alphabet_path = args
        .alphabet
        .clone()
        .or_else(|| from_work("alphabet.txt"))
        .ok_or_else(|| CliError::user("pass --work or --alphabet".to_string()))?;
    let out = args
        .out
        .clone()
        .or_else(|| from_work("lm.txt"))
        .ok_or_else(|| CliError::user("pass --work or --out".to_string()))?;

    let alphabet = Alphabet::load(&alphabet_path)?;
    let mut transcripts = Vec::new();
    for manifest in &manifests {
        for row in read_manifest(manifest)? {
            transcripts.push(row.transcript);
        }
    }
    let model = asr_core::lm::train_ngram(&transcripts, &alphabet, cfg.lm.order, cfg.lm.k)?;
    model.save(&out)?;
    eprintln!(
        "trained order-{} model on {} transcripts -> {}",
        cfg.lm.order,
        transcripts.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Directory produced by `asr prepare`
    #[arg(long, value_name = "DIR")]
    work: Option<PathBuf>,
    /// Manifest(s) to check
    #[arg(long = "manifest", value_name = "FILE")]
    manifests: Vec<PathBuf>,
}

pub fn run_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let mut targets = args.manifests.clone();
    if let Some(work) = &args.work {
        for name in ["train.csv", "dev.csv", "test.csv"] {
            let p = work.join(name);
            if p.exists() {
                targets.push(p);
            }
        }
    }
    if targets.is_empty() {
        return Err(CliError::user(
            "nothing to validate: pass --work or --manifest".to_string(),
        ));
    }

    let alphabet = match &args.work {
        Some(work) if work.join("alphabet.txt").exists() => {
            Some(Alphabet::load(&work.join("alphabet.txt"))?)
        }
        _ => None,
    };

    let mut violations = 0usize;
    for manifest in &targets {
        for v in validate_manifest(manifest)? {
            eprintln!("{}: {v}", manifest.display());
            violations += 1;
        }
        if let Some(alphabet) = &alphabet {
            for row in read_manifest(manifest)? {
                if !alphabet.covers(&row.transcript) {
                    eprintln!(
                        "{}: {}: transcript outside alphabet",
                        manifest.display(),
                        row.wav_filename
                    );
                    violations += 1;
                }
            }
        }
    }
    if violations > 0 {
        return Err(CliError::user(format!("{violations} violation(s) found")));
    }
    eprintln!("ok: {} manifest(s) validated", targets.len());
    Ok(())
}
