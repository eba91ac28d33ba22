//! The `tokencast` command line: subcommands, exit codes and run manifests.
//!
//! | code | class |
//! |------|-------|
//! | 0 | success |
//! | 1 | internal |
//! | 2 | usage (unknown flag, bad value) |
//! | 3 | io (missing or unreadable input, unwritable output) |
//! | 4 | config (validation failure) |
//! | 5 | checkpoint (format error, tokenizer hash or vocabulary mismatch) |
//! | 6 | data (malformed file, shape or range violation) |
//! | 7 | diverged (training produced non-finite losses) |
//!
//! Failures print one line to stderr: `error class=<class> code=<n>: <message>`.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

pub use config::PipelineConfig;
pub use manifest::{RunManifest, RUNS_FILE};

use crate::checkpoint::file_sha256;
use crate::error::{Error, Result};
use crate::forecaster::{train_forecaster, ForecasterLogRecord, TokenDataset};
use crate::grid::ReflectivityField;
use crate::inference::{NowcastManifest, NowcastRequest, Pipeline, Sampling};
use crate::plot;
use crate::rprc;
use crate::synth::{generate_dataset, DatasetManifest, Split, MANIFEST_NAME};
use crate::tokenizer::{
    codebook_utilization, evaluate_reconstruction, train_tokenizer, ReconLoss, Tokenizer, TokenizerLogRecord,
};
use crate::verify::{verify_ensemble, VerificationReport};

#[derive(Debug, Parser)]
#[command(name = "tokencast", version, about = "Tokenized ensemble precipitation nowcasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic radar dataset.
    Synth {
        /// `default` or a TOML file holding a synthetic spec.
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the tokenizer on the training split of a dataset.
    TrainTokenizer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// `mwae` or `mae`.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        revive_dead_after: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the forecaster on tokens from a frozen tokenizer.
    TrainForecaster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample an ensemble nowcast from observed context frames.
    Nowcast {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        forecaster: PathBuf,
        /// RPRC sequence holding the context frames.
        #[arg(long)]
        context: PathBuf,
        /// Index of the first context frame in the sequence.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        members: usize,
        /// multinomial, greedy, top_k:K or temperature:T.
        #[arg(long, default_value = "multinomial")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        /// Run even if the forecaster was trained against a different tokenizer file.
        #[arg(long)]
        allow_hash_mismatch: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a nowcast against the observed continuation.
    Verify {
        /// Directory written by `nowcast`.
        #[arg(long)]
        nowcast: PathBuf,
        /// RPRC sequence the context was taken from.
        #[arg(long)]
        observed: PathBuf,
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Report path; defaults to `<nowcast>/report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rank histogram over pixels where the observation or any member is wet.
        #[arg(long)]
        wet_only: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Render an RPRC sequence, a nowcast directory or a verification report as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per grid cell for frame plots.
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TrainTokenizer { .. } => "train-tokenizer",
            Command::TrainForecaster { .. } => "train-forecaster",
            Command::Nowcast { .. } => "nowcast",
            Command::Verify { .. } => "verify",
            Command::Plot { .. } => "plot",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::TrainTokenizer { common, .. }
            | Command::TrainForecaster { common, .. }
            | Command::Nowcast { common, .. }
            | Command::Verify { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }
}

/// Exit code and class name for an error.
pub fn classify(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Io { .. } => (3, "io"),
        Error::InvalidConfig(_) | Error::NotDivisible { .. } | Error::CropTooLarge { .. } => (4, "config"),
        Error::Checkpoint(_) | Error::CheckpointMismatch { .. } | Error::VocabMismatch { .. } => (5, "checkpoint"),
        Error::Diverged { .. } => (7, "diverged"),
        Error::NonFinite { .. }
        | Error::NegativeRainRate { .. }
        | Error::ShapeMismatch { .. }
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated { .. }
        | Error::TokenOutOfRange { .. }
        | Error::ContextLength { .. }
        | Error::Empty(_)
        | Error::NonNormalizable
        | Error::Parse { .. } => (6, "data"),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error class=usage code=2: {}", one_line(first));
            return 2;
        }
    };
    let echo: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli.command, echo) {
        Ok(()) => 0,
        Err(e) => {
            let (code, class) = classify(&e);
            eprintln!("error class={class} code={code}: {}", one_line(&e.to_string()));
            code
        }
    }
}

fn hash_input(m: &mut RunManifest, path: &Path) -> Result<String> {
    let h = file_sha256(path)?;
    m.inputs.insert(path.display().to_string(), h.clone());
    Ok(h)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

struct JsonLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl JsonLog {
    fn create(path: PathBuf) -> Result<Self> {
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(f),
            path,
        })
    }

    fn write<T: serde::Serialize>(&mut self, rec: &T) -> Result<()> {
        use std::io::Write;
        let line = serde_json::to_string(rec).expect("log record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        use std::io::Write;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn progress(done: usize, total: usize) -> bool {
    total >= 10 && (done + 1).is_multiple_of(total / 10)
}

fn run(cmd: &Command, args: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let common = cmd.common();
    let mut cfg = PipelineConfig::load(common.config.as_deref())?;
    let mut m = RunManifest::new(cmd.name(), args);
    if let Some(p) = &common.config {
        hash_input(&mut m, p)?;
    }

    let manifest_dir = match cmd {
        Command::Synth { spec, n, out, .. } => {
            if spec != "default" {
                let p = Path::new(spec);
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                cfg.synth = toml::from_str(&text).map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    message: e.message().to_string(),
                })?;
                hash_input(&mut m, p)?;
            }
            cfg.apply_seed(common.seed);
            cfg.synth.validate()?;
            let ds = generate_dataset(&cfg.synth, *n, out)?;
            m.outputs = ds.entries.iter().map(|e| e.filename.clone()).collect();
            m.outputs.push(MANIFEST_NAME.to_string());
            out.clone()
        }
        Command::TrainTokenizer {
            data,
            out,
            steps,
            batch_size,
            loss,
            revive_dead_after,
            ..
        } => {
            cfg.apply_seed(common.seed);
            let s = &mut cfg.tokenizer_schedule;
            s.steps = steps.unwrap_or(s.steps);
            s.batch_size = batch_size.unwrap_or(s.batch_size);
            if revive_dead_after.is_some() {
                s.revive_dead_after = *revive_dead_after;
            }
            if let Some(l) = loss {
                cfg.tokenizer.recon_loss = match l.to_ascii_lowercase().as_str() {
                    "mwae" => ReconLoss::Mwae,
                    "mae" => ReconLoss::Mae,
                    other => return Err(Error::config(format!("unknown loss {other:?}"))),
                };
            }
            cfg.tokenizer.validate()?;
            cfg.tokenizer_schedule.validate(&cfg.tokenizer)?;
            let ds = DatasetManifest::load(data)?;
            hash_input(&mut m, &data.join(MANIFEST_NAME))?;
            let train = ds.load_split(Split::Train)?;
            let val = ds.load_split(Split::Val)?;
            let mut log = JsonLog::create(log_path(out))?;
            let mut log_err = None;
            let total = cfg.tokenizer_schedule.steps;
            let run = train_tokenizer(&train, &cfg.tokenizer, &cfg.tokenizer_schedule, |r: &TokenizerLogRecord| {
                if let Err(e) = log.write(r) {
                    log_err.get_or_insert(e);
                }
                if progress(r.step, total) {
                    eprintln!("step {} recon {:.5} util {:.3}", r.step + 1, r.recon, r.batch_utilization);
                }
            })?;
            if let Some(e) = log_err {
                return Err(e);
            }
            log.finish()?;
            if let Some(step) = run.diverged_at {
                return Err(Error::Diverged { step });
            }
            let hash = run.tokenizer.save(out)?;
            m.metrics.insert("codebook_utilization_train".into(), codebook_utilization(&run.tokenizer, &train)?);
            let frames: Vec<&ReflectivityField> = val.iter().flat_map(|s| s.frames()).collect();
            if !frames.is_empty() {
                let ev = evaluate_reconstruction(&run.tokenizer, &frames)?;
                m.metrics.insert("val_mwae".into(), ev.mwae);
                m.metrics.insert("val_mae_dbz".into(), ev.mae_dbz);
            }
            eprintln!("tokenizer {hash}");
            m.outputs = vec![out.display().to_string(), log_path(out).display().to_string()];
            parent_dir(out)
        }
        Command::TrainForecaster {
            data,
            tokenizer,
            out,
            steps,
            batch_size,
            ..
        } => {
            cfg.apply_seed(common.seed);
            let s = &mut cfg.forecaster_schedule;
            s.steps = steps.unwrap_or(s.steps);
            s.batch_size = batch_size.unwrap_or(s.batch_size);
            cfg.forecaster.validate()?;
            cfg.forecaster_schedule.validate()?;
            let before = hash_input(&mut m, tokenizer)?;
            let (tok, tok_hash) = Tokenizer::load(tokenizer)?;
            if cfg.forecaster.vocab_size != tok.config.codebook_size {
                return Err(Error::VocabMismatch {
                    forecaster: cfg.forecaster.vocab_size,
                    tokenizer: tok.config.codebook_size,
                });
            }
            let ds = DatasetManifest::load(data)?;
            hash_input(&mut m, &data.join(MANIFEST_NAME))?;
            let train = TokenDataset::encode(&tok, &tok_hash, &ds.load_split(Split::Train)?)?;
            let val_seqs = ds.load_split(Split::Val)?;
            let val = if val_seqs.is_empty() {
                None
            } else {
                Some(TokenDataset::encode(&tok, &tok_hash, &val_seqs)?)
            };
            let mut log = JsonLog::create(log_path(out))?;
            let mut log_err = None;
            let total = cfg.forecaster_schedule.steps;
            let run = train_forecaster(
                &train,
                val.as_ref(),
                &cfg.forecaster,
                &cfg.forecaster_schedule,
                |r: &ForecasterLogRecord| {
                    if let Err(e) = log.write(r) {
                        log_err.get_or_insert(e);
                    }
                    if progress(r.step, total) {
                        eprintln!("step {} loss {:.4}", r.step + 1, r.loss);
                    }
                },
            )?;
            if let Some(e) = log_err {
                return Err(e);
            }
            log.finish()?;
            if file_sha256(tokenizer)? != before {
                return Err(Error::Checkpoint("tokenizer checkpoint changed during training".into()));
            }
            let hash = run.forecaster.save(out)?;
            if let Some(v) = run.final_val_loss {
                m.metrics.insert("val_cross_entropy".into(), v);
                m.metrics.insert("uniform_cross_entropy".into(), (cfg.forecaster.vocab_size as f64).ln());
            }
            eprintln!("forecaster {hash}");
            m.outputs = vec![out.display().to_string(), log_path(out).display().to_string()];
            parent_dir(out)
        }
        Command::Nowcast {
            tokenizer,
            forecaster,
            context,
            start,
            steps,
            members,
            mode,
            out,
            allow_hash_mismatch,
            ..
        } => {
            cfg.apply_seed(common.seed);
            let sampling: Sampling = mode.parse()?;
            hash_input(&mut m, tokenizer)?;
            hash_input(&mut m, forecaster)?;
            hash_input(&mut m, context)?;
            let pipeline = Pipeline::load(tokenizer, forecaster, *allow_hash_mismatch)?;
            let seq = rprc::read_sequence(context)?;
            let req = NowcastRequest {
                context: seq.window(*start, pipeline.forecaster.config.context_frames - 1)?,
                lead_steps: *steps,
                n_members: *members,
                sampling,
                seed: cfg.seed.unwrap_or(0),
            };
            let ens = pipeline.nowcast(&req)?;
            let nm = ens.write(out, &req, &pipeline)?;
            m.outputs = nm.member_files.clone();
            m.outputs.push(crate::inference::NOWCAST_MANIFEST.to_string());
            let secs: Vec<f64> = nm.step_seconds.iter().flatten().copied().collect();
            m.metrics.insert("mean_step_seconds".into(), secs.iter().sum::<f64>() / secs.len().max(1) as f64);
            out.clone()
        }
        Command::Verify {
            nowcast,
            observed,
            start,
            out,
            wet_only,
            ..
        } => {
            cfg.apply_seed(common.seed);
            if *wet_only {
                cfg.verify.rank_wet_only = true;
            }
            hash_input(&mut m, observed)?;
            let nm = NowcastManifest::load(nowcast)?;
            for p in nm.member_paths(nowcast) {
                hash_input(&mut m, &p)?;
            }
            let members: Vec<Vec<ReflectivityField>> =
                nm.read_members(nowcast)?.into_iter().map(|s| s.into_frames()).collect();
            let obs_seq = rprc::read_sequence(observed)?;
            let first = start + nm.context_frames;
            let obs = obs_seq.window(first, nm.lead_steps)?.into_frames();
            let last = &obs_seq.frames()[first - 1];
            let report = verify_ensemble(
                &obs,
                &members,
                Some(last),
                nm.timestep_minutes,
                &crate::grid::PreprocessSpec::default(),
                &cfg.verify,
            )?;
            let path = out.clone().unwrap_or_else(|| nowcast.join("report.json"));
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            print!("{}", report.to_text());
            if let Some(l) = report.leads.first() {
                m.metrics.insert("crps_lead1".into(), l.crps);
                m.metrics.insert("rank_kl_lead1".into(), l.rank_histogram.kl_from_uniform);
            }
            m.outputs = vec![path.display().to_string()];
            parent_dir(&path)
        }
        Command::Plot { input, out, scale, .. } => {
            if input.is_dir() {
                let nm = NowcastManifest::load(input)?;
                let first = nm.read_members(input)?.into_iter().next().ok_or(Error::Empty("no members"))?;
                let titles = (1..=first.len()).map(|i| format!("+{} min", i * nm.timestep_minutes as usize)).collect::<Vec<_>>();
                plot::plot_frames(first.frames(), &titles, out, *scale)?;
            } else if input.extension().is_some_and(|e| e == "json") {
                hash_input(&mut m, input)?;
                let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
                let report: VerificationReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: input.clone(),
                    message: e.to_string(),
                })?;
                plot::plot_report(&report, out)?;
            } else {
                hash_input(&mut m, input)?;
                let seq = rprc::read_sequence(input)?;
                let titles = (0..seq.len()).map(|i| format!("t{i}")).collect::<Vec<_>>();
                plot::plot_frames(seq.frames(), &titles, out, *scale)?;
            }
            m.outputs = vec![out.display().to_string()];
            parent_dir(out)
        }
    };

    m.seed = cfg.seed;
    m.config = serde_json::to_value(&cfg).expect("config serializes");
    m.wall_clock_seconds = started.elapsed().as_secs_f64();
    m.append_to(&manifest_dir)
}

/// Entry point for the binary.
pub fn main() -> i32 {
    run_from(std::env::args_os())
}
