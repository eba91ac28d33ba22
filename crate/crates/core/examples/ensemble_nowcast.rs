//! End to end: train both stages briefly, sample an ensemble nowcast on a
//! held-out sequence, verify it and write SVG figures.
//!
//! cargo run --example ensemble_nowcast -- [out_dir] [sampling]

use std::path::PathBuf;

use tokencast::forecaster::{train_forecaster, ForecasterConfig, ForecasterSchedule, TokenDataset};
use tokencast::grid::PreprocessSpec;
use tokencast::inference::{NowcastRequest, Pipeline, Sampling};
use tokencast::plot::{plot_frames, plot_report};
use tokencast::synth::{generate_sequence, SynthSpec};
use tokencast::tokenizer::{train_tokenizer, TokenizerConfig, TokenizerSchedule};
use tokencast::verify::{verify_ensemble, VerifyOptions};

fn main() -> tokencast::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "nowcast_example".into()));
    let sampling: Sampling = args.next().as_deref().unwrap_or("multinomial").parse()?;

    let spec = SynthSpec::default();
    let data: Vec<_> = (0..41u64)
        .map(|seed| generate_sequence(&SynthSpec { seed, ..spec.clone() }))
        .collect::<Result<_, _>>()?;
    let (train, held_out) = data.split_at(40);

    let tok_schedule = TokenizerSchedule {
        steps: 300,
        batch_size: 8,
        revive_dead_after: Some(50),
        ..Default::default()
    };
    let tok = train_tokenizer(train, &TokenizerConfig::default(), &tok_schedule, |_| {})?.tokenizer;
    let tok_path = out.join("tokenizer.st");
    let tok_hash = tok.save(&tok_path)?;

    let config = ForecasterConfig {
        n_layers: 2,
        embed_dim: 64,
        ..Default::default()
    };
    let tokens = TokenDataset::encode(&tok, &tok_hash, train)?;
    let fc_schedule = ForecasterSchedule {
        steps: 300,
        eval_every: 0,
        ..Default::default()
    };
    let fc = train_forecaster(&tokens, None, &config, &fc_schedule, |_| {})?.forecaster;
    let fc_path = out.join("forecaster.st");
    fc.save(&fc_path)?;

    let pipeline = Pipeline::load(&tok_path, &fc_path, false)?;
    let seq = &held_out[0];
    let t = config.context_frames - 1;
    let lead_steps = 3;
    let req = NowcastRequest {
        context: seq.window(0, t)?,
        lead_steps,
        n_members: 8,
        sampling,
        seed: 1,
    };
    let ens = pipeline.nowcast(&req)?;
    ens.write(&out.join("nowcast"), &req, &pipeline)?;

    let observed = seq.window(t, lead_steps)?.into_frames();
    let members: Vec<_> = ens.members.iter().map(|m| m.frames.clone()).collect();
    let report = verify_ensemble(
        &observed,
        &members,
        Some(&seq.frames()[t - 1]),
        seq.timestep_minutes,
        &PreprocessSpec::default(),
        &VerifyOptions::default(),
    )?;
    print!("{}", report.to_text());

    let mut frames = observed.clone();
    frames.extend(ens.members[0].frames.iter().cloned());
    let titles: Vec<String> = (1..=lead_steps)
        .map(|i| format!("obs +{i}"))
        .chain((1..=lead_steps).map(|i| format!("m0 +{i}")))
        .collect();
    plot_frames(&frames, &titles, &out.join("frames.svg"), 4)?;
    plot_report(&report, &out.join("report.svg"))?;
    println!("figures in {}", out.display());
    Ok(())
}
