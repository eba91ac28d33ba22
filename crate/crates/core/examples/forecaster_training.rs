//! Train a small forecaster on token grids from a briefly trained tokenizer
//! and compare its held-out cross-entropy with the uniform baseline ln K.

use tokencast::forecaster::{
    evaluate_forecaster, flatten_spatiotemporal, train_forecaster, Forecaster, ForecasterConfig, ForecasterSchedule,
    TokenDataset,
};
use tokencast::synth::{generate_sequence, SynthSpec};
use tokencast::tokenizer::{train_tokenizer, TokenizerConfig, TokenizerSchedule};

fn main() -> tokencast::Result<()> {
    let spec = SynthSpec::default();
    let data: Vec<_> = (0..48u64)
        .map(|seed| generate_sequence(&SynthSpec { seed, ..spec.clone() }))
        .collect::<Result<_, _>>()?;
    let (train, val) = data.split_at(40);

    let tok_schedule = TokenizerSchedule {
        steps: 200,
        batch_size: 8,
        revive_dead_after: Some(50),
        ..Default::default()
    };
    let tok = train_tokenizer(train, &TokenizerConfig::default(), &tok_schedule, |_| {})?.tokenizer;
    let hash = tokencast::checkpoint::sha256_hex(&tok.to_bytes()?);
    let train_tokens = TokenDataset::encode(&tok, &hash, train)?;
    let val_tokens = TokenDataset::encode(&tok, &hash, val)?;

    let config = ForecasterConfig {
        n_layers: 2,
        embed_dim: 64,
        ..Default::default()
    };
    let fresh = Forecaster::new(config.clone(), hash.clone(), 0)?;
    println!("parameters {}", tokencast::nn::Module::param_count(&fresh));
    println!("ln K = {:.3}, untrained held-out CE {:.3}", (config.vocab_size as f64).ln(), evaluate_forecaster(&fresh, &val_tokens, 64, 0)?);

    let schedule = ForecasterSchedule {
        steps: 300,
        eval_every: 100,
        eval_windows: 64,
        ..Default::default()
    };
    let run = train_forecaster(&train_tokens, Some(&val_tokens), &config, &schedule, |r| {
        if let Some(v) = r.val_loss {
            println!("step {:4}  train CE {:.3}  held-out CE {:.3}", r.step + 1, r.loss, v);
        }
    })?;

    // distribution over the first token of frame 4 given three full frames of one crop
    let grids = &val_tokens.sequences[0][..3];
    let crops: Vec<_> = grids
        .iter()
        .map(|g| tokencast::tokenizer::TokenGrid::new(g.indices.slice(ndarray::s![..4, ..4]).to_owned()))
        .collect();
    let ctx = flatten_spatiotemporal(&crops)?;
    let p = run.forecaster.next_token_distribution(&ctx)?;
    let (best, pmax) = p.iter().enumerate().fold((0, 0.0f32), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    println!("most likely next token {best} (p = {pmax:.2})");
    Ok(())
}
