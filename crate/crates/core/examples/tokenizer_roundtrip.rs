//! Train a small tokenizer for a few hundred steps and measure reconstruction.

use tokencast::synth::{generate_sequence, SynthSpec};
use tokencast::tokenizer::{
    codebook_utilization, compression_ratio, evaluate_reconstruction, train_tokenizer, TokenizerConfig,
    TokenizerSchedule,
};
use tokencast::verify::continuous_scores;

fn main() -> tokencast::Result<()> {
    let spec = SynthSpec::default();
    let data: Vec<_> = (0..40u64)
        .map(|seed| generate_sequence(&SynthSpec { seed, ..spec.clone() }))
        .collect::<Result<_, _>>()?;
    let (train, val) = data.split_at(32);

    let config = TokenizerConfig::default();
    println!("compression ratio on 64x64: {:.1}", compression_ratio(&config, (64, 64), 601)?);
    let schedule = TokenizerSchedule {
        steps: 300,
        batch_size: 8,
        revive_dead_after: Some(50),
        ..Default::default()
    };
    let run = train_tokenizer(train, &config, &schedule, |r| {
        if r.step % 100 == 0 {
            println!("step {:4}  recon {:.5}  batch util {:.2}", r.step, r.recon, r.batch_utilization);
        }
    })?;
    let tok = run.tokenizer;
    let frames: Vec<_> = val.iter().flat_map(|s| s.frames()).collect();
    let eval = evaluate_reconstruction(&tok, &frames)?;
    println!("held-out MAE {:.2} dBZ, MWAE {:.5}", eval.mae_dbz, eval.mwae);
    println!("codebook utilization {:.2}", codebook_utilization(&tok, train)?);

    let f = &val[0].frames()[6];
    let grid = tok.encode(f)?;
    let back = tok.decode(&grid)?;
    let s = continuous_scores(&f.values, &back.values)?;
    println!("one frame: {:?} tokens, SSIM {:.3}", grid.shape(), s.ssim);
    Ok(())
}
