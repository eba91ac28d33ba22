//! Generate a small synthetic radar dataset and print its split assignment.
//!
//! cargo run --example synth_dataset -- /tmp/synth 20

use tokencast::synth::{generate_dataset, Split, SynthSpec};

fn main() -> tokencast::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "synth_data".into());
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let manifest = generate_dataset(&SynthSpec::default(), n, &out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split}: {} sequences", manifest.split(split).count());
    }
    let seq = manifest.load_split(Split::Train)?.into_iter().next();
    if let Some(seq) = seq {
        let peak = seq.frames().iter().flat_map(|f| f.values.iter()).copied().fold(0.0f32, f32::max);
        println!("first train sequence: {} frames of {:?}, peak {peak:.1} dBZ", seq.len(), seq.frame_shape());
    }
    Ok(())
}
