//! Score a displaced and rescaled copy of a synthetic field with every metric.

use ndarray::s;
use tokencast::grid::{dbz_to_rainrate, PreprocessSpec, ReflectivityField};
use tokencast::synth::{generate_sequence, SynthSpec};
use tokencast::verify::{categorical_scores, continuous_scores, crps_field, rapsd, sal, DEFAULT_OBJECT_FACTOR};

fn main() -> tokencast::Result<()> {
    let seq = generate_sequence(&SynthSpec { seed: 3, ..Default::default() })?;
    let obs = &seq.frames()[5];
    // shift the field 3 px right and weaken it by 5 dBZ
    let mut shifted = obs.values.clone();
    shifted.slice_mut(s![.., 3..]).assign(&obs.values.slice(s![.., ..-3]));
    let pred = ReflectivityField::new(shifted.mapv(|v| (v - 5.0).max(0.0)));

    let c = continuous_scores(&obs.values, &pred.values)?;
    println!("MAE {:.2} dBZ  MSE {:.2}  SSIM {:.3}", c.mae, c.mse, c.ssim);

    let pre = PreprocessSpec::default();
    let (ro, rp) = (dbz_to_rainrate(obs, &pre).values, dbz_to_rainrate(&pred, &pre).values);
    for cat in categorical_scores(&ro, &rp, &[1.0, 10.0])? {
        println!("threshold {:>4} mm/h  CSI {:.3}  BIAS {:.3}", cat.threshold_mmh, cat.csi, cat.bias);
    }
    let sal = sal(&ro, &rp, DEFAULT_OBJECT_FACTOR)?;
    println!("SAL  S {:?}  A {:?}  L {:?}", sal.s, sal.a, sal.l);
    println!("CRPS (single member) {:.4} mm/h", crps_field(&[&rp], &ro)?);

    let (so, sp) = (rapsd(&obs.values, 1.0)?, rapsd(&pred.values, 1.0)?);
    for i in [0, 3, 15, 31] {
        println!("wavelength {:5.1} km  obs {:6.1} dB  pred {:6.1} dB", so.wavelengths_km[i], so.power_db[i], sp.power_db[i]);
    }
    Ok(())
}
