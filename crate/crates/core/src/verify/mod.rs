//! Verification scores for reconstructions and ensemble nowcasts.
//!
//! Continuous scores and spectra work in dBZ; categorical scores, SAL and the
//! ensemble scores work in rain rate (mm/h).

mod categorical;
mod continuous;
mod ensemble;
mod sal;
mod spectrum;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use categorical::{
    categorical_scores, CategoricalScore, ContingencyTable, DEFAULT_THRESHOLDS_MMH,
};
pub use continuous::{
    continuous_scores, ssim, ContinuousScores, SSIM_DATA_RANGE, SSIM_K1, SSIM_K2, SSIM_SIGMA,
    SSIM_WINDOW,
};
pub use ensemble::{crps, crps_field, kl_from_uniform, rank_histogram, RankHistogram, RankHistogramResult};
pub use sal::{label_components, sal, SalObject, SalScore, DEFAULT_OBJECT_FACTOR, WET_THRESHOLD_MMH};
pub use spectrum::{mean_spectrum, power_spectrum_2d, rapsd, SpectrumResult};

/// JSON has no NaN or infinities; serde_json writes them as `null`, which
/// these read back as NaN so undefined scores survive a round trip.
pub(crate) mod non_finite {
    use serde::{Deserialize, Deserializer};

    pub fn f64<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub fn vec<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|v| v.unwrap_or(f64::NAN))
            .collect())
    }
}

use crate::error::{Error, Result};
use crate::grid::{dbz_to_rainrate, PreprocessSpec, ReflectivityField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    pub thresholds_mmh: Vec<f32>,
    pub sal_object_factor: f64,
    /// Skip pixels where observation and all members are dry (below 0.1 mm/h).
    pub rank_wet_only: bool,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            thresholds_mmh: DEFAULT_THRESHOLDS_MMH.to_vec(),
            sal_object_factor: DEFAULT_OBJECT_FACTOR,
            rank_wet_only: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadReport {
    pub lead_step: usize,
    pub lead_minutes: u32,
    /// Pixel-mean ensemble CRPS in mm/h.
    pub crps: f64,
    /// CRPS of repeating the last observed frame, when supplied.
    pub persistence_crps: Option<f64>,
    pub rank_histogram: RankHistogramResult,
    /// Member-averaged MAE/MSE/SSIM in dBZ.
    pub continuous: ContinuousScores,
    /// Contingency counts pooled over members.
    pub categorical: Vec<CategoricalScore>,
    /// SAL of each member.
    pub sal: Vec<SalScore>,
    pub obs_spectrum: SpectrumResult,
    pub member_spectrum: SpectrumResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub n_members: usize,
    pub leads: Vec<LeadReport>,
}

/// Score an ensemble nowcast against observations.
///
/// `members[i][t]` is member `i` at lead step `t + 1`; `observations[t]` is the
/// verifying frame. `last_observed` enables the persistence baseline.
pub fn verify_ensemble(
    observations: &[ReflectivityField],
    members: &[Vec<ReflectivityField>],
    last_observed: Option<&ReflectivityField>,
    timestep_minutes: u16,
    preprocess: &PreprocessSpec,
    options: &VerifyOptions,
) -> Result<VerificationReport> {
    if members.is_empty() {
        return Err(Error::Empty("no ensemble members"));
    }
    if observations.is_empty() {
        return Err(Error::Empty("no observations"));
    }
    for m in members {
        if m.len() != observations.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![observations.len()],
                found: vec![m.len()],
            });
        }
    }
    let rain = |f: &ReflectivityField| dbz_to_rainrate(f, preprocess).values;
    let persistence = last_observed.map(rain);
    let mut leads = Vec::with_capacity(observations.len());
    for (t, obs) in observations.iter().enumerate() {
        let obs_r = rain(obs);
        let mem_dbz: Vec<_> = members.iter().map(|m| &m[t].values).collect();
        let mem_r: Vec<_> = members.iter().map(|m| rain(&m[t])).collect();
        let mem_r_refs: Vec<_> = mem_r.iter().collect();

        let crps = crps_field(&mem_r_refs, &obs_r)?;
        let persistence_crps = match &persistence {
            Some(p) => Some(crps_field(&[p], &obs_r)?),
            None => None,
        };
        let mut rh = RankHistogram::new(members.len(), options.seed.wrapping_add(t as u64));
        if options.rank_wet_only {
            rh = rh.wet_only(WET_THRESHOLD_MMH);
        }
        rh.add_fields(&mem_r_refs, &obs_r)?;

        let mut cont = ContinuousScores { mae: 0.0, mse: 0.0, ssim: 0.0 };
        for m in &mem_dbz {
            let s = continuous_scores(&obs.values, m)?;
            cont.mae += s.mae / members.len() as f64;
            cont.mse += s.mse / members.len() as f64;
            cont.ssim += s.ssim / members.len() as f64;
        }
        let categorical = options
            .thresholds_mmh
            .iter()
            .map(|&thr| {
                let mut table = ContingencyTable::new(thr);
                for m in &mem_r {
                    table.merge(&ContingencyTable::from_fields(&obs_r, m, thr)?);
                }
                Ok(CategoricalScore::from(table))
            })
            .collect::<Result<Vec<_>>>()?;
        let sal = mem_r
            .iter()
            .map(|m| sal::sal(&obs_r, m, options.sal_object_factor))
            .collect::<Result<Vec<_>>>()?;
        let res = obs.resolution_km as f64;
        let obs_spectrum = rapsd(&obs.values, res)?;
        let spectra = mem_dbz.iter().map(|m| rapsd(m, res)).collect::<Result<Vec<_>>>()?;
        leads.push(LeadReport {
            lead_step: t + 1,
            lead_minutes: (t as u32 + 1) * timestep_minutes as u32,
            crps,
            persistence_crps,
            rank_histogram: rh.result(),
            continuous: cont,
            categorical,
            sal,
            obs_spectrum,
            member_spectrum: mean_spectrum(&spectra).expect("at least one member"),
        });
    }
    Ok(VerificationReport {
        n_members: members.len(),
        leads,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl VerificationReport {
    /// Line-oriented `key value` report, one block per lead time.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "members {}", self.n_members);
        for l in &self.leads {
            let _ = writeln!(s, "[lead {} +{}min]", l.lead_step, l.lead_minutes);
            let _ = writeln!(s, "crps_mmh {:.6}", l.crps);
            if let Some(p) = l.persistence_crps {
                let _ = writeln!(s, "persistence_crps_mmh {p:.6}");
            }
            let _ = writeln!(s, "rank_kl {:.6}", l.rank_histogram.kl_from_uniform);
            let counts: Vec<String> = l.rank_histogram.counts.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "rank_counts {}", counts.join(","));
            let c = l.continuous;
            let _ = writeln!(s, "mae_dbz {:.4}\nmse_dbz {:.4}\nssim {:.4}", c.mae, c.mse, c.ssim);
            for cat in &l.categorical {
                let flag = if cat.no_events { " no_events" } else { "" };
                let _ = writeln!(
                    s,
                    "csi@{} {:.4}\nbias@{} {:.4}{flag}",
                    cat.threshold_mmh, cat.csi, cat.threshold_mmh, cat.bias
                );
            }
            let pick = |f: fn(&SalScore) -> Option<f64>| median(l.sal.iter().filter_map(f).collect());
            let _ = writeln!(
                s,
                "sal_median_s {}\nsal_median_a {}\nsal_median_l {}",
                fmt_opt(pick(|x| x.s)),
                fmt_opt(pick(|x| x.a)),
                fmt_opt(pick(|x| x.l))
            );
        }
        s
    }
}
