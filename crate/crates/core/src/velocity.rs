//! Kinetic-optimal probability velocities and jump laws.
//!
//! For the metric path the kinetic-energy-minimizing velocity is
//!
//! `u_t(x, z | x1) = p_t(x | x1) * beta'(t) * max{ d(z, x1) - d(x, x1), 0 }`
//!
//! so mass only ever flows to tokens strictly closer to the target; a
//! coordinate that already equals `x1` is absorbing. Mixture schedules have
//! no velocity here and are routed through the sampler's posterior-resampling
//! fallback instead.

use crate::error::{Error, Result};
use crate::schedule::{PathSchedule, EPS_CLAMP};
use crate::vocab::Vocabulary;

/// Per-coordinate jump law: total exit rate and the normalized destination
/// distribution (zero mass on the current token).
#[derive(Debug, Clone)]
pub struct JumpLaw {
    pub total_rate: f64,
    pub target: Vec<f64>,
}

/// Closed-form `d beta / d t = c a t^(a-1) / (1-t)^(a+1)`.
///
/// Diverges at both ends for a < 1; callers clamp t as needed.
pub fn beta_prime(c: f64, a: f64, t: f64) -> f64 {
    c * a * t.powf(a - 1.0) / (1.0 - t).powf(a + 1.0)
}

fn metric_parts<'a>(
    schedule: &'a PathSchedule,
    t: f64,
) -> Result<(f64, f64, &'a crate::vocab::DistanceMatrix)> {
    match schedule {
        PathSchedule::Metric { c, a, distances } => {
            if !(0.0..=1.0 - EPS_CLAMP + 1e-15).contains(&t) {
                return Err(Error::Domain(format!(
                    "velocity time {t} outside [0, 1 - {EPS_CLAMP}]"
                )));
            }
            Ok((*c, *a, distances))
        }
        PathSchedule::Mixture { .. } => Err(Error::Unsupported(
            "kinetic-optimal velocity is defined for metric schedules only".into(),
        )),
    }
}

/// Transition rate from current token `z` into token `x`, conditioned on `x1`.
pub fn kop_rate(
    schedule: &PathSchedule,
    vocab: &Vocabulary,
    x: usize,
    z: usize,
    x1: usize,
    t: f64,
) -> Result<f64> {
    let (c, a, distances) = metric_parts(schedule, t)?;
    let gap = (distances.get(z, x1) - distances.get(x, x1)).max(0.0);
    if gap == 0.0 {
        return Ok(0.0);
    }
    let p = schedule.conditional_prob(vocab, x, x1, t)?;
    Ok(p * beta_prime(c, a, t) * gap)
}

/// Total exit rate and destination law for the coordinate currently at
/// `current`, given the sampled clean token `x1`.
///
/// The common `beta'(t)` factor is pulled out of the normalization so the
/// target distribution stays well defined even where `beta'` blows up
/// (notably at `t = 0` when `a < 1`); there the exit rate is infinite and the
/// solver jumps with probability one, which is the correct limit.
pub fn jump_law(
    schedule: &PathSchedule,
    vocab: &Vocabulary,
    current: usize,
    x1: usize,
    t: f64,
) -> Result<JumpLaw> {
    let (c, a, distances) = metric_parts(schedule, t)?;
    let k = vocab.size();
    let d_cur = distances.get(current, x1);
    let mut weights = vec![0.0; k];
    let mut total_weight = 0.0;
    if d_cur > 0.0 {
        let row = schedule.conditional_row(vocab, x1, t)?;
        for x in 0..k {
            if x == current {
                continue;
            }
            let gap = d_cur - distances.get(x, x1);
            if gap > 0.0 {
                let w = row[x] * gap;
                weights[x] = w;
                total_weight += w;
            }
        }
    }
    if total_weight <= 0.0 {
        return Ok(JumpLaw { total_rate: 0.0, target: vec![0.0; k] });
    }
    for w in weights.iter_mut() {
        *w /= total_weight;
    }
    Ok(JumpLaw { total_rate: beta_prime(c, a, t) * total_weight, target: weights })
}
