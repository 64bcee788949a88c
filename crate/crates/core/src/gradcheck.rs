//! Central-difference gradient verification, the project's anti-drift oracle.
//!
//! The numeric side is independent of the tape: it only re-evaluates a loss
//! closure at perturbed parameter values, so it catches a broken backward
//! rule rather than agreeing with it.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Where the largest analytic/numeric disagreement was found.
#[derive(Clone, Debug)]
pub struct WorstCoordinate {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<WorstCoordinate>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

const REL_ERR_FLOOR: f64 = 1e-8;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients against central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` on sampled coordinates.
///
/// Every coordinate of each parameter listed in `mandatory` is checked;
/// `samples` further coordinates are drawn over the remaining parameters.
/// 64-bit evaluation only; `eps` must lie in `[1e-6, 1e-4]`.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    eps: f64,
    samples: usize,
    mandatory: &[usize],
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Vec<f64>]) -> Result<f64>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!(
            "grad_check: eps {eps} outside [1e-6, 1e-4]"
        )));
    }
    if params.len() != analytic.len()
        || params
            .iter()
            .zip(analytic.iter())
            .any(|(p, a)| p.len() != a.len())
    {
        return Err(Error::invalid(
            "grad_check: analytic gradients misaligned with parameters",
        ));
    }
    for (i, &p) in mandatory.iter().enumerate() {
        if p >= params.len() {
            return Err(Error::invalid(format!(
                "grad_check: mandatory entry {i} refers to missing parameter {p}"
            )));
        }
    }

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for &p in mandatory {
        coords.extend((0..params[p].len()).map(|c| (p, c)));
    }
    let optional: Vec<(usize, usize)> = (0..params.len())
        .filter(|p| !mandatory.contains(p))
        .flat_map(|p| (0..params[p].len()).map(move |c| (p, c)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if samples >= optional.len() {
        coords.extend(optional);
    } else {
        // Sample without replacement from the optional coordinate space.
        let mut pool = optional;
        for _ in 0..samples {
            let i = rng.gen_range(0..pool.len());
            coords.push(pool.swap_remove(i));
        }
    }

    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (p, c) in coords {
        let orig = work[p][c];
        work[p][c] = orig + eps;
        let plus = loss_fn(&work)?;
        work[p][c] = orig - eps;
        let minus = loss_fn(&work)?;
        work[p][c] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[p][c];
        let err = rel_err(a, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some(WorstCoordinate {
                param: p,
                coord: c,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}
