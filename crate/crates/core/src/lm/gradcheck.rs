//! Central finite-difference check of backprop gradients.

use rand::Rng;

use super::params::{ParamId, ParamStore};

/// Denominator floor for the relative error, so that two vanishing
/// gradients compare as equal.
pub const REL_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Probe {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Picks `count` probe coordinates: a uniformly random block, then a
/// uniformly random entry inside it.
pub fn random_probes(params: &ParamStore<f64>, count: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let blocks: Vec<(ParamId, usize)> = params
        .iter()
        .filter(|(_, p)| !p.is_empty())
        .map(|(id, p)| (id, p.len()))
        .collect();
    (0..count)
        .map(|_| {
            let (id, len) = blocks[rng.random_range(0..blocks.len())];
            (id, rng.random_range(0..len))
        })
        .collect()
}

/// Compares `analytic` gradients at `probes` with
/// `(loss(θ + h e_i) − loss(θ − h e_i)) / 2h`.
///
/// Relative error is `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn grad_check(
    params: &ParamStore<f64>,
    analytic: &ParamStore<f64>,
    probes: &[(ParamId, usize)],
    step: f64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(probes.len());
    for &(id, index) in probes {
        let orig = work.data(id)[index];
        work.data_mut(id)[index] = orig + step;
        let plus = loss(&work);
        work.data_mut(id)[index] = orig - step;
        let minus = loss(&work);
        work.data_mut(id)[index] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data(id)[index];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        out.push(Probe {
            block: params.get(id).name.clone(),
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = out.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    let max_abs_error = out
        .iter()
        .map(|p| (p.analytic - p.numeric).abs())
        .fold(0.0, f64::max);
    GradCheckReport {
        probes: out,
        max_rel_error,
        max_abs_error,
    }
}
