use super::params::ParamStore;
use super::tape::Matrix;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn` must be deterministic (fixed noise) and return the loss value
/// together with per-block gradients in store order. `max_per_block` limits
/// how many entries of each block are probed (spread evenly); `None`
/// checks all of them.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &ParamStore,
    tolerance: f64,
    max_per_block: Option<usize>,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> (f64, Vec<Matrix>),
{
    let (_, analytic) = loss_fn(params);
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut failures = Vec::new();

    for (k, id) in params.ids().enumerate() {
        let block = params.get(id);
        let n = block.len();
        let stride = match max_per_block {
            Some(limit) if limit > 0 && n > limit => n.div_ceil(limit),
            _ => 1,
        };
        let cols = block.ncols();
        for flat in (0..n).step_by(stride) {
            let (r, c) = (flat / cols, flat % cols);
            let orig = block[[r, c]];
            work.get_mut(id)[[r, c]] = orig + FD_STEP;
            let (plus, _) = loss_fn(&work);
            work.get_mut(id)[[r, c]] = orig - FD_STEP;
            let (minus, _) = loss_fn(&work);
            work.get_mut(id)[[r, c]] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[k][[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
            checked += 1;
            if rel > tolerance {
                failures.push(Mismatch {
                    param: params.name(id).to_string(),
                    index: (r, c),
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }

    GradCheckReport {
        max_rel_error: max_rel,
        checked,
        tolerance,
        failures,
    }
}
