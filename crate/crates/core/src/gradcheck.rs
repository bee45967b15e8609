//! Central finite differences as an oracle for [`Graph::backward`].

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::parallel::{self, ExecMode};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(1, |a|, |b|)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// `(f(θ + h) - f(θ - h)) / 2h` for every coordinate of every parameter in
/// `ids`. `f` must be deterministic.
pub fn finite_diff_grad<F>(f: F, store: &ParamStore, ids: &[ParamId], h: f64, mode: ExecMode) -> Gradients
where
    F: Fn(&ParamStore) -> f64 + Sync + Send,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let coords: Vec<(ParamId, usize)> =
        ids.iter().flat_map(|&id| (0..store.value(id).len()).map(move |i| (id, i))).collect();
    let partials = parallel::map_range_init(
        mode,
        coords.len(),
        || store.clone(),
        |local, k| {
            let (id, i) = coords[k];
            let orig = local.value(id).data()[i];
            local.value_mut(id).data_mut()[i] = orig + h;
            let up = f(local);
            local.value_mut(id).data_mut()[i] = orig - h;
            let down = f(local);
            local.value_mut(id).data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        },
    );
    let mut out = Gradients::default();
    let mut offset = 0;
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        let n = store.value(id).len();
        let data = partials[offset..offset + n].to_vec();
        offset += n;
        out.insert(id, Tensor::new(&shape, data).expect("shape of parameter"));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn compare(store: &ParamStore, analytic: &Gradients, numeric: &Gradients) -> GradCheckReport {
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, coordinates: 0 };
    for (id, num) in numeric.iter() {
        let ana = analytic.get_or_zero(store, id);
        for (i, (a, n)) in ana.data().iter().zip(num.data()).enumerate() {
            report.coordinates += 1;
            let e = rel_err(*a, *n);
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    report
}

/// Builds the loss with `build` once on a tape for the analytic gradient and
/// repeatedly (values only) for the finite-difference estimate, then
/// compares them over `ids` (every parameter when `None`).
pub fn check_gradients<F>(
    store: &ParamStore,
    ids: Option<&[ParamId]>,
    h: f64,
    mode: ExecMode,
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var> + Sync + Send,
{
    let all: Vec<ParamId>;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            all = store.ids().collect();
            &all
        }
    };
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    // surface build errors before spawning the perturbation loop
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let loss = build(&mut g)?;
        Ok(g.value(loss).item())
    };
    eval(store)?;
    let numeric = finite_diff_grad(|s| eval(s).expect("loss evaluated once already"), store, ids, h, mode);
    Ok(compare(store, &analytic, &numeric))
}
