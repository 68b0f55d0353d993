use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One probed coordinate of a finite-difference check.
#[derive(Clone, Debug)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_relative_error: f64,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar graph with central
/// differences on `probes` seeded coordinates of `param` (all of them when
/// `probes` exceeds the parameter size).
///
/// `build` must construct the whole graph from the store's current values.
pub fn finite_difference_check<F>(
    store: &ParamStore<f64>,
    param: ParamId,
    probes: usize,
    h: f64,
    seed: u64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let mut work = store.clone();
    work.zero_grad();
    let (graph, out) = build(&work)?;
    if graph.value(out).len() != 1 {
        return Err(Error::shape(
            "finite_difference_check",
            format!("output must be scalar, got {:?}", graph.shape(out)),
        ));
    }
    graph.backpropagate(out, Tensor::ones(graph.shape(out)), &mut work)?;
    let analytic = work.grad(param).clone();
    drop(graph);

    let len = analytic.len();
    let mut indices: Vec<usize> = if probes >= len {
        (0..len).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, len, probes).into_vec()
    };
    indices.sort_unstable();

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let (g, v) = build(store)?;
        Ok(g.value(v).data()[0])
    };
    let base = store.value(param).clone();
    let mut report = Vec::with_capacity(indices.len());
    for index in indices {
        let mut plus = base.clone();
        plus.data_mut()[index] += h;
        work.set_value(param, plus)?;
        let f_plus = eval(&work)?;
        let mut minus = base.clone();
        minus.data_mut()[index] -= h;
        work.set_value(param, minus)?;
        let f_minus = eval(&work)?;
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic.data()[index];
        report.push(Probe {
            index,
            analytic: a,
            numeric,
            relative_error: relative_error(a, numeric),
        });
    }
    let max_relative_error = report.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes: report,
        max_relative_error,
    })
}
