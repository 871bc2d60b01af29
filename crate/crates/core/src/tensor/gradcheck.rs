//! Central-difference gradient checking, always in f64.

use super::graph::{Graph, TensorId};
use super::TensorError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Compare backward gradients against central differences.
///
/// `build` reconstructs the graph from scratch on every evaluation: it gets
/// leaves holding the (possibly perturbed) input values, in the order given,
/// and must return a scalar output. Returns the maximum over all input
/// coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    build: F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let run = |values: &[Vec<f64>], with_grad: bool| -> Result<(Graph<f64>, Vec<TensorId>, TensorId), TensorError> {
        let mut graph = Graph::new();
        let mut ids = Vec::with_capacity(inputs.len());
        for ((shape, _), vals) in inputs.iter().zip(values) {
            ids.push(graph.leaf(vals.clone(), shape, with_grad)?);
        }
        let out = build(&mut graph, &ids)?;
        if graph.numel(out) != 1 {
            return Err(TensorError::NonScalarOutput {
                shape: graph.shape(out).to_vec(),
            });
        }
        Ok((graph, ids, out))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (mut graph, ids, out) = run(&base, true)?;
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, (_, vals))| {
            graph
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; vals.len()])
        })
        .collect();

    let mut worst = 0.0_f64;
    let mut values = base;
    for (i, (_, vals)) in inputs.iter().enumerate() {
        for j in 0..vals.len() {
            let orig = values[i][j];
            values[i][j] = orig + eps;
            let (g_plus, _, out_plus) = run(&values, false)?;
            let f_plus = g_plus.data(out_plus)[0];
            values[i][j] = orig - eps;
            let (g_minus, _, out_minus) = run(&values, false)?;
            let f_minus = g_minus.data(out_minus)[0];
            values[i][j] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// [`grad_check`] over uniform(-1, 1) inputs drawn from a seeded generator.
pub fn grad_check_seeded<F>(
    shapes: &[&[usize]],
    seed: u64,
    eps: f64,
    build: F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
        .iter()
        .map(|shape| {
            let len = shape.iter().product();
            let vals: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (shape.to_vec(), vals)
        })
        .collect();
    grad_check(&inputs, eps, build)
}
