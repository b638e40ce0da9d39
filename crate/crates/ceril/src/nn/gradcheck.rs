//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, TensorId};
use crate::scalar::Scalar;

/// Compare tape gradients of a scalar loss against central differences.
///
/// `build` constructs the loss from leaves holding `inputs`; it is invoked
/// repeatedly on fresh graphs with perturbed inputs. Returns the maximum
/// relative error `|ad - fd| / max(1, |ad|, |fd|)` over every element of
/// every input.
pub fn finite_diff_check<S, F>(build: F, inputs: &[(Vec<usize>, Vec<S>)], h: f64) -> f64
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[TensorId]) -> TensorId,
{
    let eval = |points: &[(Vec<usize>, Vec<S>)]| -> f64 {
        let mut g = Graph::<S>::new();
        let ids: Vec<TensorId> = points
            .iter()
            .map(|(shape, values)| g.leaf(shape, values.clone(), false))
            .collect();
        let loss = build(&mut g, &ids);
        g.value_scalar(loss).to_f64_lossy()
    };

    // Analytic gradients.
    let mut g = Graph::<S>::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(shape, values)| g.leaf(shape, values.clone(), true))
        .collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).expect("gradcheck backward");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let grad = g.grad(id);
            if grad.is_empty() {
                vec![0.0; g.values(id).len()]
            } else {
                grad.iter().map(|v| v.to_f64_lossy()).collect()
            }
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<(Vec<usize>, Vec<S>)> = inputs.to_vec();
    for (which, (_, values)) in inputs.iter().enumerate() {
        for k in 0..values.len() {
            let orig = values[k];
            work[which].1[k] = orig + S::from_f64_lossy(h);
            let plus = eval(&work);
            work[which].1[k] = orig - S::from_f64_lossy(h);
            let minus = eval(&work);
            work[which].1[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let ad = analytic[which][k];
            let rel = (ad - fd).abs() / 1.0f64.max(ad.abs()).max(fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_tanh_composite_f32() {
        let inputs = vec![
            (vec![2, 3], vec![0.3f32, -0.2, 0.5, 0.1, -0.4, 0.2]),
            (vec![3, 2], vec![0.7f32, -0.3, 0.2, 0.6, -0.5, 0.1]),
            (vec![2], vec![0.05f32, -0.08]),
        ];
        let err = finite_diff_check(
            |g, ids| {
                let y = g.dense(ids[0], ids[1], Some(ids[2]));
                let t = g.tanh(y);
                g.mean(t)
            },
            &inputs,
            1e-3,
        );
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn dense_tanh_composite_f64() {
        let inputs = vec![
            (vec![2, 3], vec![0.3f64, -0.2, 0.5, 0.1, -0.4, 0.2]),
            (vec![3, 2], vec![0.7f64, -0.3, 0.2, 0.6, -0.5, 0.1]),
            (vec![2], vec![0.05f64, -0.08]),
        ];
        let err = finite_diff_check(
            |g, ids| {
                let y = g.dense(ids[0], ids[1], Some(ids[2]));
                let t = g.tanh(y);
                g.mean(t)
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-6, "max rel err {err}");
    }
}
