//! Finite-difference gradient oracle.
//!
//! Analytic gradients from [`Graph::backward`] are compared element by
//! element against central differences `(f(x+h) − f(x−h)) / 2h` computed
//! from independent forward evaluations. The relative error uses
//! `|a − n| / max(|a|, |n|, 0.01)`, so near-zero gradients are judged on
//! a small absolute scale instead of exploding.

use super::{Graph, ParamStore, Tensor, Var};
use crate::par;

#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_input: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_input.iter().all(|r| r.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.per_input
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(0.01)
}

/// Check the gradient of a scalar-valued tensor function against central
/// finite differences, input by input. `f` must be pure: it is re-run
/// many times on perturbed copies of the inputs.
pub fn grad_check<F, E>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E> + Sync,
    E: From<super::TensorError> + Send,
{
    assert!(step > 0.0, "step must be positive");
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();

    // analytic pass
    let mut g = Graph::new();
    let vars: Vec<Var> = tracked.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss).map_err(E::from)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            g.grad_of(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inputs[i].numel()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, input) in tracked.iter().enumerate() {
        let diffs: Vec<std::result::Result<f64, E>> = par::map_indexed(input.numel(), usize::MAX, |e| {
            let mut xs = tracked.to_vec();
            xs[i].data_mut()[e] += step;
            let plus = eval(&xs)?;
            xs[i].data_mut()[e] -= 2.0 * step;
            let minus = eval(&xs)?;
            Ok((plus - minus) / (2.0 * step))
        });
        let mut worst = InputReport {
            name: format!("input{i}"),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (e, d) in diffs.into_iter().enumerate() {
            let numeric = d?;
            let a = analytic[i][e];
            let err = rel_err(a, numeric);
            if err >= worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = e;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input, tol })
}

/// Gradient check for a loss defined over a whole parameter store, e.g.
/// a full model forward. Every element of every parameter is perturbed.
pub fn grad_check_params<F, E>(
    f: F,
    store: &ParamStore,
    step: f64,
    tol: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &ParamStore) -> std::result::Result<Var, E> + Sync,
    E: From<super::TensorError> + Send,
{
    assert!(step > 0.0, "step must be positive");
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss).map_err(E::from)?;
    let mut grads = store.clone();
    grads.zero_grads();
    g.export_grads(&mut grads);

    let eval = |s: &ParamStore| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out)[0])
    };

    let mut per_input = Vec::with_capacity(store.len());
    for id in store.ids() {
        let numel = store.get(id).numel();
        let diffs: Vec<std::result::Result<f64, E>> = par::map_indexed(numel, usize::MAX, |e| {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[e] += step;
            let plus = eval(&s)?;
            s.get_mut(id).data_mut()[e] -= 2.0 * step;
            let minus = eval(&s)?;
            Ok((plus - minus) / (2.0 * step))
        });
        let analytic = grads.get(id).grad();
        let mut worst = InputReport {
            name: store.name(id).to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (e, d) in diffs.into_iter().enumerate() {
            let numeric = d?;
            let a = analytic.map_or(0.0, |g| g[e]);
            let err = rel_err(a, numeric);
            if err >= worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = e;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Reduction;

    #[test]
    fn polynomial_matches_tightly() {
        // f(x) = sum(x^2) via x·xᵀ on a row vector; analytic grad 2x
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let report = grad_check::<_, crate::tensor::TensorError>(
            |g, vars| {
                let sq = g.matmul_nt(vars[0], vars[0])?;
                Ok(g.sum(sq))
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        // and the analytic values themselves
        let mut g = Graph::new();
        let v = g.leaf(&x.with_grad());
        let sq = g.matmul_nt(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let grad = g.grad_of(v).unwrap();
        assert!((grad[0] - 2.0).abs() < 1e-12 && (grad[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_random_grads() {
        let mut rng = Rng::new(11);
        let a = Tensor::uniform(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(vec![4, 2], 1.0, &mut rng);
        let report = grad_check::<_, crate::tensor::TensorError>(
            |g, vars| {
                let c = g.matmul(vars[0], vars[1])?;
                Ok(g.sum(c))
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn layer_norm_random_grads() {
        let mut rng = Rng::new(5);
        let x = Tensor::uniform(vec![2, 4], 1.0, &mut rng);
        let gamma = Tensor::uniform(vec![4], 1.0, &mut rng);
        let beta = Tensor::uniform(vec![4], 1.0, &mut rng);
        let report = grad_check::<_, crate::tensor::TensorError>(
            |g, vars| {
                let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                // weight the elements so the gradient is not uniform
                let w = g.constant(vec![4, 1], vec![0.3, -1.1, 0.7, 2.0])?;
                let s = g.matmul(y, w)?;
                Ok(g.sum(s))
            },
            &[x, gamma, beta],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gather_random_grads() {
        let mut rng = Rng::new(9);
        let table = Tensor::uniform(vec![5, 3], 1.0, &mut rng);
        let report = grad_check::<_, crate::tensor::TensorError>(
            |g, vars| {
                let rows = g.gather(vars[0], &[0, 2, 2, 4])?;
                let w = g.constant(vec![3, 1], vec![1.0, -0.5, 0.25])?;
                let s = g.matmul(rows, w)?;
                Ok(g.sum(s))
            },
            &[table],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn softmax_nll_chain_grads() {
        let mut rng = Rng::new(3);
        let logits = Tensor::uniform(vec![3, 5], 1.0, &mut rng);
        let report = grad_check::<_, crate::tensor::TensorError>(
            |g, vars| {
                let logp = g.log_softmax(vars[0])?;
                g.nll_loss(logp, &[1, 0, 4], Reduction::Sum, None)
            },
            &[logits],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn masked_softmax_grads() {
        let mut rng = Rng::new(4);
        let logits = Tensor::uniform(vec![2, 4], 1.0, &mut rng);
        let mask = [true, false, true, true, true, true, false, true];
        let report = grad_check::<_, crate::tensor::TensorError>(
            |g, vars| {
                let y = g.softmax_masked(vars[0], Some(&mask))?;
                let w = g.constant(vec![4, 1], vec![0.9, -0.2, 1.4, 0.3])?;
                let s = g.matmul(y, w)?;
                Ok(g.sum(s))
            },
            &[logits],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn relu_and_bias_grads() {
        let mut rng = Rng::new(8);
        // keep pre-activations away from the relu kink
        let mut x = Tensor::uniform(vec![3, 4], 1.0, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let b = Tensor::uniform(vec![4], 1.0, &mut rng);
        let report = grad_check::<_, crate::tensor::TensorError>(
            |g, vars| {
                let y = g.add_row(vars[0], vars[1])?;
                let r = g.relu(y);
                Ok(g.sum(r))
            },
            &[x, b],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        // scale claims a factor of 3 but we compare against f = 2x: build
        // the mismatch by checking f(x) = sum(2x) against grads of 3x.
        let x = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(&x.clone().with_grad());
        let y = g.scale(v, 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let analytic = g.grad_of(v).unwrap().to_vec();

        // numeric slope of sum(2x) is 2, analytic above is 3 -> must fail
        let numeric = 2.0;
        for &a in &analytic {
            assert!(rel_err(a, numeric) > 1e-4);
        }
    }
}
