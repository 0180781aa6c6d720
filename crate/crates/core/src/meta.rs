//! Meta-learning family: MAML-style bilevel optimization, head-only
//! adaptation (ANIL) and the closed-form ridge-regression head (R2D2).
//!
//! Parameters are handled as ordered lists of [`Var`]s. A task exposes a
//! support loss, minimized by the inner loop, and a query loss evaluated at
//! the adapted parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Var};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// A task for bilevel optimization.
pub trait MetaTask<T: Real> {
    fn support_loss(&self, params: &[Var<T>]) -> Result<Var<T>>;
    fn query_loss(&self, params: &[Var<T>]) -> Result<Var<T>>;
}

/// How the meta-gradient differentiates through the inner loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondOrderRoute {
    /// Reverse recursion `v <- v - alpha * H(theta_k) v` with one
    /// Hessian-vector product per inner step. Memory stays at one step.
    #[default]
    HessianVector,
    /// Build the whole inner loop as one differentiable graph.
    Unrolled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner learning rate.
    pub alpha: f64,
    /// Outer learning rate.
    pub beta: f64,
    pub inner_steps: usize,
    #[serde(default)]
    pub first_order: bool,
    #[serde(default)]
    pub route: SecondOrderRoute,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.01,
            beta: 1e-3,
            inner_steps: 5,
            first_order: false,
            route: SecondOrderRoute::HessianVector,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "meta rates must satisfy alpha > 0, beta >= 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn all_finite<T: Real>(grads: &[Option<Var<T>>]) -> bool {
    grads.iter().flatten().all(|g| g.value().all_finite())
}

/// `steps` gradient steps `theta <- theta - alpha * grad L(theta)` on the
/// entries selected by `mask` (all entries when `None`).
///
/// With `create_graph` the result stays differentiable through the
/// gradients themselves (second order). Without it the gradients are
/// treated as constants, which gives the first-order approximation when the
/// result is differentiated.
pub fn inner_adapt<T: Real>(
    params: &[Var<T>],
    loss: &dyn Fn(&[Var<T>]) -> Result<Var<T>>,
    alpha: f64,
    steps: usize,
    create_graph: bool,
    mask: Option<&[bool]>,
) -> Result<Vec<Var<T>>> {
    if let Some(m) = mask {
        assert_eq!(m.len(), params.len(), "mask length must match parameter count");
    }
    let alpha = T::lit(alpha);
    let mut theta = params.to_vec();
    for step in 0..steps {
        let l = loss(&theta)?;
        if !l.item().is_finite() {
            return Err(Error::DivergedInnerLoop { step });
        }
        let active: Vec<usize> = (0..theta.len()).filter(|&i| mask.is_none_or(|m| m[i])).collect();
        let targets: Vec<&Var<T>> = active.iter().map(|&i| &theta[i]).collect();
        let grads = grad(&l, &targets, create_graph);
        if !all_finite(&grads) {
            return Err(Error::DivergedInnerLoop { step });
        }
        let mut next = theta.clone();
        for (&i, g) in active.iter().zip(grads) {
            if let Some(g) = g {
                let g = if create_graph { g } else { g.detach() };
                next[i] = theta[i].sub(&g.scale(alpha));
            }
        }
        theta = next;
    }
    Ok(theta)
}

/// Head-only adaptation: the first `n_body` entries are returned unchanged
/// (the very same variables), the rest follow [`inner_adapt`].
pub fn anil_adapt<T: Real>(
    params: &[Var<T>],
    n_body: usize,
    loss: &dyn Fn(&[Var<T>]) -> Result<Var<T>>,
    alpha: f64,
    steps: usize,
    create_graph: bool,
) -> Result<Vec<Var<T>>> {
    let mask: Vec<bool> = (0..params.len()).map(|i| i >= n_body).collect();
    inner_adapt(params, loss, alpha, steps, create_graph, Some(&mask))
}

/// Result of one meta-gradient evaluation.
#[derive(Clone, Debug)]
pub struct MetaGradient<T: Real> {
    /// Sum of query losses over the task batch.
    pub loss: f64,
    /// Gradient of that sum with respect to every parameter.
    pub grads: Vec<Tensor<T>>,
}

fn to_tensors<T: Real>(grads: Vec<Option<Var<T>>>, like: &[Tensor<T>]) -> Vec<Tensor<T>> {
    grads
        .into_iter()
        .zip(like)
        .map(|(g, t)| g.map_or_else(|| Tensor::zeros(t.shape()), |g| g.value().clone()))
        .collect()
}

fn params_of<T: Real>(ts: &[Tensor<T>]) -> Vec<Var<T>> {
    ts.iter().map(|t| Var::param(t.clone())).collect()
}

fn task_meta_gradient<T: Real>(
    theta: &[Tensor<T>],
    task: &dyn MetaTask<T>,
    cfg: &MetaConfig,
    mask: Option<&[bool]>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let support = |p: &[Var<T>]| task.support_loss(p);
    let route = if cfg.first_order { None } else { Some(cfg.route) };
    match route {
        Some(SecondOrderRoute::Unrolled) | None => {
            let vars = params_of(theta);
            let adapted = inner_adapt(&vars, &support, cfg.alpha, cfg.inner_steps, route.is_some(), mask)?;
            let lq = task.query_loss(&adapted)?;
            let refs: Vec<&Var<T>> = vars.iter().collect();
            Ok((lq.item().to_f64().unwrap_or(f64::NAN), to_tensors(grad(&lq, &refs, false), theta)))
        }
        Some(SecondOrderRoute::HessianVector) => {
            // forward: keep every inner iterate as plain tensors
            let mut iterates = vec![theta.to_vec()];
            for step in 0..cfg.inner_steps {
                let cur = iterates.last().unwrap();
                let vars = params_of(cur);
                let next = inner_adapt(&vars, &support, cfg.alpha, 1, false, mask)
                    .map_err(|_| Error::DivergedInnerLoop { step })?;
                iterates.push(next.iter().map(|v| v.value().clone()).collect());
            }
            let last = params_of(iterates.last().unwrap());
            let lq = task.query_loss(&last)?;
            let refs: Vec<&Var<T>> = last.iter().collect();
            let mut v = to_tensors(grad(&lq, &refs, false), theta);
            let alpha = T::lit(cfg.alpha);
            for k in (0..cfg.inner_steps).rev() {
                let vars = params_of(&iterates[k]);
                let refs: Vec<&Var<T>> = vars.iter().collect();
                let ls = task.support_loss(&vars)?;
                let gs = grad(&ls, &refs, true);
                // u = M v, then H u via the gradient of <grad L, u>
                let mut dot: Option<Var<T>> = None;
                for (i, g) in gs.iter().enumerate() {
                    let (Some(g), true) = (g, mask.is_none_or(|m| m[i])) else {
                        continue;
                    };
                    let term = g.mul(&Var::constant(v[i].clone())).sum();
                    dot = Some(match dot {
                        Some(d) => d.add(&term),
                        None => term,
                    });
                }
                let Some(dot) = dot else { continue };
                let hv = to_tensors(grad(&dot, &refs, false), theta);
                for (vi, hi) in v.iter_mut().zip(&hv) {
                    *vi = vi.zip_map(hi, |a, b| a - alpha * b);
                }
            }
            Ok((lq.item().to_f64().unwrap_or(f64::NAN), v))
        }
    }
}

/// Meta-gradient of the summed query losses of `tasks` at `theta`.
pub fn meta_gradient<T: Real>(
    theta: &[Tensor<T>],
    tasks: &[&dyn MetaTask<T>],
    cfg: &MetaConfig,
    mask: Option<&[bool]>,
) -> Result<MetaGradient<T>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("meta batch is empty".into()));
    }
    let mut total = 0.0;
    let mut acc: Vec<Tensor<T>> = theta.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for task in tasks {
        let (l, g) = task_meta_gradient(theta, *task, cfg, mask)?;
        total += l;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a = a.zip_map(gi, |x, y| x + y);
        }
    }
    if !total.is_finite() || !acc.iter().all(Tensor::all_finite) {
        return Err(Error::DivergedOuterLoop);
    }
    Ok(MetaGradient { loss: total, grads: acc })
}

/// `theta <- theta - beta * meta_gradient`. Returns the summed query loss.
pub fn outer_update<T: Real>(
    theta: &mut ParamStore<T>,
    tasks: &[&dyn MetaTask<T>],
    cfg: &MetaConfig,
    mask: Option<&[bool]>,
) -> Result<f64> {
    let mg = meta_gradient(theta.tensors(), tasks, cfg, mask)?;
    crate::nn::sgd_step(theta, &mg.grads, cfg.beta);
    Ok(mg.loss)
}

/// Closed-form ridge head in the dual form `W = X^T (X X^T + lambda I)^-1 Y`
/// for support embeddings `x: [n, d]` and one-hot targets `y: [n, c]`.
/// `lambda` is a scalar variable so it can be meta-learned.
pub fn r2d2_head<T: Real>(x: &Var<T>, y: &Var<T>, lambda: &Var<T>) -> Result<Var<T>> {
    let n = x.shape()[0];
    if n == 0 || y.shape()[0] != n {
        return Err(Error::Shape(format!(
            "ridge head needs matching non-empty rows, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if lambda.value().data().iter().any(|&l| l < T::zero()) {
        return Err(Error::Parameter("ridge lambda must be >= 0".into()));
    }
    let gram = x.matmul_t(x, false, true);
    let system = gram.add(&Var::constant(Tensor::eye(n)).mul(&lambda.reshape(&[1, 1])));
    let a = system.solve(y, false)?;
    Ok(x.matmul_t(&a, true, false))
}

/// One-hot `[labels.len(), n_classes]` targets.
pub fn one_hot<T: Real>(labels: &[usize], n_classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), n_classes]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * n_classes + l] = T::one();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::no_grad;

    struct Quadratic {
        target: Tensor<f64>,
    }

    impl MetaTask<f64> for Quadratic {
        fn support_loss(&self, p: &[Var<f64>]) -> Result<Var<f64>> {
            let d = p[0].sub(&Var::constant(self.target.clone()));
            Ok(d.mul(&d).sum().scale(0.5))
        }
        fn query_loss(&self, p: &[Var<f64>]) -> Result<Var<f64>> {
            self.support_loss(p)
        }
    }

    #[test]
    fn quadratic_inner_steps_are_exact() {
        let theta = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let task = Quadratic {
            target: Tensor::from_vec(&[3], vec![0.25, 1.0, -1.0]),
        };
        let alpha = 0.3;
        let loss = |p: &[Var<f64>]| task.support_loss(p);
        for steps in [1, 2] {
            let out = inner_adapt(&[Var::param(theta.clone())], &loss, alpha, steps, false, None).unwrap();
            for i in 0..3 {
                let (th, t) = (theta.data()[i], task.target.data()[i]);
                let want = t + (1.0f64 - alpha).powi(steps as i32) * (th - t);
                assert!((out[0].value().data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stationary_point_is_fixed() {
        let t = Tensor::from_vec(&[2], vec![0.7, -0.1]);
        let task = Quadratic { target: t.clone() };
        let loss = |p: &[Var<f64>]| task.support_loss(p);
        let out = inner_adapt(&[Var::param(t.clone())], &loss, 0.5, 4, true, None).unwrap();
        assert_eq!(out[0].value(), &t);
    }

    #[test]
    fn zero_beta_leaves_theta() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let before = store.clone();
        let task = Quadratic {
            target: Tensor::zeros(&[2]),
        };
        let cfg = MetaConfig {
            beta: 0.0,
            ..MetaConfig::default()
        };
        outer_update(&mut store, &[&task], &cfg, None).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn ridge_shrinks_and_interpolates() {
        let x = Var::constant(Tensor::from_vec(&[2, 2], vec![2.0, 1.0, 0.5, 3.0]));
        let y = Var::constant(one_hot::<f64>(&[0, 1], 2));
        let w = no_grad(|| r2d2_head(&x, &y, &Var::constant(Tensor::scalar(0.0)))).unwrap();
        let fit = x.value().matmul(w.value());
        assert!(fit.max_abs_diff(y.value()) < 1e-10);
        let w = r2d2_head(&x, &y, &Var::constant(Tensor::scalar(1e9))).unwrap();
        assert!(w.value().norm() < 1e-6 * x.value().transpose2().matmul(y.value()).norm());
        let singular = Var::constant(Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]));
        assert!(matches!(
            r2d2_head(&singular, &y, &Var::constant(Tensor::scalar(0.0))),
            Err(Error::Singular)
        ));
    }
}
