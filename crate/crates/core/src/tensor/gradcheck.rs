//! Central-difference verification of tape gradients.

use rayon::prelude::*;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

fn eval<F: Real, G>(f: &G, xs: &[Tensor<F>]) -> Result<F>
where
    G: Fn(&mut Graph<F>, &[Var]) -> Result<Var> + ?Sized,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let y = f(&mut g, &vars)?;
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    let out = v.item();
    if !out.is_finite() {
        return Err(Error::NonFinite("function value in grad_check".into()));
    }
    Ok(out)
}

/// Function value and tape gradients with respect to every input.
pub fn analytic_grads<F: Real, G>(f: &G, xs: &[Tensor<F>]) -> Result<(F, Vec<Tensor<F>>)>
where
    G: Fn(&mut Graph<F>, &[Var]) -> Result<Var> + ?Sized,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let y = f(&mut g, &vars)?;
    if g.value(y).numel() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", g.value(y).shape())));
    }
    let value = g.value(y).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("function value in grad_check".into()));
    }
    g.backward(y)?;
    let grads = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();
    Ok((value, grads))
}

/// Central-difference gradient with respect to input `which`. Elements are
/// evaluated in parallel; each writes only its own slot.
pub fn numeric_grad<F: Real, G>(f: &G, xs: &[Tensor<F>], which: usize, eps: f64) -> Result<Tensor<F>>
where
    G: Fn(&mut Graph<F>, &[Var]) -> Result<Var> + Sync + ?Sized,
{
    let n = xs[which].numel();
    let e = F::lit(eps);
    let out = (0..n)
        .into_par_iter()
        .map_init(
            || xs.to_vec(),
            |work, i| {
                let orig = xs[which].data()[i];
                work[which].data_mut()[i] = orig + e;
                let plus = eval(f, work);
                work[which].data_mut()[i] = orig - e;
                let minus = eval(f, work);
                work[which].data_mut()[i] = orig;
                Ok((plus? - minus?) / (e + e))
            },
        )
        .collect::<Result<Vec<F>>>()?;
    Tensor::new(xs[which].shape().to_vec(), out)
}

/// `max |a − n| / max(1e-8, |a| + |n|)` over all elements.
pub fn max_rel_error<F: Real>(analytic: &Tensor<F>, numeric: &Tensor<F>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!("grad_check eps must lie in [1e-4, 1e-2], got {eps}")));
    }
    Ok(())
}

/// Maximum relative error between tape and central-difference gradients of a
/// scalar function of one tensor.
pub fn grad_check<F: Real, G>(f: G, x: &Tensor<F>, eps: f64) -> Result<f64>
where
    G: Fn(&mut Graph<F>, Var) -> Result<Var> + Sync,
{
    let errs = grad_check_many(|g: &mut Graph<F>, v: &[Var]| f(g, v[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Per-input maximum relative error for a scalar function of several tensors.
pub fn grad_check_many<F: Real, G>(f: G, xs: &[Tensor<F>], eps: f64) -> Result<Vec<f64>>
where
    G: Fn(&mut Graph<F>, &[Var]) -> Result<Var> + Sync,
{
    check_eps(eps)?;
    let (_, analytic) = analytic_grads(&f, xs)?;
    analytic
        .iter()
        .enumerate()
        .map(|(i, a)| Ok(max_rel_error(a, &numeric_grad(&f, xs, i, eps)?)))
        .collect()
}
