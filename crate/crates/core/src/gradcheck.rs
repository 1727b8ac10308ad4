//! Central-difference gradient auditing.
//!
//! Both entry points report `max |analytic - numeric| / max(1, |analytic|)`
//! over every coordinate.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::dim(
            "grad_check",
            format!("function output must be scalar, got {:?}", v.shape()),
        ));
    }
    Ok(v.data()[0])
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Audits `f` with respect to free tensor inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let fp = eval(&xs)?;
            xs[k].data_mut()[i] = orig - h;
            let fm = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// Audits `f` with respect to the listed parameters of `store`.
/// Values are restored before returning.
pub fn grad_check_params<F>(store: &mut ParamStore, ids: &[ParamId], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.bound_params()
                .iter()
                .find(|(p, _)| *p == id)
                .and_then(|&(_, v)| g.grad(v).map(|s| s.to_vec()))
                .unwrap_or_else(|| vec![0.0; store.value(id).len()])
        })
        .collect();
    drop(g);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, store)?;
        scalar_of(&g, out)
    };

    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let fp = eval(store);
            store.value_mut(id).data_mut()[i] = orig - h;
            let fm = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[k][i], (fp? - fm?) / (2.0 * h)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.square(v[0]);
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = f(&mut g, &[xv]).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0, 4.0, 6.0]);
        assert!(grad_check(f, &[x], DEFAULT_STEP).unwrap() < 1e-6);
    }

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let x = Tensor::new(&[4], vec![0.3, -1.0, 2.5, 7.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.scale(v[0], 3.0);
                Ok(g.sum(s))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(|_, v| Ok(v[0]), &[x], DEFAULT_STEP).is_err());
    }
}
