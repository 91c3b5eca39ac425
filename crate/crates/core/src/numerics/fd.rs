//! Central finite differences, the gradient oracle for every analytic
//! backward rule in the crate.

use super::{ParamStore, Tensor};
use crate::error::Result;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i` of `x`.
pub fn central_difference(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Finite-difference gradient of `f` with respect to the parameter `name`,
/// all other parameters held fixed.
pub fn finite_diff_grad(
    f: impl Fn(&ParamStore) -> f64,
    params: &ParamStore,
    name: &str,
    h: f64,
) -> Result<Tensor> {
    let base = params.value(name)?.clone();
    let work = std::cell::RefCell::new(params.clone());
    Ok(central_difference(&base, h, |t| {
        let mut store = work.borrow_mut();
        store.get_mut(name).expect("checked above").value = t.clone();
        f(&store)
    }))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.add(&b.scale(-1.0))?.norm();
    let scale = a.norm().max(b.norm());
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax_axis, Parameter};

    #[test]
    fn square_at_three() {
        let g = central_difference(&Tensor::scalar(3.0), 1e-5, |t| t.item() * t.item());
        assert!((g.item() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn sum_of_softmax_is_flat() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]);
        let g = central_difference(&x, 1e-5, |t| softmax_axis(t, 0).unwrap().sum());
        assert!(g.data().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn perturbs_only_the_named_parameter() {
        let mut s = ParamStore::new();
        s.insert(Parameter::new("a", Tensor::vector(vec![1.0, 2.0]), true));
        s.insert(Parameter::new("b", Tensor::vector(vec![5.0]), true));
        let f = |p: &ParamStore| {
            let a = p.value("a").unwrap().data();
            let b = p.value("b").unwrap().item();
            a[0] * a[1] * b
        };
        let g = finite_diff_grad(f, &s, "a", 1e-5).unwrap();
        assert!((g.data()[0] - 10.0).abs() < 1e-8);
        assert!((g.data()[1] - 5.0).abs() < 1e-8);
    }
}
