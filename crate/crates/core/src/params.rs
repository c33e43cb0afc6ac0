//! Flat views over trainable tensors, used by the optimizer and the
//! gradient checks.

use ndarray::{ArrayBase, DataMut, Dimension};

/// A bundle of named trainable tensors. A gradient is stored in a value of
/// the same type, so `zeros_like` doubles as the gradient allocator.
pub trait ParamSet {
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    /// Walks parameters alongside a gradient of identical shape.
    fn visit_with(&mut self, grads: &Self, f: &mut dyn FnMut(&str, &mut [f64], &[f64]))
    where
        Self: Sized;

    fn squared_norm(&self) -> f64 {
        let mut total = 0.0;
        self.visit(&mut |_, v| total += v.iter().map(|x| x * x).sum::<f64>());
        total
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x *= factor));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }
}

pub(crate) fn flat<S, D>(a: &ArrayBase<S, D>) -> &[f64]
where
    S: ndarray::Data<Elem = f64>,
    D: Dimension,
{
    a.as_slice().expect("parameters are kept in standard layout")
}

pub(crate) fn flat_mut<S, D>(a: &mut ArrayBase<S, D>) -> &mut [f64]
where
    S: DataMut<Elem = f64>,
    D: Dimension,
{
    a.as_slice_mut().expect("parameters are kept in standard layout")
}
