use super::params::ParamStore;
use crate::error::Result;
use crate::scalar::Scalar;

/// SGD with classical momentum: `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Momentum<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<ParamStore<T>>,
}

impl<T: Scalar> Momentum<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, momentum, velocity: None }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        params.check_layout(grads)?;
        let v = self.velocity.get_or_insert_with(|| params.zeros_like());
        v.scale(T::lit(self.momentum));
        v.axpy(T::one(), grads)?;
        params.axpy(T::lit(-self.learning_rate), v)
    }
}
