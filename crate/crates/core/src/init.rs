use rand::Rng;

use crate::tensor::{ParamId, ParamStore, Tensor};

/// Glorot-uniform weights.
pub(crate) fn glorot(
    store: &mut ParamStore,
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> ParamId {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    store.add(name, Tensor::new(shape, data).expect("weight shape"))
}

pub(crate) fn zeros(store: &mut ParamStore, name: String, len: usize) -> ParamId {
    store.add(name, Tensor::zeros(vec![len]))
}
