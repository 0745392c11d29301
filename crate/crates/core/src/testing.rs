//! Helpers shared by unit and integration tests: seeded random fields,
//! central finite differences and a norm-wise relative error.

use candle_core::{Result as TResult, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::Raster;

pub const FD_STEP: f64 = 1e-5;

pub fn random_raster(height: usize, width: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::from_fn(height, width, |_, _| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(x: &Raster, f: impl Fn(&Raster) -> f64) -> Vec<f64> {
    let mut values = x.values().to_vec();
    let mut grad = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + FD_STEP;
        let up = f(&Raster::generic(x.height(), x.width(), values.clone()).unwrap());
        values[i] = orig - FD_STEP;
        let down = f(&Raster::generic(x.height(), x.width(), values.clone()).unwrap());
        values[i] = orig;
        grad.push((up - down) / (2.0 * FD_STEP));
    }
    grad
}

/// Central-difference gradient of a scalar function of an `f64` tensor.
pub fn tensor_central_difference(x: &Tensor, f: impl Fn(&Tensor) -> TResult<f64>) -> TResult<Vec<f64>> {
    let dims = x.dims().to_vec();
    let mut values: Vec<f64> = x.flatten_all()?.to_vec1()?;
    let mut grad = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + FD_STEP;
        let up = f(&Tensor::from_slice(&values, dims.as_slice(), x.device())?)?;
        values[i] = orig - FD_STEP;
        let down = f(&Tensor::from_slice(&values, dims.as_slice(), x.device())?)?;
        values[i] = orig;
        grad.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
