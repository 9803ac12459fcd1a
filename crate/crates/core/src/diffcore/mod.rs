//! Numeric substrate: tensors, tape-based reverse-mode differentiation,
//! AdamW and the learning-rate schedule.

mod optim;
mod schedule;
mod tape;
mod tensor;

pub use optim::{AdamState, AdamW, ParamGroup, ParamId, ParamStore, Parameter};
pub use schedule::{lr_schedule, ScheduleConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal encoding of real-valued positions: entry `(p, 2i)` is
/// `sin(p / base^(2i/dim))` and `(p, 2i+1)` the matching cosine.
pub fn sinusoidal_encode<F: Real>(positions: &[f64], dim: usize, base: f64) -> Result<Tensor<F>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal encoding width must be even, got {dim}"
        )));
    }
    if base <= 1.0 {
        return Err(Error::Config(format!("encoding base must exceed 1, got {base}")));
    }
    if positions.is_empty() {
        return Err(Error::Contract("no positions to encode".into()));
    }
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim / 2 {
            let angle = p / base.powf(2.0 * i as f64 / dim as f64);
            data.push(F::of(angle.sin()));
            data.push(F::of(angle.cos()));
        }
    }
    Tensor::new(vec![positions.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero() {
        let e = sinusoidal_encode::<f64>(&[0.0], 8, 10000.0).unwrap();
        for (i, v) in e.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn half_second_width_four() {
        let e = sinusoidal_encode::<f64>(&[0.5], 4, 10000.0).unwrap();
        let want = [0.5f64.sin(), 0.5f64.cos(), 0.005f64.sin(), 0.005f64.cos()];
        for (a, b) in e.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn distinct_offsets_are_separated() {
        let e = sinusoidal_encode::<f64>(&[-0.5, 0.0], 64, 10000.0).unwrap();
        let d: f64 = e
            .row(0)
            .iter()
            .zip(e.row(1))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(d > 0.1, "{d}");
    }

    #[test]
    fn odd_width_is_config_error() {
        assert!(matches!(
            sinusoidal_encode::<f32>(&[0.0], 5, 10000.0),
            Err(Error::Config(_))
        ));
    }
}
