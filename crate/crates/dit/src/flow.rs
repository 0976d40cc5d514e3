//! Rectified-flow interpolation, targets and the Euler sampler.

use layered_core::Raster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DitError, Result};
use crate::model::Conditioning;

/// `z_t = (1 − t)·x + t·ε`.
pub fn rf_interpolate(x: &Raster, eps: &Raster, t: f64) -> Result<Raster> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DitError::Input(format!("t must lie in [0, 1], got {t}")));
    }
    x.ensure_same_shape(eps)?;
    let data = x.data().iter().zip(eps.data()).map(|(a, e)| (1.0 - t) * a + t * e).collect();
    Ok(Raster::from_vec(x.width(), x.height(), x.channels(), data)?)
}

/// Velocity target `ε − x`.
pub fn rf_target(x: &Raster, eps: &Raster) -> Result<Raster> {
    x.ensure_same_shape(eps)?;
    let data = x.data().iter().zip(eps.data()).map(|(a, e)| e - a).collect();
    Ok(Raster::from_vec(x.width(), x.height(), x.channels(), data)?)
}

/// Anything that predicts the flow velocity at `(z, t)`.
pub trait VelocityModel {
    fn velocity(&self, z: &Raster, t: f64, cond: &Conditioning) -> Result<Raster>;
}

/// Standard-normal noise of the given shape from a seed.
pub fn seeded_noise(width: usize, height: usize, channels: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::from_fn(width, height, channels, |_, _, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Euler integration from `t = 1` to `t = 0` starting at `noise`, without
/// the final clamp.
pub fn integrate<M: VelocityModel + ?Sized>(model: &M, cond: &Conditioning, steps: usize, noise: &Raster) -> Result<Raster> {
    if steps == 0 {
        return Err(DitError::Input("steps must be at least 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = noise.clone();
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = model.velocity(&z, t, cond)?;
        z.ensure_same_shape(&v)?;
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= dt * vi;
        }
    }
    Ok(z)
}

/// Samples an image and clamps it to `[0, 1]`.
pub fn sample<M: VelocityModel + ?Sized>(model: &M, cond: &Conditioning, steps: usize, noise: &Raster) -> Result<Raster> {
    Ok(integrate(model, cond, steps, noise)?.clamp01())
}
