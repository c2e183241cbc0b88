//! Closed-form denoisers used to verify the sampler.

use ndarray::Zip;

use super::{Concurrency, DenoiseError, Denoiser, LatentTensor, NoisePrediction, NoiseSchedule, PredictRequest};

/// Exact noise of a data distribution concentrated on `x0`:
/// `eps = (z - sqrt(a) x0) / sqrt(1 - a)`.
pub fn point_mass_eps(
    x0: &LatentTensor,
    z: &LatentTensor,
    alpha_bar: f64,
) -> Result<NoisePrediction, DenoiseError> {
    if alpha_bar >= 1.0 {
        return Err(DenoiseError::Invalid(
            "point-mass noise is undefined where alpha_bar = 1".into(),
        ));
    }
    check_shape(x0, z)?;
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut out = z.clone();
    Zip::from(out.values_mut()).and(x0.values()).for_each(|e, &x| {
        *e = ((f64::from(*e) - sa * f64::from(x)) / sb) as f32;
    });
    Ok(out)
}

/// Posterior-mean noise for data `N(mu, sigma^2 I)`:
/// `eps = sqrt(1 - a) (z - sqrt(a) mu) / (a sigma^2 + 1 - a)`.
pub fn gaussian_eps(
    mu: &LatentTensor,
    sigma: f64,
    z: &LatentTensor,
    alpha_bar: f64,
) -> Result<NoisePrediction, DenoiseError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DenoiseError::Invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    check_shape(mu, z)?;
    let var = alpha_bar * sigma * sigma + 1.0 - alpha_bar;
    if var <= 0.0 {
        return Err(DenoiseError::Invalid(
            "gaussian noise is undefined with sigma = 0 where alpha_bar = 1".into(),
        ));
    }
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut out = z.clone();
    Zip::from(out.values_mut()).and(mu.values()).for_each(|e, &m| {
        *e = (sb * (f64::from(*e) - sa * f64::from(m)) / var) as f32;
    });
    Ok(out)
}

fn check_shape(reference: &LatentTensor, z: &LatentTensor) -> Result<(), DenoiseError> {
    if reference.shape3() != z.shape3() {
        return Err(DenoiseError::Invalid(format!(
            "latent shape {:?} does not match denoiser shape {:?}",
            z.shape3(),
            reference.shape3()
        )));
    }
    Ok(())
}

/// Ignores the condition and returns the exact noise toward `x0`.
#[derive(Debug, Clone)]
pub struct PointMassDenoiser {
    pub x0: LatentTensor,
    pub schedule: NoiseSchedule,
}

impl PointMassDenoiser {
    pub fn new(x0: LatentTensor, schedule: NoiseSchedule) -> Self {
        Self { x0, schedule }
    }
}

impl Denoiser for PointMassDenoiser {
    fn predict(&self, req: &PredictRequest<'_>) -> Result<NoisePrediction, DenoiseError> {
        point_mass_eps(&self.x0, req.z, self.schedule.alpha_bar(req.t))
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    pub mu: LatentTensor,
    pub sigma: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianDenoiser {
    pub fn new(mu: LatentTensor, sigma: f64, schedule: NoiseSchedule) -> Result<Self, DenoiseError> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(DenoiseError::Invalid(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { mu, sigma, schedule })
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict(&self, req: &PredictRequest<'_>) -> Result<NoisePrediction, DenoiseError> {
        gaussian_eps(&self.mu, self.sigma, req.z, self.schedule.alpha_bar(req.t))
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_zero_at_scaled_target() {
        let x0 = LatentTensor::gaussian([1, 3, 3], 5);
        let a = 0.37f64;
        let mut z = x0.clone();
        z.values_mut().mapv_inplace(|v| (f64::from(v) * a.sqrt()) as f32);
        let eps = point_mass_eps(&x0, &z, a).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-6));
        assert!(point_mass_eps(&x0, &z, 1.0).is_err());
    }

    #[test]
    fn gaussian_limits() {
        let mu = LatentTensor::gaussian([2, 2, 2], 8);
        let z = LatentTensor::gaussian([2, 2, 2], 9);
        let a = 0.6;
        let g = gaussian_eps(&mu, 0.0, &z, a).unwrap();
        let p = point_mass_eps(&mu, &z, a).unwrap();
        assert!(g.max_abs_diff(&p) < 1e-6);
        assert!(gaussian_eps(&mu, -1.0, &z, a).is_err());
        let mut centred = mu.clone();
        centred.values_mut().mapv_inplace(|v| (f64::from(v) * a.sqrt()) as f32);
        assert!(gaussian_eps(&mu, 1.0, &centred, a).unwrap().iter().all(|e| e.abs() < 1e-6));
    }

    #[test]
    fn shape_mismatch_is_invalid() {
        let x0 = LatentTensor::zeros([1, 2, 2]);
        let z = LatentTensor::zeros([1, 2, 3]);
        assert!(matches!(point_mass_eps(&x0, &z, 0.5), Err(DenoiseError::Invalid(_))));
    }
}
