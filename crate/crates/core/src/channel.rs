//! Large-scale fading (3GPP urban microcell path loss plus UE-correlated
//! lognormal shadowing) and i.i.d. Rayleigh small-scale draws.

use std::io::Write;

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::scenario::{Scenario, UeDrop};

/// Carrier range over which the path-loss fit is valid, GHz.
pub const PATH_LOSS_VALID_GHZ: (f64, f64) = (2.0, 6.0);

/// Large-scale fading for one UE drop. All matrices are `L x K`
/// (row = AP, column = UE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargeScaleRealization<T> {
    /// Linear channel gain.
    pub beta: Matrix<T>,
    pub shadow_db: Matrix<T>,
    pub pathloss_db: Matrix<T>,
}

impl<T: Scalar> LargeScaleRealization<T> {
    /// Wraps a hand-built gain matrix: no shadowing, path loss `-10 log10 β`.
    pub fn from_beta(beta: Matrix<T>) -> Result<Self> {
        if beta.as_slice().iter().any(|&b| !(b > T::zero())) {
            return Err(Error::param("large-scale gains must be positive"));
        }
        let (l, k) = beta.shape();
        Ok(LargeScaleRealization {
            pathloss_db: beta.map(|b| -b.linear_to_db()),
            shadow_db: Matrix::zeros(l, k),
            beta,
        })
    }

    pub fn num_aps(&self) -> usize {
        self.beta.rows()
    }

    pub fn num_ues(&self) -> usize {
        self.beta.cols()
    }

    /// Writes linear β as CSV, one row per AP, one column per UE.
    pub fn write_beta_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.num_ues()).map(|k| format!("ue{k}")).collect();
        writeln!(out, "ap,{}", header.join(","))?;
        for l in 0..self.num_aps() {
            let row: Vec<String> = self.beta.row(l).iter().map(|b| format!("{b:e}")).collect();
            writeln!(out, "{l},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Lognormal shadowing with exponential spatial correlation across UEs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowModel<T> {
    /// Standard deviation, dB.
    pub sigma_sf: T,
    /// Correlation length, meters.
    pub delta_sf: T,
}

impl<T: Scalar> ShadowModel<T> {
    pub fn new(sigma_sf: T, delta_sf: T) -> Result<Self> {
        if !(sigma_sf >= T::zero()) {
            return Err(Error::param(format!("shadowing std {sigma_sf} < 0")));
        }
        if !(delta_sf > T::zero()) {
            return Err(Error::param(format!(
                "correlation length {delta_sf} must be positive"
            )));
        }
        Ok(ShadowModel { sigma_sf, delta_sf })
    }
}

/// Urban-microcell NLoS path loss in dB for distance `d` (m) and carrier `fc` (GHz).
pub fn path_loss_db<T: Scalar>(d: T, fc: T) -> Result<T> {
    if !(d > T::zero()) {
        return Err(Error::Domain(format!("path loss needs d > 0, got {d}")));
    }
    let (lo, hi) = PATH_LOSS_VALID_GHZ;
    if fc < T::lit(lo) || fc > T::lit(hi) {
        log::warn!("carrier {fc} GHz outside the path-loss model range [{lo}, {hi}] GHz");
    }
    Ok(T::lit(36.7) * d.log10() + T::lit(22.7) + T::lit(26.0) * fc.log10())
}

/// `K x K` shadowing covariance in dB²: `σ² · 2^(-d_ij / δ)` over planar UE distances.
pub fn shadow_covariance<T: Scalar>(drop: &UeDrop<T>, model: &ShadowModel<T>) -> Matrix<T> {
    let k = drop.num_ues();
    let var = model.sigma_sf * model.sigma_sf;
    Matrix::from_fn(k, k, |i, j| {
        if i == j {
            var
        } else {
            let d = drop.positions[i].planar_distance(&drop.positions[j]);
            var * T::lit(2.0).powf(-d / model.delta_sf)
        }
    })
}

/// Draws `l` independent rows of correlated dB shadowing from a `K x K` covariance.
pub fn sample_shadow<T: Scalar, R: Rng + ?Sized>(
    cov: &Matrix<T>,
    l: usize,
    rng: &mut R,
) -> Result<Matrix<T>> {
    let k = cov.rows();
    let max_diag = (0..k).fold(T::zero(), |m, i| m.max(cov[(i, i)]));
    let tol = T::lit(1e-10).max(T::epsilon() * max_diag * T::from_usize_lossy(4 * k.max(1)));
    let factor = cov.cholesky_psd(tol)?;
    let mut out = Matrix::zeros(l, k);
    let mut z = vec![T::zero(); k];
    for ap in 0..l {
        for zi in z.iter_mut() {
            *zi = T::lit(rng.sample::<f64, _>(StandardNormal));
        }
        let row = out.row_mut(ap);
        for (i, r) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (p, &zp) in z.iter().enumerate().take(i + 1) {
                acc += factor[(i, p)] * zp;
            }
            *r = acc;
        }
    }
    Ok(out)
}

/// Combines path loss and shadowing into linear β using 3D distances.
pub fn large_scale<T: Scalar>(
    scenario: &Scenario<T>,
    drop: &UeDrop<T>,
    shadow_db: &Matrix<T>,
    fc: T,
) -> Result<LargeScaleRealization<T>> {
    let (l, k) = (scenario.num_aps(), drop.num_ues());
    if shadow_db.shape() != (l, k) {
        return Err(Error::shape(format!(
            "shadowing is {:?}, scenario needs {l}x{k}",
            shadow_db.shape()
        )));
    }
    let distances = scenario.distances(drop);
    let mut pathloss_db = Matrix::zeros(l, k);
    for (ap, row) in distances.iter().enumerate() {
        for (ue, &d) in row.iter().enumerate() {
            pathloss_db[(ap, ue)] = path_loss_db(d, fc)?;
        }
    }
    let beta = Matrix::from_fn(l, k, |ap, ue| {
        (shadow_db[(ap, ue)] - pathloss_db[(ap, ue)]).db_to_linear()
    });
    Ok(LargeScaleRealization {
        beta,
        shadow_db: shadow_db.clone(),
        pathloss_db,
    })
}

/// One circularly-symmetric complex Gaussian with unit variance.
pub(crate) fn complex_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Complex<T> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(T::lit(re * s), T::lit(im * s))
}

/// Rayleigh channel vectors `sqrt(β) h̃` from every AP to one UE.
pub fn sample_small_scale<T: Scalar, R: Rng + ?Sized>(
    beta_col: &[T],
    antennas: usize,
    rng: &mut R,
) -> Vec<Vec<Complex<T>>> {
    beta_col
        .iter()
        .map(|&b| {
            let amp = b.sqrt();
            (0..antennas)
                .map(|_| complex_normal::<T, R>(rng) * amp)
                .collect()
        })
        .collect()
}
