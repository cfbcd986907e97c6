//! Network joining: master-AP choice, pilot assignment, and the statistics of
//! the MMSE channel estimate.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::complex_normal;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Master AP and pilot of every UE. Indices are zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotPlan {
    pub masters: Vec<usize>,
    pub pilots: Vec<usize>,
    /// UEs sharing each pilot, in join order.
    pub sharing_sets: Vec<Vec<usize>>,
    pub tau_p: usize,
}

impl PilotPlan {
    /// Selects masters and assigns pilots for every UE of `beta` (`L x K`).
    pub fn build<T: Scalar>(beta: &Matrix<T>, tau_p: usize) -> Result<Self> {
        let masters = (0..beta.cols())
            .map(|k| select_master(beta, k))
            .collect::<Result<Vec<_>>>()?;
        assign_pilots(beta, &masters, tau_p)
    }

    pub fn num_ues(&self) -> usize {
        self.masters.len()
    }

    /// UEs on the same pilot as `k`, excluding `k`.
    pub fn co_pilot(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.sharing_sets[self.pilots[k]]
            .iter()
            .copied()
            .filter(move |&i| i != k)
    }

    /// One `ue master pilot` line per UE.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (k, (m, t)) in self.masters.iter().zip(&self.pilots).enumerate() {
            out.push_str(&format!("{k} {m} {t}\n"));
        }
        out
    }
}

/// Uplink pilot-phase parameters. Every UE transmits with the same power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UplinkConfig<T> {
    /// Per-UE uplink power, mW.
    pub eta: T,
    /// Uplink noise power, mW.
    pub sigma_ul2: T,
    pub tau_p: usize,
    pub tau_c: usize,
}

impl<T: Scalar> UplinkConfig<T> {
    pub fn new(eta: T, sigma_ul2: T, tau_p: usize, tau_c: usize) -> Result<Self> {
        if !(eta > T::zero()) {
            return Err(Error::param(format!("uplink power {eta} must be positive")));
        }
        if !(sigma_ul2 > T::zero()) {
            return Err(Error::param(format!("uplink noise {sigma_ul2} must be positive")));
        }
        if tau_p == 0 || tau_p >= tau_c {
            return Err(Error::param(format!("need 0 < tau_p ({tau_p}) < tau_c ({tau_c})")));
        }
        Ok(UplinkConfig {
            eta,
            sigma_ul2,
            tau_p,
            tau_c,
        })
    }

    #[inline]
    pub fn eta(&self, _ue: usize) -> T {
        self.eta
    }
}

/// Strongest AP for UE `k`; the lowest index wins ties.
pub fn select_master<T: Scalar>(beta: &Matrix<T>, k: usize) -> Result<usize> {
    if beta.rows() == 0 || k >= beta.cols() {
        return Err(Error::param(format!(
            "no gains for UE {k} in a {:?} matrix",
            beta.shape()
        )));
    }
    let mut best = 0;
    for l in 1..beta.rows() {
        if beta[(l, k)] > beta[(best, k)] {
            best = l;
        }
    }
    Ok(best)
}

/// Sequential pilot assignment in ascending UE order: each UE takes the pilot
/// whose current sharers are weakest at its master AP (lowest index on ties).
pub fn assign_pilots<T: Scalar>(
    beta: &Matrix<T>,
    masters: &[usize],
    tau_p: usize,
) -> Result<PilotPlan> {
    if tau_p == 0 {
        return Err(Error::param("at least one pilot is required"));
    }
    if masters.len() != beta.cols() {
        return Err(Error::shape(format!(
            "{} masters for {} UEs",
            masters.len(),
            beta.cols()
        )));
    }
    if let Some(&m) = masters.iter().find(|&&m| m >= beta.rows()) {
        return Err(Error::param(format!("master AP {m} out of range")));
    }
    let mut sharing_sets: Vec<Vec<usize>> = vec![Vec::new(); tau_p];
    let mut pilots = Vec::with_capacity(masters.len());
    for (k, &m) in masters.iter().enumerate() {
        let mut best = 0;
        let mut best_load = T::infinity();
        for (t, set) in sharing_sets.iter().enumerate() {
            let load: T = set.iter().map(|&i| beta[(m, i)]).sum();
            if load < best_load {
                best = t;
                best_load = load;
            }
        }
        sharing_sets[best].push(k);
        pilots.push(best);
    }
    Ok(PilotPlan {
        masters: masters.to_vec(),
        pilots,
        sharing_sets,
        tau_p,
    })
}

/// Mean-square per-antenna magnitude of the MMSE estimate, `L x K`.
pub fn compute_gamma<T: Scalar>(
    beta: &Matrix<T>,
    plan: &PilotPlan,
    cfg: &UplinkConfig<T>,
) -> Result<Matrix<T>> {
    if plan.num_ues() != beta.cols() || plan.tau_p != cfg.tau_p {
        return Err(Error::shape("pilot plan does not match gains or config"));
    }
    let tau_p = T::from_usize_lossy(cfg.tau_p);
    Ok(Matrix::from_fn(beta.rows(), beta.cols(), |l, k| {
        let b = beta[(l, k)];
        let load: T = plan.sharing_sets[plan.pilots[k]]
            .iter()
            .map(|&i| cfg.eta(i) * beta[(l, i)])
            .sum();
        tau_p * cfg.eta(k) * b * b / (tau_p * load + cfg.sigma_ul2)
    }))
}

/// Despread pilot observation at one AP: `sqrt(τp) Σ_i sqrt(η_i) h_i + n`,
/// summed over the UEs sharing the pilot.
pub fn despread_observation<T: Scalar>(
    channels: &[&[Complex<T>]],
    etas: &[T],
    tau_p: usize,
    noise: &[Complex<T>],
) -> Vec<Complex<T>> {
    let scale = T::from_usize_lossy(tau_p).sqrt();
    let mut y = noise.to_vec();
    for (h, &eta) in channels.iter().zip(etas) {
        let a = scale * eta.sqrt();
        for (yn, hn) in y.iter_mut().zip(h.iter()) {
            *yn = *yn + hn * a;
        }
    }
    y
}

/// MMSE estimate of one channel from its despread observation.
pub fn mmse_estimate<T: Scalar>(
    y: &[Complex<T>],
    gamma: T,
    beta: T,
    tau_p: usize,
    eta: T,
) -> Vec<Complex<T>> {
    let scale = gamma / ((T::from_usize_lossy(tau_p) * eta).sqrt() * beta);
    y.iter().map(|&v| v * scale).collect()
}

/// Monte-Carlo check of the estimation chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationReport<T> {
    pub gamma: Matrix<T>,
    /// Empirical `E‖ĥ‖² / N`.
    pub empirical: Matrix<T>,
    pub relative_error: Matrix<T>,
    pub max_relative_error: T,
    pub trials: usize,
}

const MC_CHUNKS: usize = 16;

/// Simulates pilot transmission and MMSE estimation `trials` times and compares
/// the empirical estimate energy against γ.
pub fn mc_validate_estimation<T: Scalar, R: Rng + ?Sized>(
    beta: &Matrix<T>,
    plan: &PilotPlan,
    cfg: &UplinkConfig<T>,
    antennas: usize,
    trials: usize,
    rng: &mut R,
) -> Result<EstimationReport<T>> {
    if trials == 0 {
        return Err(Error::param("at least one trial is required"));
    }
    if antennas == 0 {
        return Err(Error::param("at least one antenna is required"));
    }
    let gamma = compute_gamma(beta, plan, cfg)?;
    let (l, k) = beta.shape();
    let seeds: Vec<u64> = (0..MC_CHUNKS).map(|_| rng.random()).collect();
    let partials: Vec<Vec<f64>> = seeds
        .par_iter()
        .enumerate()
        .map(|(c, &seed)| {
            let n = trials / MC_CHUNKS + usize::from(c < trials % MC_CHUNKS);
            let mut chunk_rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = vec![0.0f64; l * k];
            for _ in 0..n {
                estimation_trial(beta, &gamma, plan, cfg, antennas, &mut chunk_rng, |ap, ue, e| {
                    acc[ap * k + ue] += e.as_f64();
                });
            }
            acc
        })
        .collect();
    let mut sums = vec![0.0f64; l * k];
    for part in &partials {
        for (s, p) in sums.iter_mut().zip(part) {
            *s += p;
        }
    }
    let denom = (trials * antennas) as f64;
    let empirical = Matrix::from_fn(l, k, |ap, ue| T::lit(sums[ap * k + ue] / denom));
    let relative_error = Matrix::from_fn(l, k, |ap, ue| {
        let g = gamma[(ap, ue)];
        (empirical[(ap, ue)] - g).abs() / g
    });
    let max_relative_error = relative_error
        .as_slice()
        .iter()
        .fold(T::zero(), |m, &e| m.max(e));
    Ok(EstimationReport {
        gamma,
        empirical,
        relative_error,
        max_relative_error,
        trials,
    })
}

fn estimation_trial<T: Scalar, R: Rng + ?Sized>(
    beta: &Matrix<T>,
    gamma: &Matrix<T>,
    plan: &PilotPlan,
    cfg: &UplinkConfig<T>,
    antennas: usize,
    rng: &mut R,
    mut record: impl FnMut(usize, usize, T),
) {
    let noise_amp = cfg.sigma_ul2.sqrt();
    for ap in 0..beta.rows() {
        for set in plan.sharing_sets.iter().filter(|s| !s.is_empty()) {
            let channels: Vec<Vec<Complex<T>>> = set
                .iter()
                .map(|&i| {
                    let amp = beta[(ap, i)].sqrt();
                    (0..antennas).map(|_| complex_normal::<T, R>(rng) * amp).collect()
                })
                .collect();
            let noise: Vec<Complex<T>> = (0..antennas)
                .map(|_| complex_normal::<T, R>(rng) * noise_amp)
                .collect();
            let refs: Vec<&[Complex<T>]> = channels.iter().map(Vec::as_slice).collect();
            let etas: Vec<T> = set.iter().map(|&i| cfg.eta(i)).collect();
            let y = despread_observation(&refs, &etas, cfg.tau_p, &noise);
            for &ue in set {
                let h_hat = mmse_estimate(&y, gamma[(ap, ue)], beta[(ap, ue)], cfg.tau_p, cfg.eta(ue));
                record(ap, ue, h_hat.iter().map(|c| c.norm_sqr()).sum());
            }
        }
    }
}
