//! Downlink power allocation, closed-form SINR under MR precoding, spectral
//! efficiency, and the penalized clustering objective.

use serde::{Deserialize, Serialize};

use crate::access::PilotPlan;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Binary `L x K` service matrix: `is_active(ap, ue)` when AP serves UE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    num_aps: usize,
    num_ues: usize,
    active: Vec<bool>,
}

impl ClusterAssignment {
    pub fn empty(num_aps: usize, num_ues: usize) -> Self {
        ClusterAssignment {
            num_aps,
            num_ues,
            active: vec![false; num_aps * num_ues],
        }
    }

    /// Every AP serves every UE.
    pub fn full(num_aps: usize, num_ues: usize) -> Self {
        ClusterAssignment {
            num_aps,
            num_ues,
            active: vec![true; num_aps * num_ues],
        }
    }

    /// Each UE served by its master AP only.
    pub fn master_only(num_aps: usize, masters: &[usize]) -> Self {
        let mut c = Self::empty(num_aps, masters.len());
        c.force_masters(masters);
        c
    }

    pub fn from_links(num_aps: usize, num_ues: usize, links: &[(usize, usize)]) -> Result<Self> {
        let mut c = Self::empty(num_aps, num_ues);
        for &(ap, ue) in links {
            if ap >= num_aps || ue >= num_ues {
                return Err(Error::param(format!("link ({ap}, {ue}) out of range")));
            }
            c.set(ap, ue, true);
        }
        Ok(c)
    }

    pub fn num_aps(&self) -> usize {
        self.num_aps
    }

    pub fn num_ues(&self) -> usize {
        self.num_ues
    }

    #[inline]
    pub fn is_active(&self, ap: usize, ue: usize) -> bool {
        self.active[ap * self.num_ues + ue]
    }

    #[inline]
    pub fn set(&mut self, ap: usize, ue: usize, on: bool) {
        self.active[ap * self.num_ues + ue] = on;
    }

    pub fn force_masters(&mut self, masters: &[usize]) {
        for (ue, &m) in masters.iter().enumerate() {
            self.set(m, ue, true);
        }
    }

    /// Total number of active AP-UE links.
    pub fn connections(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// APs serving `ue`.
    pub fn serving_aps(&self, ue: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_aps).filter(move |&ap| self.is_active(ap, ue))
    }

    /// UEs served by `ap`.
    pub fn served_ues(&self, ap: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_ues).filter(move |&ue| self.is_active(ap, ue))
    }

    /// Active links in AP-major order.
    pub fn links(&self) -> Vec<(usize, usize)> {
        (0..self.num_aps)
            .flat_map(|ap| self.served_ues(ap).map(move |ue| (ap, ue)))
            .collect()
    }

    /// Fails if some UE has no serving AP.
    pub fn validate(&self) -> Result<()> {
        match (0..self.num_ues).find(|&ue| self.serving_aps(ue).next().is_none()) {
            Some(ue) => Err(Error::Constraint(format!(
                "UE {ue} must be connected to at least one AP"
            ))),
            None => Ok(()),
        }
    }
}

/// Downlink transmit powers, mW, `L x K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation<T> {
    pub rho: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownlinkConfig<T> {
    /// Per-AP power budget, mW.
    pub rho_max: T,
    /// Downlink noise power, mW.
    pub sigma_dl2: T,
    pub antennas: usize,
    pub tau_c: usize,
    pub tau_p: usize,
    pub tau_u: usize,
    /// Objective penalty per active link, bit/s/Hz.
    pub lambda: T,
}

impl<T: Scalar> DownlinkConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.tau_p + self.tau_u >= self.tau_c {
            return Err(Error::param(format!(
                "no data symbols left: tau_c={} tau_p={} tau_u={}",
                self.tau_c, self.tau_p, self.tau_u
            )));
        }
        if !(self.lambda >= T::zero()) {
            return Err(Error::param(format!("penalty weight {} < 0", self.lambda)));
        }
        if !(self.rho_max > T::zero()) || !(self.sigma_dl2 > T::zero()) {
            return Err(Error::param("downlink powers must be positive"));
        }
        if self.antennas == 0 {
            return Err(Error::param("APs need at least one antenna"));
        }
        Ok(())
    }

    pub fn tau_d(&self) -> usize {
        self.tau_c - self.tau_p - self.tau_u
    }

    /// Fraction of the coherence block carrying downlink data.
    pub fn prelog(&self) -> T {
        T::from_usize_lossy(self.tau_d()) / T::from_usize_lossy(self.tau_c)
    }
}

/// Splits each AP's budget over its served UEs proportionally to `sqrt(β)`.
pub fn allocate_power<T: Scalar>(
    beta: &Matrix<T>,
    clusters: &ClusterAssignment,
    rho_max: T,
) -> PowerAllocation<T> {
    let (l, k) = beta.shape();
    let mut rho = Matrix::zeros(l, k);
    for ap in 0..l {
        let total: T = clusters.served_ues(ap).map(|ue| beta[(ap, ue)].sqrt()).sum();
        if total > T::zero() {
            for ue in clusters.served_ues(ap) {
                rho[(ap, ue)] = rho_max * beta[(ap, ue)].sqrt() / total;
            }
        }
    }
    PowerAllocation { rho }
}

/// Effective SINR of UE `k` with MR precoding and MMSE estimates.
#[allow(clippy::too_many_arguments)]
pub fn sinr<T: Scalar>(
    k: usize,
    clusters: &ClusterAssignment,
    power: &PowerAllocation<T>,
    beta: &Matrix<T>,
    gamma: &Matrix<T>,
    plan: &PilotPlan,
    cfg: &DownlinkConfig<T>,
) -> T {
    let rho = &power.rho;
    let n = T::from_usize_lossy(cfg.antennas);
    let coherent: T = clusters
        .serving_aps(k)
        .map(|ap| (rho[(ap, k)] * gamma[(ap, k)]).sqrt())
        .sum();
    let mut interference = T::zero();
    for i in 0..clusters.num_ues() {
        for ap in clusters.serving_aps(i) {
            interference += rho[(ap, i)] * beta[(ap, k)];
        }
    }
    let mut contamination = T::zero();
    for i in plan.co_pilot(k) {
        let s: T = clusters
            .serving_aps(i)
            .map(|ap| (rho[(ap, i)] * gamma[(ap, k)]).sqrt())
            .sum();
        contamination += s * s;
    }
    n * coherent * coherent / (interference + n * contamination + cfg.sigma_dl2)
}

/// Hardening-bound downlink SE in bit/s/Hz.
pub fn spectral_efficiency<T: Scalar>(sinr_value: T, cfg: &DownlinkConfig<T>) -> T {
    cfg.prelog() * (T::one() + sinr_value).log2()
}

/// Per-UE outcome of one cluster configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownlinkEvaluation<T> {
    pub per_ue_se: Vec<T>,
    pub se_sum: T,
    pub connections: usize,
    /// `se_sum - λ · connections`.
    pub objective: T,
}

/// Allocates power, then scores every UE.
pub fn evaluate_clusters<T: Scalar>(
    clusters: &ClusterAssignment,
    beta: &Matrix<T>,
    gamma: &Matrix<T>,
    plan: &PilotPlan,
    cfg: &DownlinkConfig<T>,
) -> Result<DownlinkEvaluation<T>> {
    if clusters.num_aps() != beta.rows() || clusters.num_ues() != beta.cols() {
        return Err(Error::shape(format!(
            "clusters are {}x{}, gains are {:?}",
            clusters.num_aps(),
            clusters.num_ues(),
            beta.shape()
        )));
    }
    if gamma.shape() != beta.shape() || plan.num_ues() != beta.cols() {
        return Err(Error::shape("gamma or pilot plan does not match gains"));
    }
    clusters.validate()?;
    let power = allocate_power(beta, clusters, cfg.rho_max);
    let per_ue_se: Vec<T> = (0..clusters.num_ues())
        .map(|k| spectral_efficiency(sinr(k, clusters, &power, beta, gamma, plan, cfg), cfg))
        .collect();
    let se_sum: T = per_ue_se.iter().copied().sum();
    let connections = clusters.connections();
    Ok(DownlinkEvaluation {
        objective: se_sum - cfg.lambda * T::from_usize_lossy(connections),
        per_ue_se,
        se_sum,
        connections,
    })
}

/// Sum SE minus `λ` per active link.
pub fn objective<T: Scalar>(
    clusters: &ClusterAssignment,
    beta: &Matrix<T>,
    gamma: &Matrix<T>,
    plan: &PilotPlan,
    cfg: &DownlinkConfig<T>,
) -> Result<T> {
    evaluate_clusters(clusters, beta, gamma, plan, cfg).map(|e| e.objective)
}
