//! Policy-gradient training of the clustering policy.
//!
//! Links are sampled from the policy's Bernoulli outputs, the sampled
//! clustering is scored with the penalized sum-SE objective, and the
//! likelihood-ratio estimate of the objective's gradient is backpropagated
//! through the head and along the whole recurrent chain.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::access::{compute_gamma, PilotPlan, UplinkConfig};
use crate::channel::{large_scale, sample_shadow, shadow_covariance, ShadowModel};
use crate::downlink::{evaluate_clusters, ClusterAssignment, DownlinkConfig};
use crate::error::{Error, Result};
use crate::linalg::{gemv_t_acc, outer_acc, Matrix};
use crate::policy::{
    build_features, forward_trace, order_ues, CellTrace, FeatureNorm, ParamLayout, PolicyParams,
    UeOrdering,
};
use crate::scalar::Scalar;
use crate::scenario::{Scenario, UeDrop};

/// Update rule applied to the gradient estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient ascent, `θ += lr · g`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: T,
    pub lambda: T,
    pub seed: u64,
    /// Subtract the batch-mean reward before weighting the score.
    pub baseline_variance_reduction: bool,
    pub optimizer: Optimizer,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        if !(self.learning_rate > T::zero()) {
            return Err(Error::param("learning rate must be positive"));
        }
        if !(self.lambda >= T::zero()) {
            return Err(Error::param("penalty weight must be non-negative"));
        }
        Ok(())
    }
}

/// Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(num_params: usize) -> Self {
        OptimizerState {
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// Bias-corrected adaptive-moment step in the ascent direction.
pub fn adam_update<T: Scalar>(
    params: &mut PolicyParams<T>,
    grads: &PolicyParams<T>,
    state: &mut OptimizerState<T>,
    lr: T,
) -> Result<()> {
    let n = params.as_slice().len();
    if grads.as_slice().len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape("optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let c1 = one - state.beta1.powi(t);
    let c2 = one - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, &g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p += lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Accumulates `weight · ∇ log P(clusters)` into `grad` from a forward trace.
fn backward<T: Scalar>(
    params: &PolicyParams<T>,
    cells: &[CellTrace<T>],
    clusters: &ClusterAssignment,
    masters: &[usize],
    features: &Matrix<T>,
    weight: T,
    grad: &mut PolicyParams<T>,
) -> Result<()> {
    let layout = params.layout().clone();
    let q = layout.hidden;
    let layers = layout.head_layers();
    let mut dh_next = vec![T::zero(); q];
    let mut dc_next = vec![T::zero(); q];
    let one = T::one();
    for cell in cells.iter().rev() {
        let ue = cell.ue;
        // d/dz of a·log σ(z) + (1-a)·log(1-σ(z)) is a - σ(z).
        let mut delta: Vec<T> = Vec::with_capacity(cell.probs.len());
        for (ap, &p) in cell.probs.iter().enumerate() {
            if ap == masters[ue] {
                delta.push(T::zero());
                continue;
            }
            let on = clusters.is_active(ap, ue);
            // A saturated sigmoid is fine as long as the observed action
            // still has positive probability.
            if !(p >= T::zero() && p <= one) || (on && p == T::zero()) || (!on && p == one) {
                return Err(Error::Numerical(format!(
                    "link (AP {ap}, UE {ue}) has probability {p} but was {}",
                    if on { "active" } else { "inactive" }
                )));
            }
            let a = if on { one } else { T::zero() };
            delta.push(weight * (a - p));
        }
        let mut dh = dh_next.clone();
        for j in (0..layers).rev() {
            let w_spec = layout.head_w(j).clone();
            let b_spec = layout.head_b(j).clone();
            let input = &cell.acts[j];
            outer_acc(grad.slice_of_mut(&w_spec), &delta, input);
            for (gb, &d) in grad.slice_of_mut(&b_spec).iter_mut().zip(&delta) {
                *gb += d;
            }
            let mut d_in = vec![T::zero(); input.len()];
            gemv_t_acc(params.slice_of(&w_spec), &delta, &mut d_in);
            if j > 0 {
                for (d, &a) in d_in.iter_mut().zip(input) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
                delta = d_in;
            } else {
                for (h, d) in dh.iter_mut().zip(d_in) {
                    *h += d;
                }
            }
        }

        let [f, i, o, g] = &cell.gates;
        let mut d_pre: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); q]);
        for n in 0..q {
            let tc = cell.tanh_c[n];
            let dc = dc_next[n] + dh[n] * o[n] * (one - tc * tc);
            d_pre[0][n] = dc * cell.c_prev[n] * f[n] * (one - f[n]);
            d_pre[1][n] = dc * g[n] * i[n] * (one - i[n]);
            d_pre[2][n] = dh[n] * tc * o[n] * (one - o[n]);
            d_pre[3][n] = dc * i[n] * (one - g[n] * g[n]);
            dc_next[n] = dc * f[n];
        }
        let xi = features.row(ue);
        dh_next.iter_mut().for_each(|v| *v = T::zero());
        for (gate, da) in d_pre.iter().enumerate() {
            let w_spec = layout.gate_w(gate).clone();
            let u_spec = layout.gate_u(gate).clone();
            let b_spec = layout.gate_b(gate).clone();
            outer_acc(grad.slice_of_mut(&w_spec), da, xi);
            outer_acc(grad.slice_of_mut(&u_spec), da, &cell.h_prev);
            for (gb, &d) in grad.slice_of_mut(&b_spec).iter_mut().zip(da) {
                *gb += d;
            }
            gemv_t_acc(params.slice_of(&u_spec), da, &mut dh_next);
        }
    }
    Ok(())
}

/// Exact gradient of the log-probability of `clusters` under the policy,
/// master links excluded.
pub fn grad_log_prob<T: Scalar>(
    params: &PolicyParams<T>,
    ordering: &UeOrdering,
    features: &Matrix<T>,
    clusters: &ClusterAssignment,
    masters: &[usize],
) -> Result<PolicyParams<T>> {
    if ordering.is_empty() {
        return Err(Error::param("cannot differentiate an empty chain"));
    }
    if masters.len() != features.rows() || clusters.num_ues() != features.rows() {
        return Err(Error::shape("clusters, masters and features disagree on K"));
    }
    let cells = forward_trace(params, ordering, features)?;
    let mut grad = params.zeros_like();
    backward(params, &cells, clusters, masters, features, T::one(), &mut grad)?;
    Ok(grad)
}

/// Everything the policy and the reward need for one fading realization.
#[derive(Debug, Clone)]
pub struct Episode<T> {
    pub beta: Matrix<T>,
    pub gamma: Matrix<T>,
    pub plan: PilotPlan,
    pub ordering: UeOrdering,
    pub features: Matrix<T>,
}

impl<T: Scalar> Episode<T> {
    pub fn new(
        beta: Matrix<T>,
        drop: &UeDrop<T>,
        ap_order: &[usize],
        uplink: &UplinkConfig<T>,
        norm: &FeatureNorm<T>,
    ) -> Result<Self> {
        let plan = PilotPlan::build(&beta, uplink.tau_p)?;
        let gamma = compute_gamma(&beta, &plan, uplink)?;
        let ordering = order_ues(&beta, &plan.masters, ap_order)?;
        let features = build_features(&beta, drop, norm)?;
        Ok(Episode {
            beta,
            gamma,
            plan,
            ordering,
            features,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats<T> {
    pub mean_reward: T,
    pub mean_se_sum: T,
    pub mean_connections: T,
}

struct Rollout<T> {
    cells: Vec<CellTrace<T>>,
    clusters: ClusterAssignment,
    reward: T,
    se_sum: T,
    connections: usize,
}

/// Score-function gradient estimate of the expected objective over `batch`,
/// without applying it.
pub fn estimate_gradient<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    batch: &[Episode<T>],
    downlink: &DownlinkConfig<T>,
    variance_reduction: bool,
    rng: &mut R,
) -> Result<(PolicyParams<T>, BatchStats<T>)> {
    if batch.is_empty() {
        return Err(Error::param("empty training batch"));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let rollouts: Vec<Rollout<T>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(ep, &seed)| {
            let cells = forward_trace(params, &ep.ordering, &ep.features)?;
            let mut probs = Matrix::zeros(ep.features.rows(), params.num_aps());
            for cell in &cells {
                probs.row_mut(cell.ue).copy_from_slice(&cell.probs);
            }
            let mut elem_rng = ChaCha8Rng::seed_from_u64(seed);
            let (clusters, _) =
                crate::policy::sample_clusters(&probs, &ep.plan.masters, &mut elem_rng);
            let eval = evaluate_clusters(&clusters, &ep.beta, &ep.gamma, &ep.plan, downlink)?;
            Ok(Rollout {
                cells,
                clusters,
                reward: eval.objective,
                se_sum: eval.se_sum,
                connections: eval.connections,
            })
        })
        .collect::<Result<_>>()?;

    let b = T::from_usize_lossy(batch.len());
    let mean_reward = rollouts.iter().map(|r| r.reward).sum::<T>() / b;
    let baseline = if variance_reduction {
        mean_reward
    } else {
        T::zero()
    };
    let grads: Vec<PolicyParams<T>> = rollouts
        .par_iter()
        .zip(batch.par_iter())
        .map(|(r, ep)| {
            let mut g = params.zeros_like();
            let w = r.reward - baseline;
            if w != T::zero() {
                backward(params, &r.cells, &r.clusters, &ep.plan.masters, &ep.features, w, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    for g in &grads {
        total.add_scaled(g, T::one());
    }
    total.scale(T::one() / b);
    let stats = BatchStats {
        mean_reward,
        mean_se_sum: rollouts.iter().map(|r| r.se_sum).sum::<T>() / b,
        mean_connections: T::from_usize_lossy(rollouts.iter().map(|r| r.connections).sum()) / b,
    };
    Ok((total, stats))
}

/// One policy-gradient ascent step on a batch of realizations.
pub fn reinforce_step<T: Scalar, R: Rng + ?Sized>(
    params: &mut PolicyParams<T>,
    opt: &mut OptimizerState<T>,
    batch: &[Episode<T>],
    downlink: &DownlinkConfig<T>,
    tcfg: &TrainConfig<T>,
    rng: &mut R,
) -> Result<BatchStats<T>> {
    let (grad, stats) = estimate_gradient(params, batch, downlink, tcfg.baseline_variance_reduction, rng)?;
    match tcfg.optimizer {
        Optimizer::Adam => adam_update(params, &grad, opt, tcfg.learning_rate)?,
        Optimizer::Sgd => {
            opt.step += 1;
            params.add_scaled(&grad, tcfg.learning_rate);
        }
    }
    Ok(stats)
}

/// Physical configuration shared by training and evaluation.
#[derive(Debug, Clone)]
pub struct Environment<T> {
    pub scenario: Scenario<T>,
    pub shadow: ShadowModel<T>,
    pub carrier_ghz: T,
    pub uplink: UplinkConfig<T>,
    pub downlink: DownlinkConfig<T>,
}

impl<T: Scalar> Environment<T> {
    /// Draws one shadowing realization for `drop` and builds its episode.
    pub fn sample_episode<R: Rng + ?Sized>(
        &self,
        drop: &UeDrop<T>,
        cov: &Matrix<T>,
        norm: &FeatureNorm<T>,
        rng: &mut R,
    ) -> Result<Episode<T>> {
        let shadow = sample_shadow(cov, self.scenario.num_aps(), rng)?;
        let ls = large_scale(&self.scenario, drop, &shadow, self.carrier_ghz)?;
        Episode::new(ls.beta, drop, &self.scenario.ap_order, &self.uplink, norm)
    }

    /// Feature normalization fitted on one shadowing draw per training drop.
    pub fn fit_norm<R: Rng + ?Sized>(&self, drops: &[UeDrop<T>], rng: &mut R) -> Result<FeatureNorm<T>> {
        let mut betas = Vec::with_capacity(drops.len());
        for drop in drops {
            let cov = shadow_covariance(drop, &self.shadow);
            let shadow = sample_shadow(&cov, self.scenario.num_aps(), rng)?;
            betas.push(large_scale(&self.scenario, drop, &shadow, self.carrier_ghz)?.beta);
        }
        FeatureNorm::fit(betas.iter(), self.scenario.area_side)
    }
}

/// Mean training statistics of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats<T> {
    pub epoch: usize,
    pub mean_reward: T,
    pub mean_se_sum: T,
    pub mean_connections: T,
}

pub struct TrainOutcome<T> {
    pub params: PolicyParams<T>,
    pub norm: FeatureNorm<T>,
    pub history: Vec<EpochStats<T>>,
}

/// Trains a fresh policy. `on_epoch` sees the parameters after every epoch.
pub fn train<T: Scalar, R: Rng + ?Sized>(
    env: &Environment<T>,
    drops: &[UeDrop<T>],
    layout: ParamLayout,
    tcfg: &TrainConfig<T>,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochStats<T>, &PolicyParams<T>, &FeatureNorm<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    if drops.is_empty() {
        return Err(Error::param("no training drops"));
    }
    if layout.num_aps != env.scenario.num_aps() {
        return Err(Error::shape("policy layout and scenario disagree on L"));
    }
    let downlink = DownlinkConfig {
        lambda: tcfg.lambda,
        ..env.downlink
    };
    downlink.validate()?;
    let norm = env.fit_norm(drops, rng)?;
    let mut params = PolicyParams::init(layout, rng);
    let mut opt = OptimizerState::new(params.as_slice().len());
    let covariances: Vec<Matrix<T>> = drops
        .iter()
        .map(|d| shadow_covariance(d, &env.shadow))
        .collect();
    let mut order: Vec<usize> = (0..drops.len()).collect();
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        order.shuffle(rng);
        let (mut reward, mut se, mut conn) = (T::zero(), T::zero(), T::zero());
        for &d in &order {
            let batch = (0..tcfg.batch_size)
                .map(|_| env.sample_episode(&drops[d], &covariances[d], &norm, rng))
                .collect::<Result<Vec<_>>>()?;
            let stats = reinforce_step(&mut params, &mut opt, &batch, &downlink, tcfg, rng)?;
            reward += stats.mean_reward;
            se += stats.mean_se_sum;
            conn += stats.mean_connections;
        }
        let n = T::from_usize_lossy(drops.len());
        let stats = EpochStats {
            epoch,
            mean_reward: reward / n,
            mean_se_sum: se / n,
            mean_connections: conn / n,
        };
        log::info!(
            "epoch {epoch}: reward {:.4} se {:.4} connections {:.2}",
            stats.mean_reward,
            stats.mean_se_sum,
            stats.mean_connections
        );
        on_epoch(&stats, &params, &norm)?;
        history.push(stats);
    }
    Ok(TrainOutcome {
        params,
        norm,
        history,
    })
}
