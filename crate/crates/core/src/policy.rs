//! Recurrent clustering policy.
//!
//! UEs are grouped by master AP, the groups are visited in the fixed AP
//! scheduling order, and a single LSTM chain runs over the resulting UE
//! sequence. The hidden output of every cell goes through a shared fully
//! connected head whose `L` sigmoid outputs are the probabilities of
//! activating each AP link for that UE.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::downlink::ClusterAssignment;
use crate::error::{Error, Result};
use crate::linalg::{affine, gemv_acc, Matrix};
use crate::scalar::Scalar;
use crate::scenario::UeDrop;

/// Hidden widths of the fully connected head.
pub const DEFAULT_HEAD_WIDTHS: [usize; 2] = [256, 128];

/// LSTM gates in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget,
    Input,
    Output,
    Candidate,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Output, Gate::Candidate];

    fn tag(self) -> &'static str {
        match self {
            Gate::Forget => "f",
            Gate::Input => "i",
            Gate::Output => "o",
            Gate::Candidate => "c",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Shapes and flat offsets of every policy tensor.
///
/// Tensors `3g, 3g+1, 3g+2` are `W`, `U`, `b` of gate `g`; after the twelve
/// gate tensors come `(weight, bias)` pairs of the head layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub hidden: usize,
    pub num_aps: usize,
    pub head_widths: Vec<usize>,
    tensors: Vec<TensorSpec>,
}

impl ParamLayout {
    pub fn new(hidden: usize, num_aps: usize, head_widths: &[usize]) -> Result<Self> {
        if hidden == 0 || num_aps == 0 || head_widths.contains(&0) {
            return Err(Error::param("policy dimensions must be positive"));
        }
        let input = num_aps + 2;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            tensors.push(TensorSpec {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        for g in Gate::ALL {
            push(format!("W_{}", g.tag()), hidden, input);
            push(format!("U_{}", g.tag()), hidden, hidden);
            push(format!("b_{}", g.tag()), hidden, 1);
        }
        let mut fan_in = hidden;
        for (j, &width) in head_widths.iter().chain(std::iter::once(&num_aps)).enumerate() {
            push(format!("fc{j}.weight"), width, fan_in);
            push(format!("fc{j}.bias"), width, 1);
            fan_in = width;
        }
        Ok(ParamLayout {
            hidden,
            num_aps,
            head_widths: head_widths.to_vec(),
            tensors,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.num_aps + 2
    }

    pub fn num_params(&self) -> usize {
        self.tensors.last().map_or(0, |t| t.offset + t.len())
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    /// Number of dense layers in the head, output layer included.
    pub fn head_layers(&self) -> usize {
        self.head_widths.len() + 1
    }

    #[inline]
    pub(crate) fn gate_w(&self, g: usize) -> &TensorSpec {
        &self.tensors[3 * g]
    }

    #[inline]
    pub(crate) fn gate_u(&self, g: usize) -> &TensorSpec {
        &self.tensors[3 * g + 1]
    }

    #[inline]
    pub(crate) fn gate_b(&self, g: usize) -> &TensorSpec {
        &self.tensors[3 * g + 2]
    }

    #[inline]
    pub(crate) fn head_w(&self, j: usize) -> &TensorSpec {
        &self.tensors[12 + 2 * j]
    }

    #[inline]
    pub(crate) fn head_b(&self, j: usize) -> &TensorSpec {
        &self.tensors[13 + 2 * j]
    }
}

/// All policy weights in one flat buffer; gradients share the type.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    layout: ParamLayout,
    data: Vec<T>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(layout: ParamLayout) -> Self {
        let n = layout.num_params();
        PolicyParams {
            layout,
            data: vec![T::zero(); n],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    /// Uniform `±1/sqrt(fan_in)` weights, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(layout: ParamLayout, rng: &mut R) -> Self {
        let mut p = Self::zeros(layout);
        let specs = p.layout.tensors.clone();
        for (idx, spec) in specs.iter().enumerate() {
            let is_bias = if idx < 12 { idx % 3 == 2 } else { (idx - 12) % 2 == 1 };
            let slice = &mut p.data[spec.range()];
            if is_bias {
                let value = if idx == 2 { T::one() } else { T::zero() };
                slice.iter_mut().for_each(|v| *v = value);
            } else {
                let bound = 1.0 / (spec.cols as f64).sqrt();
                for v in slice.iter_mut() {
                    *v = T::lit((2.0 * rng.random::<f64>() - 1.0) * bound);
                }
            }
        }
        p
    }

    pub fn from_flat(layout: ParamLayout, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                data.len(),
                layout.num_params()
            )));
        }
        Ok(PolicyParams { layout, data })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    pub fn num_aps(&self) -> usize {
        self.layout.num_aps
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn tensor(&self, idx: usize) -> &[T] {
        &self.data[self.layout.tensors[idx].range()]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut [T] {
        let r = self.layout.tensors[idx].range();
        &mut self.data[r]
    }

    #[inline]
    pub(crate) fn slice_of(&self, spec: &TensorSpec) -> &[T] {
        &self.data[spec.range()]
    }

    #[inline]
    pub(crate) fn slice_of_mut(&mut self, spec: &TensorSpec) -> &mut [T] {
        &mut self.data[spec.range()]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        debug_assert_eq!(self.layout, other.layout);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Standardization of the dB gains and scaling of positions into the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm<T> {
    pub mean_db: Vec<T>,
    pub std_db: Vec<T>,
    pub area_side: T,
}

impl<T: Scalar> FeatureNorm<T> {
    /// Per-AP mean and standard deviation of `10 log10 β` over every UE of
    /// every training gain matrix.
    pub fn fit<'a>(betas: impl IntoIterator<Item = &'a Matrix<T>>, area_side: T) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for beta in betas {
            if sum.is_empty() {
                sum = vec![0.0; beta.rows()];
                sum_sq = vec![0.0; beta.rows()];
            } else if beta.rows() != sum.len() {
                return Err(Error::shape("training gains disagree on the AP count"));
            }
            for l in 0..beta.rows() {
                for &b in beta.row(l) {
                    let db = b.linear_to_db().as_f64();
                    sum[l] += db;
                    sum_sq[l] += db * db;
                }
            }
            count += beta.cols();
        }
        if count == 0 {
            return Err(Error::param("feature normalization needs training data"));
        }
        if !(area_side > T::zero()) {
            return Err(Error::param("area side must be positive"));
        }
        let n = count as f64;
        let mean_db: Vec<T> = sum.iter().map(|&s| T::lit(s / n)).collect();
        let std_db = sum
            .iter()
            .zip(&sum_sq)
            .map(|(&s, &sq)| {
                let var = (sq / n - (s / n).powi(2)).max(0.0);
                T::lit(var.sqrt().max(1e-6))
            })
            .collect();
        Ok(FeatureNorm {
            mean_db,
            std_db,
            area_side,
        })
    }

    /// Identity standardization (mean 0 dB, std 1 dB).
    pub fn identity(num_aps: usize, area_side: T) -> Self {
        FeatureNorm {
            mean_db: vec![T::zero(); num_aps],
            std_db: vec![T::one(); num_aps],
            area_side,
        }
    }

    pub fn normalize_db(&self, ap: usize, db: T) -> T {
        (db - self.mean_db[ap]) / self.std_db[ap]
    }

    pub fn denormalize_db(&self, ap: usize, z: T) -> T {
        z * self.std_db[ap] + self.mean_db[ap]
    }
}

/// Per-UE input vectors, `K x (L + 2)`, rows indexed by UE.
pub fn build_features<T: Scalar>(
    beta: &Matrix<T>,
    drop: &UeDrop<T>,
    norm: &FeatureNorm<T>,
) -> Result<Matrix<T>> {
    let (l, k) = beta.shape();
    if drop.num_ues() != k || norm.mean_db.len() != l {
        return Err(Error::shape("features: gains, drop and normalization disagree"));
    }
    Ok(Matrix::from_fn(k, l + 2, |ue, j| {
        if j < l {
            norm.normalize_db(j, beta[(j, ue)].linear_to_db())
        } else if j == l {
            drop.positions[ue].x / norm.area_side
        } else {
            drop.positions[ue].y / norm.area_side
        }
    }))
}

/// UE sequence fed to the chain: master-AP subchains in scheduling order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UeOrdering {
    /// `(ap, UEs mastered by ap)` for every AP in scheduling order.
    pub subchains: Vec<(usize, Vec<usize>)>,
}

impl UeOrdering {
    /// Flattened chain order.
    pub fn chain(&self) -> Vec<usize> {
        self.subchains.iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.subchains.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Groups UEs under their master APs in `ap_order`, strongest gain first.
pub fn order_ues<T: Scalar>(
    beta: &Matrix<T>,
    masters: &[usize],
    ap_order: &[usize],
) -> Result<UeOrdering> {
    if masters.len() != beta.cols() {
        return Err(Error::shape("one master per UE required"));
    }
    if let Some(&m) = masters.iter().find(|&&m| m >= beta.rows()) {
        return Err(Error::param(format!("master AP {m} out of range")));
    }
    let subchains = ap_order
        .iter()
        .map(|&ap| {
            let mut ues: Vec<usize> = (0..masters.len()).filter(|&k| masters[k] == ap).collect();
            ues.sort_by(|&a, &b| {
                beta[(ap, b)]
                    .partial_cmp(&beta[(ap, a)])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            (ap, ues)
        })
        .collect::<Vec<_>>();
    let ordering = UeOrdering { subchains };
    if ordering.len() != masters.len() {
        return Err(Error::param("ap_order does not cover every master AP"));
    }
    Ok(ordering)
}

/// Intermediate values of one LSTM cell.
#[derive(Debug, Clone)]
pub(crate) struct CellTrace<T> {
    pub ue: usize,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
    /// Activated gates in `Gate::ALL` order.
    pub gates: [Vec<T>; 4],
    pub tanh_c: Vec<T>,
    /// Inputs of every head layer; `acts[0]` is the cell output.
    pub acts: Vec<Vec<T>>,
    pub probs: Vec<T>,
}

fn cell_forward<T: Scalar>(
    params: &PolicyParams<T>,
    xi: &[T],
    h_prev: &[T],
    c_prev: &[T],
) -> ([Vec<T>; 4], Vec<T>, Vec<T>, Vec<T>) {
    let layout = params.layout();
    let q = layout.hidden;
    let input = layout.input_dim();
    let mut gates: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); q]);
    for (g, out) in gates.iter_mut().enumerate() {
        affine(
            params.slice_of(layout.gate_w(g)),
            input,
            xi,
            params.slice_of(layout.gate_b(g)),
            out,
        );
        gemv_acc(params.slice_of(layout.gate_u(g)), q, h_prev, out);
        if Gate::ALL[g] == Gate::Candidate {
            out.iter_mut().for_each(|v| *v = v.tanh());
        } else {
            out.iter_mut().for_each(|v| *v = v.sigmoid());
        }
    }
    let [f, i, o, cand] = &gates;
    let c: Vec<T> = (0..q).map(|n| f[n] * c_prev[n] + i[n] * cand[n]).collect();
    let tanh_c: Vec<T> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<T> = (0..q).map(|n| o[n] * tanh_c[n]).collect();
    (gates, c, tanh_c, h)
}

/// One LSTM cell: returns `(output, cell state)`.
pub fn lstm_step<T: Scalar>(
    params: &PolicyParams<T>,
    xi: &[T],
    h_prev: &[T],
    c_prev: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let layout = params.layout();
    if xi.len() != layout.input_dim() || h_prev.len() != layout.hidden || c_prev.len() != layout.hidden
    {
        return Err(Error::shape("lstm_step: input or state width mismatch"));
    }
    let (_, c, _, h) = cell_forward(params, xi, h_prev, c_prev);
    Ok((h, c))
}

/// Shared head: ReLU hidden layers, sigmoid output. Returns layer inputs and
/// the output probabilities.
fn head_forward<T: Scalar>(params: &PolicyParams<T>, h: Vec<T>) -> (Vec<Vec<T>>, Vec<T>) {
    let layout = params.layout();
    let layers = layout.head_layers();
    let mut acts = Vec::with_capacity(layers);
    acts.push(h);
    let mut probs = Vec::new();
    for j in 0..layers {
        let w = layout.head_w(j);
        let mut z = vec![T::zero(); w.rows];
        affine(
            params.slice_of(w),
            w.cols,
            acts.last().expect("non-empty"),
            params.slice_of(layout.head_b(j)),
            &mut z,
        );
        if j + 1 < layers {
            z.iter_mut().for_each(|v| *v = v.max(T::zero()));
            acts.push(z);
        } else {
            probs = z.into_iter().map(Scalar::sigmoid).collect();
        }
    }
    (acts, probs)
}

pub(crate) fn forward_trace<T: Scalar>(
    params: &PolicyParams<T>,
    ordering: &UeOrdering,
    features: &Matrix<T>,
) -> Result<Vec<CellTrace<T>>> {
    let layout = params.layout();
    if features.cols() != layout.input_dim() {
        return Err(Error::shape(format!(
            "features have width {}, policy expects {}",
            features.cols(),
            layout.input_dim()
        )));
    }
    let chain = ordering.chain();
    if chain.is_empty() {
        return Err(Error::param("the chain needs at least one UE"));
    }
    if chain.len() != features.rows() || chain.iter().any(|&k| k >= features.rows()) {
        return Err(Error::shape("ordering does not match the feature rows"));
    }
    let q = layout.hidden;
    let mut h = vec![T::zero(); q];
    let mut c = vec![T::zero(); q];
    let mut cells = Vec::with_capacity(chain.len());
    for ue in chain {
        let (gates, c_new, tanh_c, h_new) = cell_forward(params, features.row(ue), &h, &c);
        let (acts, probs) = head_forward(params, h_new.clone());
        cells.push(CellTrace {
            ue,
            h_prev: std::mem::replace(&mut h, h_new),
            c_prev: std::mem::replace(&mut c, c_new),
            gates,
            tanh_c,
            acts,
            probs,
        });
    }
    Ok(cells)
}

/// Link probabilities, `K x L`, rows indexed by UE.
pub fn forward<T: Scalar>(
    params: &PolicyParams<T>,
    ordering: &UeOrdering,
    features: &Matrix<T>,
) -> Result<Matrix<T>> {
    let cells = forward_trace(params, ordering, features)?;
    let mut probs = Matrix::zeros(features.rows(), params.num_aps());
    for cell in cells {
        probs.row_mut(cell.ue).copy_from_slice(&cell.probs);
    }
    Ok(probs)
}

/// Independent Bernoulli draw for every non-master link. Returns the
/// assignment and the log-probability of the free draws.
pub fn sample_clusters<T: Scalar, R: Rng + ?Sized>(
    probs: &Matrix<T>,
    masters: &[usize],
    rng: &mut R,
) -> (ClusterAssignment, T) {
    let (k, l) = probs.shape();
    let mut clusters = ClusterAssignment::empty(l, k);
    let mut log_prob = T::zero();
    for (ue, &m) in masters.iter().enumerate() {
        for ap in 0..l {
            if ap == m {
                clusters.set(ap, ue, true);
                continue;
            }
            let p = probs[(ue, ap)];
            let on = rng.random::<f64>() < p.as_f64();
            clusters.set(ap, ue, on);
            log_prob += if on { p.ln() } else { (T::one() - p).ln() };
        }
    }
    (clusters, log_prob)
}

/// Test-time rule: activate links with probability strictly above one half.
pub fn threshold_clusters<T: Scalar>(probs: &Matrix<T>, masters: &[usize]) -> ClusterAssignment {
    let (k, l) = probs.shape();
    let half = T::lit(0.5);
    let mut clusters = ClusterAssignment::empty(l, k);
    for ue in 0..k {
        for ap in 0..l {
            clusters.set(ap, ue, probs[(ue, ap)] > half);
        }
    }
    clusters.force_masters(masters);
    clusters
}

const CHECKPOINT_FORMAT: &str = "cellfree-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub master_seed: u64,
    pub epochs: usize,
    pub config_hash: String,
}

/// Versioned policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub hidden: usize,
    pub num_aps: usize,
    pub head_widths: Vec<usize>,
    pub tensors: Vec<NamedTensor<T>>,
    pub norm: FeatureNorm<T>,
    pub lineage: Lineage,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(params: &PolicyParams<T>, norm: FeatureNorm<T>, lineage: Lineage) -> Self {
        let layout = params.layout();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            hidden: layout.hidden,
            num_aps: layout.num_aps,
            head_widths: layout.head_widths.clone(),
            tensors: layout
                .tensors()
                .iter()
                .map(|s| NamedTensor {
                    name: s.name.clone(),
                    rows: s.rows,
                    cols: s.cols,
                    values: params.slice_of(s).to_vec(),
                })
                .collect(),
            norm,
            lineage,
        }
    }

    /// Rebuilds the parameters, checking every tensor against the layout.
    pub fn params(&self) -> Result<PolicyParams<T>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let layout = ParamLayout::new(self.hidden, self.num_aps, &self.head_widths)?;
        if layout.tensors().len() != self.tensors.len() {
            return Err(Error::Checkpoint("tensor count mismatch".into()));
        }
        let mut data = Vec::with_capacity(layout.num_params());
        for (spec, t) in layout.tensors().iter().zip(&self.tensors) {
            if spec.name != t.name || spec.rows != t.rows || spec.cols != t.cols || t.values.len() != spec.len()
            {
                return Err(Error::Checkpoint(format!("tensor {} has the wrong shape", t.name)));
            }
            data.extend_from_slice(&t.values);
        }
        if self.norm.mean_db.len() != self.num_aps || self.norm.std_db.len() != self.num_aps {
            return Err(Error::Checkpoint("normalization does not match the AP count".into()));
        }
        PolicyParams::from_flat(layout, data)
    }

    /// Refuses a checkpoint trained for a different number of APs.
    pub fn check_num_aps(&self, num_aps: usize) -> Result<()> {
        if self.num_aps != num_aps {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained for {} APs, scenario has {num_aps}",
                self.num_aps
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}
