//! Experiment orchestration: configuration, datasets, evaluation, training
//! runs and the files they leave behind.
//!
//! Everything here is concrete in `f64`. Every output file starts with a
//! `# config_hash=... seed=...` line so it can be traced to its inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::access::{compute_gamma, mc_validate_estimation, PilotPlan, UplinkConfig};
use crate::baseline::baseline_clusters;
use crate::channel::{large_scale, sample_shadow, shadow_covariance, ShadowModel};
use crate::downlink::{evaluate_clusters, ClusterAssignment, DownlinkConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policy::{
    build_features, forward, order_ues, threshold_clusters, Checkpoint, Lineage, ParamLayout,
    PolicyParams, DEFAULT_HEAD_WIDTHS,
};
use crate::scalar::Scalar;
use crate::scenario::{place_aps, sample_ue_drop, Point, Scenario, UeDrop};
use crate::training::{
    grad_log_prob, train, Environment, EpochStats, Optimizer, TrainConfig, TrainOutcome,
};

/// Independent generator streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Scenario = 1,
    TrainDrops = 2,
    TestDrops = 3,
    Training = 4,
    Validation = 5,
}

pub fn stream_rng(master_seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalConfig {
    /// Recorded only; every SE is per Hz.
    pub bandwidth_mhz: f64,
    pub carrier_ghz: f64,
    pub tau_c: usize,
    pub tau_p: usize,
    pub tau_u: usize,
    pub noise_ul_dbm: f64,
    pub noise_dl_dbm: f64,
    pub eta_mw: f64,
    pub rho_max_mw: f64,
    pub height_m: f64,
    pub sigma_sf_db: f64,
    pub delta_sf_m: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid_side: usize,
    pub area_side_m: f64,
    pub jitter_fraction: f64,
    pub antennas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_ues: usize,
    pub train_locations: usize,
    pub test_locations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub head_widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub baseline_variance_reduction: bool,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Write an intermediate checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub physical: PhysicalConfig,
    pub scenario: ScenarioConfig,
    pub dataset: DatasetConfig,
    pub policy: PolicyConfig,
    pub training: TrainingConfig,
}

impl ExperimentConfig {
    /// Reference setup: 25 APs, 10 UEs, the given number of pilots.
    pub fn table1(tau_p: usize) -> Self {
        ExperimentConfig {
            seed: 1,
            physical: PhysicalConfig {
                bandwidth_mhz: 20.0,
                carrier_ghz: 2.0,
                tau_c: 200,
                tau_p,
                tau_u: 0,
                noise_ul_dbm: -94.0,
                noise_dl_dbm: -94.0,
                eta_mw: 100.0,
                rho_max_mw: 200.0,
                height_m: 10.0,
                sigma_sf_db: 4.0,
                delta_sf_m: 9.0,
                lambda: 0.04,
            },
            scenario: ScenarioConfig {
                grid_side: 5,
                area_side_m: 700.0,
                jitter_fraction: 0.5,
                antennas: 4,
            },
            dataset: DatasetConfig {
                num_ues: 10,
                train_locations: 1000,
                test_locations: 200,
            },
            policy: PolicyConfig {
                hidden: 512,
                head_widths: DEFAULT_HEAD_WIDTHS.to_vec(),
            },
            training: TrainingConfig {
                epochs: 200,
                batch_size: 64,
                learning_rate: 1e-5,
                baseline_variance_reduction: false,
                optimizer: Optimizer::Adam,
                checkpoint_every: 10,
            },
        }
    }

    /// Desk-scale setup: 9 APs, 4 UEs with orthogonal pilots, a 64-unit LSTM.
    pub fn reduced() -> Self {
        let mut cfg = Self::table1(4);
        cfg.scenario.grid_side = 3;
        cfg.dataset = DatasetConfig {
            num_ues: 4,
            train_locations: 100,
            test_locations: 200,
        };
        cfg.policy.hidden = 64;
        cfg.training = TrainingConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            baseline_variance_reduction: true,
            optimizer: Optimizer::Adam,
            checkpoint_every: 10,
        };
        cfg
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Short SHA-256 digest of the canonical TOML form.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn header(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash(), self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.physical;
        for (name, v) in [
            ("bandwidth_mhz", p.bandwidth_mhz),
            ("carrier_ghz", p.carrier_ghz),
            ("eta_mw", p.eta_mw),
            ("rho_max_mw", p.rho_max_mw),
            ("delta_sf_m", p.delta_sf_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(p.height_m >= 0.0 && p.sigma_sf_db >= 0.0 && p.lambda >= 0.0) {
            return Err(Error::param("height, shadowing deviation and lambda must be non-negative"));
        }
        self.uplink()?;
        self.downlink().validate()?;
        let s = &self.scenario;
        if s.grid_side == 0 || s.antennas == 0 {
            return Err(Error::param("grid_side and antennas must be at least 1"));
        }
        let d = &self.dataset;
        if d.num_ues == 0 || d.train_locations == 0 || d.test_locations == 0 {
            return Err(Error::param("UE count and dataset sizes must be at least 1"));
        }
        self.layout()?;
        self.train_config().validate()
    }

    pub fn num_aps(&self) -> usize {
        self.scenario.grid_side * self.scenario.grid_side
    }

    pub fn uplink(&self) -> Result<UplinkConfig<f64>> {
        let p = &self.physical;
        UplinkConfig::new(p.eta_mw, p.noise_ul_dbm.db_to_linear(), p.tau_p, p.tau_c)
    }

    pub fn downlink(&self) -> DownlinkConfig<f64> {
        let p = &self.physical;
        DownlinkConfig {
            rho_max: p.rho_max_mw,
            sigma_dl2: p.noise_dl_dbm.db_to_linear(),
            antennas: self.scenario.antennas,
            tau_c: p.tau_c,
            tau_p: p.tau_p,
            tau_u: p.tau_u,
            lambda: p.lambda,
        }
    }

    pub fn shadow(&self) -> Result<ShadowModel<f64>> {
        ShadowModel::new(self.physical.sigma_sf_db, self.physical.delta_sf_m)
    }

    pub fn layout(&self) -> Result<ParamLayout> {
        ParamLayout::new(self.policy.hidden, self.num_aps(), &self.policy.head_widths)
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lambda: self.physical.lambda,
            seed: self.seed,
            baseline_variance_reduction: t.baseline_variance_reduction,
            optimizer: t.optimizer,
        }
    }

    pub fn environment(&self, scenario: Scenario<f64>) -> Result<Environment<f64>> {
        Ok(Environment {
            scenario,
            shadow: self.shadow()?,
            carrier_ghz: self.physical.carrier_ghz,
            uplink: self.uplink()?,
            downlink: self.downlink(),
        })
    }

    pub fn build_scenario(&self) -> Result<Scenario<f64>> {
        let s = &self.scenario;
        let mut rng = stream_rng(self.seed, Stream::Scenario);
        Ok(place_aps(s.grid_side, s.area_side_m, s.jitter_fraction, &mut rng)?
            .with_height(self.physical.height_m)?
            .with_antennas(s.antennas)?
            .with_seed(self.seed))
    }
}

/// A held-out location with the shadowing every method is evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestLocation {
    pub drop: UeDrop<f64>,
    pub beta: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub scenario: Scenario<f64>,
    pub train: Vec<UeDrop<f64>>,
    pub test: Vec<TestLocation>,
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let scenario = cfg.build_scenario()?;
        let (k, area) = (cfg.dataset.num_ues, cfg.scenario.area_side_m);
        let mut train_rng = stream_rng(cfg.seed, Stream::TrainDrops);
        let train = (0..cfg.dataset.train_locations)
            .map(|_| sample_ue_drop(k, area, &mut train_rng))
            .collect::<Result<Vec<_>>>()?;
        let shadow = cfg.shadow()?;
        let mut test_rng = stream_rng(cfg.seed, Stream::TestDrops);
        let mut test = Vec::with_capacity(cfg.dataset.test_locations);
        for _ in 0..cfg.dataset.test_locations {
            let drop = sample_ue_drop(k, area, &mut test_rng)?;
            let cov = shadow_covariance(&drop, &shadow);
            let sf = sample_shadow(&cov, scenario.num_aps(), &mut test_rng)?;
            let beta = large_scale(&scenario, &drop, &sf, cfg.physical.carrier_ghz)?.beta;
            test.push(TestLocation { drop, beta });
        }
        Ok(Dataset {
            scenario,
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    Baseline,
    MasterOnly,
    Policy(&'a Checkpoint<f64>),
}

impl Method<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::MasterOnly => "master_only",
            Method::Policy(_) => "policy",
        }
    }
}

/// Builds the plan and the clustering a method picks for one test location.
pub fn cluster_location(
    method: Method<'_>,
    loc: &TestLocation,
    scenario: &Scenario<f64>,
    tau_p: usize,
) -> Result<(PilotPlan, ClusterAssignment)> {
    let plan = PilotPlan::build(&loc.beta, tau_p)?;
    let clusters = match method {
        Method::Baseline => baseline_clusters(&loc.beta, &plan)?,
        Method::MasterOnly => ClusterAssignment::master_only(loc.beta.rows(), &plan.masters),
        Method::Policy(ckpt) => {
            ckpt.check_num_aps(scenario.num_aps())?;
            let params = ckpt.params()?;
            policy_clusters(&params, ckpt, loc, scenario, &plan)?
        }
    };
    Ok((plan, clusters))
}

fn policy_clusters(
    params: &PolicyParams<f64>,
    ckpt: &Checkpoint<f64>,
    loc: &TestLocation,
    scenario: &Scenario<f64>,
    plan: &PilotPlan,
) -> Result<ClusterAssignment> {
    let ordering = order_ues(&loc.beta, &plan.masters, &scenario.ap_order)?;
    let features = build_features(&loc.beta, &loc.drop, &ckpt.norm)?;
    let probs = forward(params, &ordering, &features)?;
    Ok(threshold_clusters(&probs, &plan.masters))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub location: usize,
    pub method: String,
    pub se_sum: f64,
    pub connections: usize,
    pub objective: f64,
    pub per_ue_se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub records: Vec<LocationRecord>,
    pub mean_se_sum: f64,
    pub mean_connections: f64,
    pub mean_objective: f64,
    /// Sorted per-location SE sums paired with their empirical CDF level.
    pub cdf_se_sum: Vec<(f64, f64)>,
    /// Sorted per-UE SEs across all locations with their CDF level.
    pub cdf_per_ue_se: Vec<(f64, f64)>,
}

fn empirical_cdf(mut values: Vec<f64>) -> Vec<(f64, f64)> {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n))
        .collect()
}

impl EvalReport {
    pub fn from_records(method: &str, records: Vec<LocationRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let mean_se_sum = records.iter().map(|r| r.se_sum).sum::<f64>() / n;
        let mean_connections = records.iter().map(|r| r.connections as f64).sum::<f64>() / n;
        let mean_objective = records.iter().map(|r| r.objective).sum::<f64>() / n;
        let cdf_se_sum = empirical_cdf(records.iter().map(|r| r.se_sum).collect());
        let cdf_per_ue_se = empirical_cdf(records.iter().flat_map(|r| r.per_ue_se.iter().copied()).collect());
        EvalReport {
            method: method.to_string(),
            records,
            mean_se_sum,
            mean_connections,
            mean_objective,
            cdf_se_sum,
            cdf_per_ue_se,
        }
    }
}

/// Scores a method on every test location of the dataset.
pub fn evaluate(method: Method<'_>, dataset: &Dataset, cfg: &ExperimentConfig) -> Result<EvalReport> {
    if let Method::Policy(ckpt) = method {
        ckpt.check_num_aps(dataset.scenario.num_aps())?;
        ckpt.params()?;
    }
    let uplink = cfg.uplink()?;
    let downlink = cfg.downlink();
    downlink.validate()?;
    let params = match method {
        Method::Policy(ckpt) => Some(ckpt.params()?),
        _ => None,
    };
    let records = dataset
        .test
        .par_iter()
        .enumerate()
        .map(|(i, loc)| {
            let plan = PilotPlan::build(&loc.beta, uplink.tau_p)?;
            let clusters = match (method, &params) {
                (Method::Policy(ckpt), Some(p)) => policy_clusters(p, ckpt, loc, &dataset.scenario, &plan)?,
                _ => cluster_location(method, loc, &dataset.scenario, uplink.tau_p)?.1,
            };
            let gamma = compute_gamma(&loc.beta, &plan, &uplink)?;
            let eval = evaluate_clusters(&clusters, &loc.beta, &gamma, &plan, &downlink)?;
            Ok(LocationRecord {
                location: i,
                method: method.tag().to_string(),
                se_sum: eval.se_sum,
                connections: eval.connections,
                objective: eval.objective,
                per_ue_se: eval.per_ue_se,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(method.tag(), records))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Columns: `location,method,se_sum,connections,objective,se_ue0,...`.
pub fn write_report_csv(path: &Path, report: &EvalReport, cfg: &ExperimentConfig) -> Result<()> {
    let k = report.records.first().map_or(0, |r| r.per_ue_se.len());
    let mut out = cfg.header();
    out.push_str("\nlocation,method,se_sum,connections,objective");
    for ue in 0..k {
        let _ = write!(out, ",se_ue{ue}");
    }
    out.push('\n');
    for r in &report.records {
        let _ = write!(out, "{},{},{},{},{}", r.location, r.method, r.se_sum, r.connections, r.objective);
        for se in &r.per_ue_se {
            let _ = write!(out, ",{se}");
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Columns: `method,quantity,value,cdf`, where quantity is `se_sum` or `ue_se`.
pub fn write_cdf_csv(path: &Path, reports: &[&EvalReport], cfg: &ExperimentConfig) -> Result<()> {
    let mut out = cfg.header();
    out.push_str("\nmethod,quantity,value,cdf\n");
    for rep in reports {
        for (q, grid) in [("se_sum", &rep.cdf_se_sum), ("ue_se", &rep.cdf_per_ue_se)] {
            for (v, c) in grid.iter() {
                let _ = writeln!(out, "{},{q},{v},{c}", rep.method);
            }
        }
    }
    write_text(path, &out)
}

/// Columns: `method,mean_se_sum,mean_connections,mean_objective,locations`.
pub fn write_summary_csv(path: &Path, reports: &[&EvalReport], cfg: &ExperimentConfig) -> Result<()> {
    let mut out = cfg.header();
    out.push_str("\nmethod,mean_se_sum,mean_connections,mean_objective,locations\n");
    for rep in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            rep.method,
            rep.mean_se_sum,
            rep.mean_connections,
            rep.mean_objective,
            rep.records.len()
        );
    }
    write_text(path, &out)
}

/// Columns: `epoch,mean_reward,mean_se_sum,mean_connections`.
pub fn history_csv(history: &[EpochStats<f64>], cfg: &ExperimentConfig) -> String {
    let mut out = cfg.header();
    out.push_str("\nepoch,mean_reward,mean_se_sum,mean_connections\n");
    for h in history {
        let _ = writeln!(out, "{},{},{},{}", h.epoch, h.mean_reward, h.mean_se_sum, h.mean_connections);
    }
    out
}

pub struct TrainingRun {
    pub outcome: TrainOutcome<f64>,
    pub checkpoint: Checkpoint<f64>,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
}

/// Trains on the dataset's training drops and writes `history.csv`,
/// `checkpoint_epochNNNN.json` every `checkpoint_every` epochs and
/// `checkpoint.json` at the end.
pub fn run_training(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainingRun> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let env = cfg.environment(dataset.scenario.clone())?;
    let tcfg = cfg.train_config();
    let lineage = |epochs| Lineage {
        master_seed: cfg.seed,
        epochs,
        config_hash: cfg.config_hash(),
    };
    let every = cfg.training.checkpoint_every;
    let mut rng = stream_rng(cfg.seed, Stream::Training);
    let outcome = train(&env, &dataset.train, cfg.layout()?, &tcfg, &mut rng, |stats, params, norm| {
        let done = stats.epoch + 1;
        if every > 0 && done % every == 0 && done < tcfg.epochs {
            let path = out_dir.join(format!("checkpoint_epoch{done:04}.json"));
            Checkpoint::new(params, norm.clone(), lineage(done)).save(&path)?;
        }
        Ok(())
    })?;
    let checkpoint = Checkpoint::new(&outcome.params, outcome.norm.clone(), lineage(tcfg.epochs));
    let checkpoint_path = out_dir.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;
    let history_path = out_dir.join("history.csv");
    write_text(&history_path, &history_csv(&outcome.history, cfg))?;
    Ok(TrainingRun {
        outcome,
        checkpoint,
        checkpoint_path,
        history_path,
    })
}

/// Plot-ready picture of one clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionMap {
    pub aps: Vec<Point<f64>>,
    pub ues: Vec<Point<f64>>,
    /// `(ap, ue)` pairs, AP-major.
    pub links: Vec<(usize, usize)>,
}

impl ConnectionMap {
    pub fn new(scenario: &Scenario<f64>, drop: &UeDrop<f64>, clusters: &ClusterAssignment) -> Self {
        ConnectionMap {
            aps: scenario.ap_positions.clone(),
            ues: drop.positions.clone(),
            links: clusters.links(),
        }
    }

    /// `AP x y`, `UE x y` and `LINK ap ue` lines; `#` lines are comments.
    pub fn to_text(&self, header: &str) -> String {
        let mut out = String::new();
        if !header.is_empty() {
            out.push_str(header);
            out.push('\n');
        }
        for p in &self.aps {
            let _ = writeln!(out, "AP {} {}", p.x, p.y);
        }
        for p in &self.ues {
            let _ = writeln!(out, "UE {} {}", p.x, p.y);
        }
        for (ap, ue) in &self.links {
            let _ = writeln!(out, "LINK {ap} {ue}");
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut map = ConnectionMap {
            aps: Vec::new(),
            ues: Vec::new(),
            links: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || format!("line {}: malformed record {line:?}", n + 1);
            match fields.as_slice() {
                ["AP", x, y] | ["UE", x, y] => {
                    let p = Point::new(x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?);
                    if fields[0] == "AP" {
                        map.aps.push(p);
                    } else {
                        map.ues.push(p);
                    }
                }
                ["LINK", ap, ue] => {
                    map.links.push((ap.parse().map_err(|_| bad())?, ue.parse().map_err(|_| bad())?));
                }
                _ => return Err(bad()),
            }
        }
        Ok(map)
    }

    pub fn clusters(&self) -> Result<ClusterAssignment> {
        ClusterAssignment::from_links(self.aps.len(), self.ues.len(), &self.links)
    }
}

pub fn export_connection_map(
    dataset: &Dataset,
    location: usize,
    method: Method<'_>,
    cfg: &ExperimentConfig,
) -> Result<ConnectionMap> {
    let loc = dataset.test.get(location).ok_or_else(|| {
        Error::param(format!(
            "location {location} out of range, test set has {}",
            dataset.test.len()
        ))
    })?;
    let (_, clusters) = cluster_location(method, loc, &dataset.scenario, cfg.physical.tau_p)?;
    clusters.validate()?;
    Ok(ConnectionMap::new(&dataset.scenario, &loc.drop, &clusters))
}

/// Relative disagreement with a floor on the magnitude so that entries whose
/// true value is zero are judged on absolute error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Magnitude floor used by [`gradient_check`].
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic log-probability gradient against central finite
/// differences on a random instance; returns the worst relative error.
pub fn gradient_check(layout: ParamLayout, num_ues: usize, step: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = layout.num_aps;
    let beta = Matrix::from_fn(l, num_ues, |_, _| 10f64.powf(-7.0 - 5.0 * rng.random::<f64>()));
    let drop = sample_ue_drop(num_ues, 700.0, &mut rng)?;
    let plan = PilotPlan::build(&beta, num_ues)?;
    let ap_order: Vec<usize> = (0..l).collect();
    let ordering = order_ues(&beta, &plan.masters, &ap_order)?;
    let norm = crate::policy::FeatureNorm::fit([&beta], 700.0)?;
    let features = build_features(&beta, &drop, &norm)?;
    let mut params = PolicyParams::init(layout, &mut rng);
    let probs = forward(&params, &ordering, &features)?;
    let (clusters, _) = crate::policy::sample_clusters(&probs, &plan.masters, &mut rng);
    let analytic = grad_log_prob(&params, &ordering, &features, &clusters, &plan.masters)?;

    let log_prob = |p: &PolicyParams<f64>| -> Result<f64> {
        let probs = forward(p, &ordering, &features)?;
        let mut s = 0.0;
        for ue in 0..num_ues {
            for ap in 0..l {
                if ap != plan.masters[ue] {
                    let pr = probs[(ue, ap)];
                    s += if clusters.is_active(ap, ue) { pr.ln() } else { (1.0 - pr).ln() };
                }
            }
        }
        Ok(s)
    };
    let mut worst: f64 = 0.0;
    for idx in 0..params.as_slice().len() {
        let orig = params.as_slice()[idx];
        params.as_mut_slice()[idx] = orig + step;
        let up = log_prob(&params)?;
        params.as_mut_slice()[idx] = orig - step;
        let down = log_prob(&params)?;
        params.as_mut_slice()[idx] = orig;
        let fd = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.as_slice()[idx], fd, GRADIENT_CHECK_FLOOR));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub mc_max_relative_error: f64,
    pub mc_trials: usize,
    pub gradient_max_relative_error: f64,
}

pub const MC_TOLERANCE: f64 = 0.02;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.mc_max_relative_error <= MC_TOLERANCE && self.gradient_max_relative_error <= GRADIENT_TOLERANCE
    }
}

/// Monte-Carlo estimation check on the first test location of the
/// configuration and a finite-difference gradient check on a small policy.
pub fn run_validation(cfg: &ExperimentConfig, trials: usize) -> Result<ValidationReport> {
    cfg.validate()?;
    let mut small = cfg.clone();
    small.dataset.train_locations = 1;
    small.dataset.test_locations = 1;
    let dataset = Dataset::generate(&small)?;
    let beta = &dataset.test[0].beta;
    let plan = PilotPlan::build(beta, cfg.physical.tau_p)?;
    let mut rng = stream_rng(cfg.seed, Stream::Validation);
    let mc = mc_validate_estimation(beta, &plan, &cfg.uplink()?, cfg.scenario.antennas, trials, &mut rng)?;
    let layout = ParamLayout::new(8, 3, &DEFAULT_HEAD_WIDTHS)?;
    let grad = gradient_check(layout, 2, 1e-5, rng.random())?;
    Ok(ValidationReport {
        mc_max_relative_error: mc.max_relative_error,
        mc_trials: trials,
        gradient_max_relative_error: grad,
    })
}
