//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::fs;
use std::path::Path;
use std::time::Instant;

use cellfree::access::{compute_gamma, mc_validate_estimation, PilotPlan, UplinkConfig};
use cellfree::baseline::baseline_clusters;
use cellfree::downlink::{allocate_power, evaluate_clusters, sinr, ClusterAssignment, DownlinkConfig};
use cellfree::harness::{
    evaluate, gradient_check, run_training, write_report_csv, Dataset, ExperimentConfig, Method,
    GRADIENT_CHECK_FLOOR,
};
use cellfree::policy::{
    build_features, forward, order_ues, sample_clusters, threshold_clusters, FeatureNorm, ParamLayout,
    PolicyParams, DEFAULT_HEAD_WIDTHS,
};
use cellfree::training::grad_log_prob;
use cellfree::{Matrix, Point, UeDrop};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn criterion_1() -> Outcome {
    let mut detail = Vec::new();
    let cfg10 = ExperimentConfig::table1(10);
    let ds10 = Dataset::generate(&cfg10).map_err(|e| e.to_string())?;
    let rep10 = evaluate(Method::Baseline, &ds10, &cfg10).map_err(|e| e.to_string())?;
    let all_250 = rep10.records.iter().all(|r| r.connections == 250);
    detail.push(format!("tau_p=10: every location 250 = {all_250}"));

    let cfg3 = ExperimentConfig::table1(3);
    let ds3 = Dataset::generate(&cfg3).map_err(|e| e.to_string())?;
    let rep3 = evaluate(Method::Baseline, &ds3, &cfg3).map_err(|e| e.to_string())?;
    let ok3 = (rep3.mean_connections - 75.0).abs() <= 1.0;
    detail.push(format!("tau_p=3: mean {:.2}", rep3.mean_connections));
    Ok((all_250 && ok3, detail.join(", ")))
}

fn criterion_2() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for (tau_p, reference) in [(3, 24.42), (10, 24.65)] {
        let cfg = ExperimentConfig::table1(tau_p);
        let ds = Dataset::generate(&cfg).map_err(|e| e.to_string())?;
        let rep = evaluate(Method::Baseline, &ds, &cfg).map_err(|e| e.to_string())?;
        let dev = (rep.mean_se_sum - reference) / reference;
        pass &= dev.abs() <= 0.15;
        detail.push(format!("tau_p={tau_p}: {:.2} vs {reference} ({:+.1}%)", rep.mean_se_sum, 100.0 * dev));
    }
    Ok((pass, detail.join(", ")))
}

fn criterion_3() -> Outcome {
    let cfg = ExperimentConfig::reduced();
    let ds = Dataset::generate(&cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let run = run_training(&cfg, &ds, dir.path()).map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f64();
    let h = &run.outcome.history;
    let (first, last) = (h[0].mean_reward, h[h.len() - 1].mean_reward);
    let progress = last >= first + 0.5;

    let pol = evaluate(Method::Policy(&run.checkpoint), &ds, &cfg).map_err(|e| e.to_string())?;
    let mo = evaluate(Method::MasterOnly, &ds, &cfg).map_err(|e| e.to_string())?;
    let base = evaluate(Method::Baseline, &ds, &cfg).map_err(|e| e.to_string())?;
    let a = pol.mean_objective > mo.mean_objective;
    let b_conn = pol.mean_connections < base.mean_connections;
    let b_se = pol.mean_se_sum >= 0.85 * base.mean_se_sum;
    Ok((
        a && b_conn && b_se && progress,
        format!(
            "objective {:.3} vs master-only {:.3}; connections {:.2} vs baseline {:.2}; \
             SE {:.3} = {:.1}% of baseline {:.3}; training reward {:.3} -> {:.3}; {:.0} s",
            pol.mean_objective,
            mo.mean_objective,
            pol.mean_connections,
            base.mean_connections,
            pol.mean_se_sum,
            100.0 * pol.mean_se_sum / base.mean_se_sum,
            base.mean_se_sum,
            first,
            last,
            train_secs
        ),
    ))
}

fn criterion_4() -> Outcome {
    let layout = ParamLayout::new(8, 3, &DEFAULT_HEAD_WIDTHS).map_err(|e| e.to_string())?;
    let n = layout.num_params();
    let worst = gradient_check(layout, 2, 1e-5, 4).map_err(|e| e.to_string())?;
    Ok((
        worst <= 1e-4,
        format!("max relative error {worst:.2e} over {n} parameters (magnitude floor {GRADIENT_CHECK_FLOOR:e})"),
    ))
}

fn criterion_5() -> Outcome {
    // K = 1, L = 2: the master link is forced, one link is free.
    let beta = Matrix::from_rows(&[vec![3e-9], vec![4e-10]]).map_err(|e| e.to_string())?;
    let drop = UeDrop { positions: vec![Point::new(120.0, 300.0)] };
    let uplink = UplinkConfig::new(100.0, 10f64.powf(-9.4), 1, 200).map_err(|e| e.to_string())?;
    let downlink = DownlinkConfig {
        rho_max: 200.0,
        sigma_dl2: 10f64.powf(-9.4),
        antennas: 4,
        tau_c: 200,
        tau_p: 1,
        tau_u: 0,
        lambda: 0.04,
    };
    let plan = PilotPlan::build(&beta, 1).map_err(|e| e.to_string())?;
    let gamma = compute_gamma(&beta, &plan, &uplink).map_err(|e| e.to_string())?;
    let ordering = order_ues(&beta, &plan.masters, &[0, 1]).map_err(|e| e.to_string())?;
    let norm = FeatureNorm::identity(2, 700.0);
    let features = build_features(&beta, &drop, &norm).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = PolicyParams::init(ParamLayout::new(4, 2, &[8]).map_err(|e| e.to_string())?, &mut rng);
    let probs = forward(&params, &ordering, &features).map_err(|e| e.to_string())?;
    let masters = &plan.masters;
    let free = 1 - masters[0];

    let score = |c: &ClusterAssignment| -> Result<(f64, Vec<f64>), String> {
        let r = evaluate_clusters(c, &beta, &gamma, &plan, &downlink).map_err(|e| e.to_string())?.objective;
        let g = grad_log_prob(&params, &ordering, &features, c, masters).map_err(|e| e.to_string())?;
        Ok((r, g.as_slice().to_vec()))
    };
    let mut exact = vec![0.0; params.as_slice().len()];
    let p_on = probs[(0, free)];
    for (on, pa) in [(false, 1.0 - p_on), (true, p_on)] {
        let mut c = ClusterAssignment::master_only(2, masters);
        c.set(free, 0, on);
        let (r, g) = score(&c)?;
        for (e, gi) in exact.iter_mut().zip(g) {
            *e += pa * r * gi;
        }
    }

    let samples = 100_000;
    let n = exact.len();
    let (mut sum, mut sum_sq) = (vec![0.0; n], vec![0.0; n]);
    let cache = [false, true].map(|on| {
        let mut c = ClusterAssignment::master_only(2, masters);
        c.set(free, 0, on);
        c
    });
    let cached = [score(&cache[0])?, score(&cache[1])?];
    for _ in 0..samples {
        let (c, _) = sample_clusters(&probs, masters, &mut rng);
        let (r, g) = &cached[usize::from(c.is_active(free, 0))];
        for j in 0..n {
            let x = r * g[j];
            sum[j] += x;
            sum_sq[j] += x * x;
        }
    }
    let s = samples as f64;
    let mut worst_z: f64 = 0.0;
    let mut exact_zero = 0;
    for j in 0..n {
        let mean = sum[j] / s;
        let var = (sum_sq[j] / s - mean * mean).max(0.0) * s / (s - 1.0);
        let se = (var / s).sqrt();
        if se == 0.0 {
            if mean != exact[j] {
                return Ok((false, format!("parameter {j}: zero-variance mean {mean} vs exact {}", exact[j])));
            }
            exact_zero += 1;
        } else {
            worst_z = worst_z.max((mean - exact[j]).abs() / se);
        }
    }
    Ok((
        worst_z <= 3.0,
        format!("max |z| {worst_z:.2} over {} parameters ({exact_zero} deterministic), p = {p_on:.3}", n),
    ))
}

fn criterion_6() -> Outcome {
    let beta = Matrix::from_rows(&[vec![2e-9, 5e-11], vec![3e-11, 8e-10]]).map_err(|e| e.to_string())?;
    let plan = PilotPlan::build(&beta, 1).map_err(|e| e.to_string())?;
    let shared = plan.pilots[0] == plan.pilots[1];
    let uplink = UplinkConfig::new(100.0, 10f64.powf(-9.4), 1, 200).map_err(|e| e.to_string())?;
    let rep = mc_validate_estimation(&beta, &plan, &uplink, 4, 100_000, &mut ChaCha8Rng::seed_from_u64(6))
        .map_err(|e| e.to_string())?;
    Ok((
        shared && rep.max_relative_error <= 0.02,
        format!("max relative error {:.3}% over {} trials, shared pilot = {shared}", 100.0 * rep.max_relative_error, rep.trials),
    ))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    let instances = 500;
    for case in 0..instances {
        let l = rng.random_range(1..10usize);
        let k = rng.random_range(1..8usize);
        let tau_p = rng.random_range(1..=k);
        let beta = Matrix::from_fn(l, k, |_, _| 10f64.powf(-6.0 - 7.0 * rng.random::<f64>()));
        let uplink = UplinkConfig::new(100.0, 10f64.powf(-9.4), tau_p, 200).map_err(|e| e.to_string())?;
        let lambda = rng.random::<f64>();
        let cfg = DownlinkConfig {
            rho_max: 200.0,
            sigma_dl2: 10f64.powf(-9.4),
            antennas: 4,
            tau_c: 200,
            tau_p,
            tau_u: 0,
            lambda,
        };
        let plan = PilotPlan::build(&beta, tau_p).map_err(|e| e.to_string())?;
        let gamma = compute_gamma(&beta, &plan, &uplink).map_err(|e| e.to_string())?;
        if !(0..l).all(|a| (0..k).all(|u| gamma[(a, u)] < beta[(a, u)])) {
            failures.push(format!("case {case}: gamma >= beta"));
        }

        let probs = Matrix::from_fn(k, l, |_, _| rng.random::<f64>());
        let constructed = [
            baseline_clusters(&beta, &plan).map_err(|e| e.to_string())?,
            ClusterAssignment::master_only(l, &plan.masters),
            threshold_clusters(&probs, &plan.masters),
            sample_clusters(&probs, &plan.masters, &mut rng).0,
        ];
        if constructed.iter().any(|c| c.validate().is_err()) {
            failures.push(format!("case {case}: a constructor left a UE unserved"));
        }
        let clusters = &constructed[3];

        let power = allocate_power(&beta, clusters, cfg.rho_max);
        for ap in 0..l {
            if clusters.served_ues(ap).next().is_some() {
                let total: f64 = (0..k).map(|u| power.rho[(ap, u)]).sum();
                if ((total - cfg.rho_max) / cfg.rho_max).abs() > 1e-12 {
                    failures.push(format!("case {case}: AP {ap} power {total}"));
                }
            }
        }

        // An extra AP with zero gain to everyone receives no power.
        let beta2 = Matrix::from_fn(l + 1, k, |a, u| if a < l { beta[(a, u)] } else { 0.0 });
        let gamma2 = Matrix::from_fn(l + 1, k, |a, u| if a < l { gamma[(a, u)] } else { 0.0 });
        let mut links = clusters.links();
        let ue = rng.random_range(0..k);
        links.push((l, ue));
        let widened = ClusterAssignment::from_links(l + 1, k, &links).map_err(|e| e.to_string())?;
        let power2 = allocate_power(&beta2, &widened, cfg.rho_max);
        for u in 0..k {
            let before = sinr(u, clusters, &power, &beta, &gamma, &plan, &cfg);
            let after = sinr(u, &widened, &power2, &beta2, &gamma2, &plan, &cfg);
            if before != after {
                failures.push(format!("case {case}: SINR of UE {u} moved {before} -> {after}"));
            }
        }
        let narrow = ClusterAssignment::from_links(l + 1, k, &clusters.links()).map_err(|e| e.to_string())?;
        let o0 = evaluate_clusters(&narrow, &beta2, &gamma2, &plan, &cfg).map_err(|e| e.to_string())?;
        let o1 = evaluate_clusters(&widened, &beta2, &gamma2, &plan, &cfg).map_err(|e| e.to_string())?;
        if o1.se_sum != o0.se_sum || ((o0.objective - o1.objective) - lambda).abs() > 1e-12 {
            failures.push(format!("case {case}: objective drop {} for lambda {lambda}", o0.objective - o1.objective));
        }
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("{instances} random instances")
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    ))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_8() -> Outcome {
    let mut cfg = ExperimentConfig::reduced();
    cfg.dataset.train_locations = 6;
    cfg.dataset.test_locations = 20;
    cfg.training.epochs = 4;
    cfg.training.batch_size = 8;
    cfg.training.checkpoint_every = 2;
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ds = Dataset::generate(&cfg).map_err(|e| e.to_string())?;
        let run = run_training(&cfg, &ds, dir.path()).map_err(|e| e.to_string())?;
        let rep = evaluate(Method::Policy(&run.checkpoint), &ds, &cfg).map_err(|e| e.to_string())?;
        let report_path = dir.path().join("report.csv");
        write_report_csv(&report_path, &rep, &cfg).map_err(|e| e.to_string())?;
        outputs.push([
            read(&run.history_path)?,
            read(&run.checkpoint_path)?,
            read(&dir.path().join("checkpoint_epoch0002.json"))?,
            read(&report_path)?,
        ]);
    }
    let same = outputs[0] == outputs[1];
    Ok((same, "history, checkpoints and report compared byte for byte".into()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("baseline connection counts", criterion_1),
        ("baseline mean SE sum", criterion_2),
        ("reduced-scenario training", criterion_3),
        ("gradient vs finite differences", criterion_4),
        ("score-function unbiasedness", criterion_5),
        ("MMSE estimate statistics", criterion_6),
        ("formula invariants", criterion_7),
        ("determinism", criterion_8),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match std::panic::catch_unwind(run) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n} [{name}]: {} ({detail}; {:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
