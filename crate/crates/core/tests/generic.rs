//! The same pipeline in `f32` and `f64` agrees to single precision.

use cellfree::access::{compute_gamma, PilotPlan, UplinkConfig};
use cellfree::baseline::baseline_clusters;
use cellfree::channel::{large_scale, sample_shadow, shadow_covariance, ShadowModel};
use cellfree::downlink::{evaluate_clusters, DownlinkConfig};
use cellfree::policy::{build_features, forward, order_ues, FeatureNorm, ParamLayout, PolicyParams};
use cellfree::scenario::{place_aps, sample_ue_drop};
use cellfree::{Matrix, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Run {
    se_sum: f64,
    connections: usize,
    probs: Vec<f64>,
}

fn pipeline<T: Scalar>(seed: u64) -> Run {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = place_aps(4, T::lit(700.0), T::lit(0.5), &mut rng)
        .unwrap()
        .with_height(T::lit(10.0))
        .unwrap()
        .with_antennas(4)
        .unwrap();
    let drop = sample_ue_drop(6, T::lit(700.0), &mut rng).unwrap();
    let model = ShadowModel::new(T::lit(4.0), T::lit(9.0)).unwrap();
    let cov = shadow_covariance(&drop, &model);
    let shadow = sample_shadow(&cov, scenario.num_aps(), &mut rng).unwrap();
    let beta: Matrix<T> = large_scale(&scenario, &drop, &shadow, T::lit(2.0)).unwrap().beta;
    let noise = T::lit(-94.0).db_to_linear();
    let uplink = UplinkConfig::new(T::lit(100.0), noise, 3, 200).unwrap();
    let plan = PilotPlan::build(&beta, 3).unwrap();
    let gamma = compute_gamma(&beta, &plan, &uplink).unwrap();
    let cfg = DownlinkConfig {
        rho_max: T::lit(200.0),
        sigma_dl2: noise,
        antennas: 4,
        tau_c: 200,
        tau_p: 3,
        tau_u: 0,
        lambda: T::lit(0.04),
    };
    let clusters = baseline_clusters(&beta, &plan).unwrap();
    let eval = evaluate_clusters(&clusters, &beta, &gamma, &plan, &cfg).unwrap();

    let layout = ParamLayout::new(8, 16, &[16, 8]).unwrap();
    let params = PolicyParams::<T>::init(layout, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let norm = FeatureNorm::fit([&beta], T::lit(700.0)).unwrap();
    let ordering = order_ues(&beta, &plan.masters, &scenario.ap_order).unwrap();
    let features = build_features(&beta, &drop, &norm).unwrap();
    let probs = forward(&params, &ordering, &features).unwrap();
    Run {
        se_sum: eval.se_sum.as_f64(),
        connections: eval.connections,
        probs: probs.as_slice().iter().map(|p| p.as_f64()).collect(),
    }
}

#[test]
fn single_and_double_precision_agree() {
    for seed in 0..5 {
        let a = pipeline::<f32>(seed);
        let b = pipeline::<f64>(seed);
        assert_eq!(a.connections, b.connections);
        assert!((a.se_sum - b.se_sum).abs() <= 1e-4 * b.se_sum, "{} vs {}", a.se_sum, b.se_sum);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}
