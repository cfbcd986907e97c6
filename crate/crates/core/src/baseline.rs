//! Pilot-based reference clustering: every AP serves, on each occupied pilot,
//! the sharer with the strongest channel to it.

use crate::access::PilotPlan;
use crate::downlink::ClusterAssignment;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub fn baseline_clusters<T: Scalar>(beta: &Matrix<T>, plan: &PilotPlan) -> Result<ClusterAssignment> {
    let (l, k) = beta.shape();
    if plan.num_ues() != k {
        return Err(Error::shape(format!(
            "pilot plan covers {} UEs, gains cover {k}",
            plan.num_ues()
        )));
    }
    let mut clusters = ClusterAssignment::empty(l, k);
    for ap in 0..l {
        for set in &plan.sharing_sets {
            // Sets hold UEs in ascending order, so a strict comparison keeps
            // the lowest index on ties.
            let mut winner: Option<usize> = None;
            for &ue in set {
                if winner.is_none_or(|w| beta[(ap, ue)] > beta[(ap, w)]) {
                    winner = Some(ue);
                }
            }
            if let Some(ue) = winner {
                clusters.set(ap, ue, true);
            }
        }
    }
    clusters.force_masters(&plan.masters);
    Ok(clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_beta(seed: u64, l: usize, k: usize) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(l, k, |_, _| 10f64.powf(-7.0 - 6.0 * rng.random::<f64>()))
    }

    #[test]
    fn lone_ue_is_served_everywhere() {
        let beta = random_beta(1, 7, 1);
        let plan = PilotPlan::build(&beta, 3).unwrap();
        let c = baseline_clusters(&beta, &plan).unwrap();
        assert_eq!(c.connections(), 7);
    }

    #[test]
    fn enough_pilots_means_full_service() {
        let beta = random_beta(2, 25, 10);
        let plan = PilotPlan::build(&beta, 10).unwrap();
        let c = baseline_clusters(&beta, &plan).unwrap();
        assert_eq!(c.connections(), 250);
    }

    #[test]
    fn strongest_sharer_wins_each_pilot() {
        let beta = Matrix::from_rows(&[vec![0.5f64, 0.4, 0.3], vec![0.1, 0.2, 0.3]]).unwrap();
        let plan = PilotPlan::build(&beta, 2).unwrap();
        assert_eq!(plan.sharing_sets, vec![vec![0], vec![1, 2]]);
        let c = baseline_clusters(&beta, &plan).unwrap();
        // UE 2 ties between APs and is mastered by AP 0, which forces (0, 2).
        assert_eq!(c.links(), vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 2)]);
    }

    #[test]
    fn masters_are_forced_even_when_outvoted() {
        // UE 1 loses pilot 0 at its own master to UE 0.
        let beta = Matrix::from_rows(&[vec![0.9f64, 0.1], vec![0.95, 0.2]]).unwrap();
        let plan = PilotPlan {
            masters: vec![1, 1],
            pilots: vec![0, 0],
            sharing_sets: vec![vec![0, 1]],
            tau_p: 1,
        };
        let c = baseline_clusters(&beta, &plan).unwrap();
        assert!(c.is_active(1, 1));
        assert_eq!(c.connections(), 3);
    }

    proptest! {
        #[test]
        fn structure_and_scale_invariance(seed in any::<u64>(), l in 1usize..8, k in 1usize..8, tau_p in 1usize..5, scale in 1e-3f64..1e3) {
            let beta = random_beta(seed, l, k);
            let plan = PilotPlan::build(&beta, tau_p).unwrap();
            let c = baseline_clusters(&beta, &plan).unwrap();
            prop_assert!(c.validate().is_ok());
            for ue in 0..k {
                prop_assert!(c.is_active(plan.masters[ue], ue));
            }
            let occupied = plan.sharing_sets.iter().filter(|s| !s.is_empty()).count();
            prop_assert!(c.connections() >= l * occupied);
            prop_assert!(c.connections() <= l * occupied + k);
            if tau_p >= k {
                prop_assert_eq!(c.connections(), l * k);
            }
            let scaled = beta.map(|b| b * scale);
            let plan2 = PilotPlan::build(&scaled, tau_p).unwrap();
            prop_assert_eq!(&plan2, &plan);
            prop_assert_eq!(baseline_clusters(&scaled, &plan2).unwrap(), c);
        }
    }
}
