use proptest::prelude::*;

use superskel::cbprocess::extinction_by;
use superskel::mechanism::{BranchingMechanism, Coefficient};
use superskel::motion::{inward_ou, outward_ou, w_transform};
use superskel::rng::{stream, StreamTag};
use superskel::skeleton::{simulate_skeleton, BranchingLaw, SkeletonOptions};
use superskel::superfield::simulate_superprocess;
use superskel::{origin, AtomicMeasure};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn skeleton_trees_are_well_formed(
        seed in any::<u64>(),
        beta in 0.2f64..1.5,
        alpha in 0.5f64..2.0,
        c in 0.25f64..2.0,
        outward in any::<bool>(),
        roots in 1usize..4,
    ) {
        let mech = BranchingMechanism::quadratic(beta, alpha).unwrap();
        let z = mech.root_zpsi().unwrap().finite().unwrap();
        let motion = if outward { outward_ou(c, 1) } else { inward_ou(c, 1) }.unwrap();
        let law = BranchingLaw::from_mechanism(&mech, &Coefficient::Constant(z), 32, None).unwrap();
        let opts = SkeletonOptions::new(1.5, vec![0.0, 0.5, 1.5]);
        let mut rng = stream(seed, 0, StreamTag::Skeleton);
        let tree = simulate_skeleton(&motion, &law, &vec![origin(1); roots], &opts, &mut rng).unwrap();
        prop_assert!(tree.check_invariants().is_ok(), "{:?}", tree.check_invariants());
        prop_assert_eq!(tree.snapshot(0).count(), roots);
        // the skeleton never dies out when w = z_ψ and the motion is conservative
        prop_assert!(tree.snapshot(2).count() >= 1);
        prop_assert!(tree.is_binary());
    }

    #[test]
    fn superfield_extinction_is_absorbing(
        seed in any::<u64>(),
        beta in -0.5f64..1.0,
        mass in 0.05f64..0.4,
    ) {
        let mech = BranchingMechanism::quadratic(beta, 1.0).unwrap();
        let motion = inward_ou(1.0, 1).unwrap();
        let mu = AtomicMeasure::dirac(origin(1), mass);
        let eps = 0.05;
        let times = [0.5, 1.0, 1.5, 2.0];
        let mut rng = stream(seed, 0, StreamTag::Superfield);
        let path = simulate_superprocess(&mech, &motion, &mu, eps, 2.0, &times, &mut rng).unwrap();
        let mut dead = false;
        for (snap, &t) in path.snapshots.iter().zip(&times) {
            let m = snap.total_mass();
            prop_assert!(m >= 0.0);
            prop_assert!((m / eps - (m / eps).round()).abs() < 1e-9);
            if dead {
                prop_assert_eq!(snap.count(), 0);
            }
            dead |= snap.count() == 0;
            prop_assert_eq!(path.extinct_by(t), snap.count() == 0);
        }
    }

    #[test]
    fn quadratic_tilt_reflects_the_growth_rate(beta in 0.05f64..3.0, alpha in 0.1f64..4.0) {
        let mech = BranchingMechanism::quadratic(beta, alpha).unwrap();
        let z = mech.root_zpsi().unwrap().finite().unwrap();
        prop_assert!((z - beta / alpha).abs() < 1e-10 * (1.0 + z));
        let tilted = mech.tilt_at_w(&Coefficient::Constant(z)).unwrap();
        // ψ*(λ) = βλ + αλ², so the tilted process is subcritical with rate −β
        for lambda in [0.1, 1.0, 5.0] {
            let expect = beta * lambda + alpha * lambda * lambda;
            let got = tilted.psi(&[], lambda).unwrap();
            prop_assert!((got - expect).abs() < 1e-10 * (1.0 + expect.abs()));
        }
        prop_assert!(tilted.root_zpsi().unwrap().finite().is_none_or(|r| r == 0.0));
    }

    #[test]
    fn skeleton_motion_is_unkilled_at_the_root(beta in 0.05f64..3.0, alpha in 0.1f64..4.0) {
        let mech = BranchingMechanism::quadratic(beta, alpha).unwrap();
        let z = mech.root_zpsi().unwrap().finite().unwrap();
        let motion = inward_ou(1.0, 1).unwrap();
        let skel = w_transform(&motion, &mech, &Coefficient::Constant(z)).unwrap();
        prop_assert!(skel.killing().is_none());
    }

    #[test]
    fn extinction_by_t_increases_to_the_ultimate_value(beta in 0.1f64..2.0, alpha in 0.2f64..2.0) {
        let mech = BranchingMechanism::quadratic(beta, alpha).unwrap();
        let ultimate = (-beta / alpha).exp();
        let mut last = 0.0;
        for t in [0.25, 1.0, 4.0, 16.0] {
            let p = extinction_by(&mech, t).unwrap().prob_zero(1.0);
            prop_assert!(p >= last - 1e-12 && p <= ultimate + 1e-9, "t={} p={} ultimate={}", t, p, ultimate);
            last = p;
        }
    }
}
