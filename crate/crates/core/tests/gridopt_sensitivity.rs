use diffscen::gridopt::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn random_day(case: &NetworkCase, rng: &mut ChaCha8Rng, hours: usize) -> Vec<Vec<f64>> {
    (0..hours)
        .map(|_| {
            let level: f64 = rng.random_range(0.2..1.3);
            case.base_demand
                .iter()
                .map(|d| d * level * rng.random_range(0.9..1.1))
                .collect()
        })
        .collect()
}

#[test]
fn bundled_case_checksum_is_pinned() {
    let digest: String = Sha256::digest(CASE5_JSON.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(
        digest,
        "83ea560925ec2630949d5bd1be44c25d447ccfcb4d38d8de1ce48ab6b61f0d33"
    );
}

#[test]
fn sensitivities_match_resolves_on_stable_perturbations() {
    let case = NetworkCase::bundled_case5();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut check = FdCheck::default();
    let mut tries = 0;
    while check.compared < 50 {
        tries += 1;
        assert!(tries < 500, "too many unstable perturbations");
        let mut eta = InvestmentVector::zeros(&case);
        eta.gen.iter_mut().for_each(|v| *v = rng.random_range(0.0..50.0));
        eta.branch.iter_mut().for_each(|v| *v = rng.random_range(0.0..50.0));
        let demand = random_day(&case, &mut rng, 2);
        let what = match rng.random_range(0..3) {
            0 => Perturbation::Demand {
                hour: rng.random_range(0..2),
                bus: rng.random_range(0..case.buses()),
            },
            1 => Perturbation::Generator(rng.random_range(0..case.generators())),
            _ => Perturbation::Branch(rng.random_range(0..case.branches())),
        };
        match check_one(&case, &eta, &demand, DEFAULT_REG, 0.1, what).unwrap() {
            Some((fd, an)) => check.record(fd, an),
            None => check.skipped += 1,
        }
    }
    assert!(check.worst_rel < 1e-3, "{check:?}");
}

#[test]
fn full_day_check_on_stressed_network() {
    let case = NetworkCase::bundled_case5();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let demand = random_day(&case, &mut rng, 6);
    let check = check_all(&case, &InvestmentVector::zeros(&case), &demand, DEFAULT_REG, 0.1).unwrap();
    assert!(check.compared > 20, "{check:?}");
    assert!(check.worst_rel < 1e-3, "{check:?}");
}

#[test]
fn repeated_solves_are_identical() {
    let case = NetworkCase::bundled_case5();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let demand = random_day(&case, &mut rng, 24);
    let eta = InvestmentVector::zeros(&case);
    let a = solve_operations(&case, &eta, &demand, DEFAULT_REG).unwrap();
    let b = solve_operations(&case, &eta, &demand, DEFAULT_REG).unwrap();
    for (x, y) in a.hours.iter().zip(&b.hours) {
        for (u, v) in x.qp.x.iter().zip(y.qp.x.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn pure_lp_is_supported() {
    let case = NetworkCase::bundled_case5();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let demand = random_day(&case, &mut rng, 4);
    let sol = solve_operations(&case, &InvestmentVector::zeros(&case), &demand, 0.0).unwrap();
    for (h, d) in sol.hours.iter().zip(&demand) {
        let total: f64 = d.iter().sum();
        assert!((h.p.iter().sum::<f64>() - total).abs() < 1e-6);
    }
}

mod always_solvable {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn any_demand_has_a_dispatch(
            demand in proptest::collection::vec(0.0f64..3000.0, 5),
            eta in proptest::collection::vec(0.0f64..500.0, 11),
            reg in prop_oneof![Just(0.0), Just(DEFAULT_REG), Just(1e-3)],
        ) {
            let case = NetworkCase::bundled_case5();
            let inv = InvestmentVector { gen: eta[..5].to_vec(), branch: eta[5..].to_vec() };
            let sol = solve_operations(&case, &inv, &[demand.clone()], reg).unwrap();
            let h = &sol.hours[0];
            let total: f64 = demand.iter().sum();
            prop_assert!((h.p.iter().sum::<f64>() - total).abs() < 1e-6 * (1.0 + total));
            for g in 0..5 {
                prop_assert!(h.p[g] <= case.gen_p_max[g] + inv.gen[g] + h.s_g[g] + 1e-6);
            }
        }
    }
}
