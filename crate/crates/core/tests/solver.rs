use std::path::Path;

use dcmg_core::admm::{decision_ell, parse_slot_problem, restore_feasibility};
use dcmg_core::oracle::{load_fixture, random_instance, solve_centralized, InstanceLimits};
use dcmg_core::{solve_slot, AdmmOptions};
use proptest::prelude::*;

fn fixture_paths() -> Vec<std::path::PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
}

#[test]
fn stored_fixtures_are_reproduced_by_both_solvers() {
    let paths = fixture_paths();
    assert!(paths.len() >= 10);
    for path in paths {
        let fx = load_fixture(&path).unwrap();
        let oracle = solve_centralized(&fx.problem).unwrap();
        assert!((oracle.objective - fx.objective).abs() <= 1e-7 * fx.objective.abs().max(1.0), "{path:?}");

        let tol = 0.1 * fx.problem.default_tolerance();
        let sol =
            solve_slot(&fx.problem, &AdmmOptions { tolerance: Some(tol), max_iters: 50_000, ..Default::default() })
                .unwrap();
        let gap = (sol.objective - fx.objective).abs() / fx.objective.abs().max(1.0);
        assert!(gap <= 1e-3, "{path:?}: gap {gap:e}");
    }
}

#[test]
fn shipped_reference_slot_converges_for_each_penalty() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/reference_slot.json");
    let problem = parse_slot_problem(&std::fs::read_to_string(path).unwrap()).unwrap();
    let reference = solve_centralized(&problem).unwrap().objective;
    for rho in [0.5, 1.0, 2.0] {
        let sol = solve_slot(&problem, &AdmmOptions { rho, ..Default::default() }).unwrap();
        assert!(sol.converged, "rho {rho}");
        assert!((sol.objective - reference).abs() <= 1e-3 * reference.abs().max(1.0), "rho {rho}");
    }
}

#[test]
fn fixture_files_parse_as_instances() {
    let text = std::fs::read_to_string(&fixture_paths()[0]).unwrap();
    let problem = parse_slot_problem(&text).unwrap();
    assert_eq!(problem, load_fixture(&fixture_paths()[0]).unwrap().problem);
}

#[test]
fn malformed_instance_is_a_validation_error() {
    let err = parse_slot_problem("{\"lambda\": [1.0]}").unwrap_err();
    assert!(err.is_validation(), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn restored_decision_is_feasible_and_close_to_the_oracle(seed in 0u64..1_000_000) {
        let inst = random_instance(seed, InstanceLimits::default()).unwrap();
        let sol = solve_slot(&inst.problem, &AdmmOptions { max_iters: 20_000, ..Default::default() }).unwrap();
        let restored = restore_feasibility(&inst.problem, &sol.decision).unwrap();
        prop_assert!(decision_ell(&inst.problem, &restored) <= 1e-6 * (1.0 + inst.problem.capacity.iter().sum::<f64>()));
        let oracle = solve_centralized(&inst.problem).unwrap().objective;
        // The oracle is optimal, so no feasible point beats it by more than its own accuracy.
        prop_assert!(inst.problem.objective(&restored) >= oracle - 1e-6 * oracle.abs().max(1.0));
    }
}
