use medctx_core::gradsuite::{check_case, CASES};

#[test]
fn injected_gradient_bug_is_caught_by_every_case() {
    for &name in CASES {
        let check = check_case(name, 1, true).unwrap();
        assert!(check.max_rel_error > 5e-3, "{name}: {:e}", check.max_rel_error);
    }
}

#[test]
fn clean_cases_pass_on_a_few_seeds() {
    for &name in CASES.iter().filter(|&&n| n != "tiny_network") {
        let check = check_case(name, 3, false).unwrap();
        assert!(check.passed(), "{name}: {:e}", check.max_rel_error);
    }
}
