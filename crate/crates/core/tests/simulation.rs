use std::collections::BTreeMap;

use stconfound::simulate::replicate_study;
use stconfound::{FitOptions, ModelSpec, Scenario, Variant};

#[test]
fn glm_intervals_have_nominal_coverage_without_random_effects() {
    let scenario = Scenario {
        sigma2: BTreeMap::new(),
        confounding_rho: vec![0.0, 0.0],
        seed: 77,
        ..Scenario::desk()
    };
    let report = replicate_study(&scenario, 200, &[ModelSpec::new(Variant::St1)], &FitOptions::default()).unwrap();
    for coef in ["(Intercept)", "x1", "x2"] {
        let s = report.summary("ST1", coef).unwrap();
        assert_eq!(s.n_used, 200);
        // Binomial 3-SE band around 0.95 for 200 replicates.
        assert!((0.904..=0.996).contains(&s.coverage), "{coef}: coverage {}", s.coverage);
        assert!((s.mean_estimate - s.truth).abs() <= 3.0 * s.mc_se(), "{coef}: {s:?}");
        assert!((s.mean_se / s.empirical_sd - 1.0).abs() < 0.2, "{coef}: {s:?}");
    }
}

#[test]
fn replicate_studies_are_reproducible_across_runs() {
    let scenario = Scenario {
        seed: 5,
        ..Scenario::confounded()
    };
    let models = [ModelSpec::new(Variant::St1), ModelSpec::new(Variant::St2)];
    let a = replicate_study(&scenario, 4, &models, &FitOptions::default()).unwrap();
    let b = replicate_study(&scenario, 4, &models, &FitOptions::default()).unwrap();
    assert_eq!(a.summaries, b.summaries);
}
