mod common;

use common::*;
use stconfound::io::{
    default_ids, load_adjacency, load_dataset, load_fit, save_adjacency, save_dataset, serialize_fit, LoadedDataset,
};
use stconfound::{fit_model, BlockLabel, FitOptions, ModelSpec, Structures, Variant};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn dataset_and_graph_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (graph, data) = lattice_dataset(3, 4, 5, 31);
    let loaded = LoadedDataset {
        area_ids: default_ids(12),
        time_ids: (2001..2006).map(|y| y.to_string()).collect(),
        data,
    };
    save_dataset(dir.path().join("d.csv"), &loaded).unwrap();
    save_adjacency(dir.path().join("a.txt"), &graph).unwrap();
    let back = load_dataset(dir.path().join("d.csv")).unwrap();
    let g = load_adjacency(dir.path().join("a.txt"), Some(12)).unwrap();
    assert_eq!(g, graph);
    assert_eq!(back.area_ids, loaded.area_ids);
    assert_eq!(back.time_ids, loaded.time_ids);
    assert_eq!(back.data.observed, loaded.data.observed);
    for (a, b) in back.data.covariates.iter().zip(loaded.data.covariates.iter()) {
        assert!(close(*a, *b));
    }
    for (a, b) in back.data.expected.iter().zip(loaded.data.expected.iter()) {
        assert!(close(*a, *b));
    }
}

#[test]
fn fit_record_round_trips_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let (graph, data) = lattice_dataset(3, 3, 4, 32);
    let st = Structures::new(&graph, 4).unwrap();
    let (_, f) = fit_model(&ModelSpec::new(Variant::St2), &data, &st, &FitOptions::default(), None).unwrap();
    serialize_fit(&f, dir.path(), &default_ids(9), &default_ids(4)).unwrap();
    for name in ["fit.json", "coefficients.csv", "random_effects.csv", "risks.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let rec = load_fit(dir.path()).unwrap();
    let g = rec.fit;
    assert_eq!(rec.model, "ST2");
    assert_eq!(g.variant, f.variant);
    assert_eq!(g.converged, f.converged);
    for (a, b) in g.beta.iter().zip(f.beta.iter()) {
        assert!(close(*a, *b));
    }
    for (a, b) in g.beta_cov.iter().zip(f.beta_cov.iter()) {
        assert!(close(*a, *b));
    }
    for (a, b) in g.fitted_mu.iter().zip(f.fitted_mu.iter()) {
        assert!(close(*a, *b));
    }
    for label in BlockLabel::ALL {
        assert!(close(g.sigma2(label).unwrap(), f.sigma2(label).unwrap()));
        for (a, b) in g.random_effects[&label].iter().zip(f.random_effects[&label].iter()) {
            assert!(close(*a, *b));
        }
    }
    assert!(close(g.deviance, f.deviance));
    assert!(close(g.effective_df, f.effective_df));
    let (lo, hi) = f.wald_intervals()[1];
    let row = &rec.coefficients[1];
    assert!(close(row.q_025, lo) && close(row.q_975, hi));
}
