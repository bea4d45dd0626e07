//! The library stages wired together on a small ABM.

use epical::abm::{simulate, simulate_mean, AbmConfig};
use epical::design::{halton_design, TrainingDataset};
use epical::dram::{run_chain, DramConfig};
use epical::gp::{cross_validate, select_hyperparameters, GpModel};
use epical::metrics::{bands, crps_series, posterior_predictive, ppt, vrh};
use epical::posterior::{pilot_fit, GpPosterior, Observations, Posterior, VariancePrior};
use epical::sensitivity::{permutation_importance, sobol_indices, SensitivityReport};
use epical::svi::{run_svi, SviConfig};
use epical::{Bounds, ParameterVector, PARAM_NAMES};

fn small_abm() -> AbmConfig {
    AbmConfig {
        population: 2000,
        places: 100,
        horizon_days: 40,
        ..Default::default()
    }
}

fn truth() -> ParameterVector {
    ParameterVector::new(0.058, 44.0, 0.955, 0.45)
}

#[test]
fn dataset_directory_resumes_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    let bounds = Bounds::default_box();
    let design = halton_design(6, &bounds).unwrap();
    let abm = small_abm();
    let built = epical::design::build_dataset_in(&ds_dir, &design, &bounds, &abm, 2, "test").unwrap();
    // A second call reads every row back.
    let again = epical::design::build_dataset_in(&ds_dir, &design, &bounds, &abm, 2, "test").unwrap();
    assert_eq!(built.responses, again.responses);
    let loaded = TrainingDataset::load(&ds_dir).unwrap();
    assert_eq!(loaded.responses, built.responses);
    assert_eq!(loaded.responses[3], simulate_mean(&design[3], &abm, 2).unwrap());
    // A different seed count is not silently mixed in.
    assert!(epical::design::build_dataset_in(&ds_dir, &design, &bounds, &abm, 3, "test").is_err());
}

#[test]
fn calibration_end_to_end() {
    let bounds = Bounds::default_box();
    let abm = small_abm();
    let design = halton_design(40, &bounds).unwrap();
    let ds = epical::design::build_dataset(&design, &bounds, &abm, 3).unwrap();

    let sel = select_hyperparameters(&ds, &[1e-3, 1e-2, 1e-1], 4, 0).unwrap();
    assert!(sel.length_scale > 0.0);
    let model = GpModel::fit(&ds, sel.length_scale, sel.nugget).unwrap();
    let cv = cross_validate(&ds, 4, sel.length_scale, sel.nugget, 0).unwrap();
    assert!(cv.pooled_median.is_finite() && cv.pooled_median < 0.5, "{}", cv.pooled_median);

    // Model file round trip gives identical predictions.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.txt");
    model.save(&path).unwrap();
    let reloaded = GpModel::load(&path).unwrap();
    assert_eq!(reloaded.predict(&truth()), model.predict(&truth()));

    let obs = Observations::synthetic(&truth(), &abm, 3, [0.0, 0.0], 0).unwrap();
    let pilot = pilot_fit(&ds, &obs).unwrap();
    let post = GpPosterior::new(&model, &obs, bounds.clone(), VariancePrior::default(), pilot.variances).unwrap();
    assert!(post.evaluate(&post.to_unit(truth().as_slice())).is_some());

    let dram_cfg = DramConfig {
        samples: 3000,
        adapt_start: 500,
        ..DramConfig::default()
    };
    let start = post.to_unit(pilot.theta.as_slice());
    let chain = run_chain(&post, &dram_cfg, &start, Some(pilot.variances), 1).unwrap();
    assert_eq!(chain.len(), 3000);
    let dram_points: Vec<ParameterVector> = chain.kept().map(|p| ParameterVector::from_slice(p).unwrap()).collect();
    assert!(dram_points.iter().all(|p| bounds.contains(p.as_slice())));

    let svi_cfg = SviConfig {
        particles: 20,
        steps: 200,
        learning_rate: 0.003,
        seeds: vec![0, 1],
        ..SviConfig::default()
    };
    let superset = run_svi(&post, &svi_cfg).unwrap();
    assert_eq!(superset.len(), 40);
    let svi_points: Vec<ParameterVector> = superset.rows.iter().map(|r| ParameterVector::from_slice(&r.theta).unwrap()).collect();
    assert!(svi_points.iter().all(|p| bounds.contains(p.as_slice())));

    let variances = [pilot.variances];
    let a = posterior_predictive(&dram_points, chain.kept_variances().unwrap(), &model, 30, "dram", 2).unwrap();
    let b = posterior_predictive(&svi_points, &variances, &model, 30, "svi", 2).unwrap();
    for e in [&a, &b] {
        let c = crps_series(e, &obs).unwrap();
        assert!(c.mean.is_finite() && c.mean >= 0.0);
        let h = vrh(e, &obs, 4).unwrap();
        assert_eq!(h.pooled.iter().sum::<usize>(), 2 * obs.n());
        let band = bands(e, 0.05, 0.95).unwrap();
        assert!((0.0..=1.0).contains(&band.coverage(&obs).unwrap()));
    }
    assert!(ppt(&a, &b).unwrap() >= 0.0);
    assert_eq!(ppt(&a, &a).unwrap(), 0.0);

    let perm = permutation_importance(&model, &ds, 3, 5).unwrap();
    let sobol = sobol_indices(&model, &bounds, 128, 6, false).unwrap();
    let report = SensitivityReport::new(&PARAM_NAMES, perm, sobol).unwrap();
    assert_eq!(report.permutation_ranking().len(), 4);
    assert!(report.sobol_first.iter().chain(&report.sobol_total).all(|s| (0.0..=1.5).contains(s)));
}

#[test]
fn zero_transmission_has_no_secondary_cases() {
    let abm = small_abm();
    let p = ParameterVector::new(0.0, 40.0, 0.96, 0.45);
    let s = simulate(&p, &abm, 3).unwrap();
    let total: f64 = s.hospitalizations.iter().chain(&s.deaths).sum();
    assert!(total <= 2.0 * abm.seed_infections as f64, "{total}");
}
