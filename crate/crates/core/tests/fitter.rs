use scalelab::fitter::{fit_stage1, fit_stage2, fit_two_stage, scaled_design, synth_runs, FitConfig, GridPoint, Stage1};
use scalelab::{Family, Law, RunRecord};

fn paper_law() -> Law {
    Law { a: 406.4, b: 410.7, alpha: 0.34, beta: 0.28, e0: 1.69, r_d_star: 31.19, r_n_star: 55.16 }
}

fn grid(ns: &[f64], us: &[f64], es: &[f64]) -> Vec<GridPoint> {
    ns.iter()
        .flat_map(|&n| us.iter().flat_map(move |&u| es.iter().map(move |&e| GridPoint { n_params: n, unique_tokens: u, epochs: e })))
        .collect()
}

fn design(law: &Law, us: &[f64], ks: &[f64], es: &[f64]) -> Vec<GridPoint> {
    scaled_design(law, us, ks, es).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn noiseless_stage1_recovers_constants() {
    let law = paper_law();
    let runs = synth_runs(&law, &design(&law, &[1e8, 1e9, 1e10, 1e11], &[1.0 / 64.0, 1.0 / 16.0, 0.25, 0.5, 1.0], &[1.0]), 0.0, 0, Family::Ar).unwrap();
    let (s1, rep) = fit_stage1(&runs, &FitConfig::<f64>::default()).unwrap();
    for (got, want) in [(s1.a, law.a), (s1.b, law.b), (s1.alpha, law.alpha), (s1.beta, law.beta), (s1.e0, law.e0)] {
        assert!(rel(got, want) < 1e-3, "{got} vs {want}");
    }
    assert!(rep.converged && rep.r_squared > 0.999_999);
}

#[test]
fn noiseless_two_stage_recovers_all_constants() {
    let law = paper_law();
    let runs = synth_runs(
        &law,
        &design(&law, &[1e7, 1e8, 1e9, 1e10], &[1.0 / 64.0, 1.0 / 8.0, 0.5, 1.0], &[1.0, 4.0, 16.0, 64.0, 256.0]),
        0.0,
        0,
        Family::Diffusion,
    )
    .unwrap();
    let fit = fit_two_stage(&runs, &FitConfig::<f64>::default()).unwrap();
    assert!(rel(fit.law.r_d_star, law.r_d_star) < 1e-3, "{:?}", fit.law);
    assert!(rel(fit.law.r_n_star, law.r_n_star) < 1e-3, "{:?}", fit.law);
    assert!(!fit.report.stage2.weak_identification);
}

#[test]
fn noisy_stage2_recovers_r_d_with_true_stage1() {
    let law = paper_law();
    let runs = synth_runs(&law, &grid(&[1e7, 1e8], &[1e7, 1e8, 1e9], &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0]), 0.01, 11, Family::Ar)
        .unwrap();
    let (s2, _) = fit_stage2(&runs, &Stage1::from(&law), &FitConfig::<f64>::default()).unwrap();
    assert!(rel(s2.r_d_star, law.r_d_star) < 0.10, "{s2:?}");
}

#[test]
fn stage2_leaves_stage1_constants_untouched() {
    let law = paper_law();
    let runs = synth_runs(&law, &design(&law, &[1e8, 1e9], &[0.1, 0.3, 1.0], &[1.0, 4.0, 16.0]), 0.01, 5, Family::Ar).unwrap();
    let fit = fit_two_stage(&runs, &FitConfig::<f64>::default()).unwrap();
    let s1 = fit.stage1;
    assert_eq!(
        (fit.law.a.to_bits(), fit.law.b.to_bits(), fit.law.alpha.to_bits(), fit.law.beta.to_bits(), fit.law.e0.to_bits()),
        (s1.a.to_bits(), s1.b.to_bits(), s1.alpha.to_bits(), s1.beta.to_bits(), s1.e0.to_bits())
    );
}

#[test]
fn weak_identification_flagged_for_two_epoch_designs() {
    let law = paper_law();
    let runs = synth_runs(&law, &grid(&[1e7, 1e8], &[1e8, 1e9], &[1.0, 2.0]), 0.0, 0, Family::Ar).unwrap();
    let (_, rep) = fit_stage2(&runs, &Stage1::from(&law), &FitConfig::<f64>::default()).unwrap();
    assert!(rep.weak_identification);
}

#[test]
fn fit_is_reproducible_and_serializes_with_three_sections() {
    let law = paper_law();
    let runs: Vec<RunRecord> = synth_runs(&law, &design(&law, &[1e8, 1e9], &[0.1, 0.3, 1.0], &[1.0, 8.0]), 0.01, 2, Family::Ar).unwrap();
    let cfg = FitConfig::<f64> { n_starts: 16, ..Default::default() };
    let a = fit_two_stage(&runs, &cfg).unwrap();
    let b = fit_two_stage(&runs, &cfg).unwrap();
    assert_eq!(a, b);
    let v = serde_json::to_value(&a).unwrap();
    for key in ["stage1", "stage2", "report"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(v["stage1"].get("A").is_some() && v["stage2"].get("r_d_star").is_some());
}

#[test]
fn f32_fit_runs() {
    let law = paper_law();
    let runs = synth_runs(&law, &design(&law, &[1e8, 1e9, 1e10], &[0.05, 0.2, 1.0], &[1.0]), 0.0, 0, Family::Ar).unwrap();
    let cfg = FitConfig::<f32> { n_starts: 16, ..Default::default() };
    let (s1, _) = fit_stage1(&runs, &cfg).unwrap();
    assert!(rel(s1.e0 as f64, law.e0) < 0.05, "{s1:?}");
}
