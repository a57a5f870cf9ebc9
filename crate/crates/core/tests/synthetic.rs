use pareto_debias::eval::{generate_synthetic, run_report, DebiasMode, MetricsSpec, SynthSpec, Task, Workspace};
use pareto_debias::vector::{dot, norm};
use pareto_debias::{build_subspace, Solver};

fn report(spec: &SynthSpec, mode: DebiasMode, tasks: Vec<Task>) -> pareto_debias::eval::EvalReport {
    let data = generate_synthetic(spec).unwrap();
    let s = build_subspace(&data.prototypes, "group-0", 1e-10).unwrap();
    let queries = data.retrieval_queries();
    let ws = Workspace::new(data.images, data.texts, data.class_prompts, s, mode, Solver::default()).unwrap();
    run_report(&ws, &queries, &MetricsSpec { tasks, ..MetricsSpec::default() }).unwrap()
}

#[test]
fn planted_directions_are_orthogonal_and_vectors_unit() {
    let spec = SynthSpec { samples_per_cell: 5, n_groups: 3, n_classes: 4, ..SynthSpec::default() };
    let data = generate_synthetic(&spec).unwrap();
    for e in data.images.iter().chain(&data.texts) {
        assert!((norm(&e.vector) - 1.0).abs() < 1e-12);
    }
    let s = build_subspace(&data.prototypes, "group-0", 1e-10).unwrap();
    assert_eq!(s.rank(), 2);
    // class prompts without their stereotyped attribute are orthogonal to the subspace
    for k in 0..spec.n_classes {
        let mut c = vec![0.0; spec.d];
        c[k] = 1.0;
        assert!(norm(&s.project_parallel(&c).unwrap()) < 1e-12);
    }
    for (q, i) in &data.qrels {
        let cap = data.texts.iter().find(|t| &t.id == q).unwrap();
        let img = data.images.iter().find(|m| &m.id == i).unwrap();
        assert_eq!(cap.labels, img.labels);
        assert!(dot(&cap.vector, &img.vector) > 0.5);
    }
}

#[test]
fn no_leakage_means_no_eo_gap() {
    let spec = SynthSpec { leakage_strength: 0.0, seed: 3, ..SynthSpec::default() };
    let r = report(&spec, DebiasMode::None, vec![Task::Classify]);
    assert!(r.classification.unwrap().eo.delta_avg < 0.02);
}

/// Frozen regression value: baseline EO gap at leakage 0.8, noise 0.05.
const BASELINE_EO_FLOOR: f64 = 0.1;

#[test]
fn planted_leakage_produces_eo_gap_that_both_mode_removes() {
    let spec = SynthSpec { seed: 7, ..SynthSpec::default() };
    let none = report(&spec, DebiasMode::None, vec![Task::Classify]).classification.unwrap();
    let both = report(&spec, DebiasMode::Both, vec![Task::Classify]).classification.unwrap();
    assert!(none.eo.delta_avg > BASELINE_EO_FLOOR, "{}", none.eo.delta_avg);
    assert!(both.eo.delta_avg < none.eo.delta_avg);
}

#[test]
fn full_report_populates_every_field() {
    let spec = SynthSpec { samples_per_cell: 60, noise_sigma: 0.2, ..SynthSpec::default() };
    let r = report(&spec, DebiasMode::Both, vec![Task::Classify, Task::Retrieve]);
    let json: serde_json::Value = serde_json::from_str(&pareto_debias::io::to_json_pretty(&r).unwrap()).unwrap();
    for path in [
        "/config/max_skew_log_base",
        "/classification/eo/delta_avg",
        "/classification/eo/delta_max",
        "/classification/f1/macro_f1",
        "/retrieval/max_skew",
        "/retrieval/recall_at_k/1",
        "/solver/mean_alpha_star",
        "/solver/mean_self_utility_loss",
        "/solver/max_cross_bound",
        "/bound_check/theorem1_pass",
        "/bound_check/prop1_pass",
    ] {
        let v = json.pointer(path).unwrap_or_else(|| panic!("missing {path}"));
        assert!(!v.is_null(), "{path} is null");
    }
    let bc = r.bound_check.unwrap();
    assert!(bc.theorem1_pass && bc.prop1_pass && bc.pairs_checked > 0);
    let st = r.solver.unwrap();
    assert!(st.n_debiased > 0 && st.mean_alpha_star > 0.0);
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let spec = SynthSpec { samples_per_cell: 20, ..SynthSpec::default() };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    let bytes = |d: &pareto_debias::eval::SynthDataset| {
        pareto_debias::io::write_embf(&d.images, pareto_debias::io::Dtype::F64).unwrap()
    };
    assert_eq!(bytes(&a), bytes(&b));
}
