use std::f64::consts::PI;

use idsm_core::dtn::HrDtnParams;
use idsm_core::fem::Model;
use idsm_core::idsm::{expected_solve_count, run, Dataset, IterationRecord, RunConfig};
use idsm_core::mesh::{build_coarse_map, build_disk_mesh, partition_boundary, AngleArc};
use idsm_core::models::{make_problem, make_source, synthesize_data, DataMesh, InclusionShape, Shape};
use idsm_core::resolver::{Scheme, DEFAULT_EPS_BAND};

fn reconstruct(model: Model, truth: &[InclusionShape], eps: f64, scheme: Scheme, iterations: usize) -> Vec<IterationRecord> {
    let mesh = build_disk_mesh(1500).unwrap();
    let cells = build_coarse_map(&mesh, &build_disk_mesh(200).unwrap()).unwrap();
    let part = partition_boundary(&mesh, &[AngleArc::new(-PI / 2.0, PI / 2.0)]).unwrap();
    let problem = make_problem(model);
    let exprs: &[&str] = match model {
        Model::Ce => &["ce1", "ce2"],
        Model::Modulus => &["x1sq"],
        _ => &["sin4pi", "cos4pi"],
    };
    let data = if truth.is_empty() { DataMesh::Same } else { DataMesh::Refined };
    let datasets: Vec<Dataset> = exprs
        .iter()
        .enumerate()
        .map(|(i, e)| Dataset {
            source: make_source(&problem, &mesh, e).unwrap(),
            y_d: synthesize_data(&problem, &mesh, &part, truth, e, eps, 11 + i as u64, data).unwrap().y_d,
        })
        .collect();
    let cfg = RunConfig {
        problem,
        params: HrDtnParams { alpha_d: 0.05, alpha_n: 2.0 },
        p_index: 2.0,
        scheme,
        iterations,
        eps_band: DEFAULT_EPS_BAND,
        probes: 10,
        seed: 4,
    };
    run(cfg, &mesh, &part, cells, &datasets).unwrap()
}

fn truth(model: Model) -> Vec<InclusionShape> {
    let amplitudes = match model {
        Model::Eit => vec![-0.9],
        Model::Dot => vec![-0.9, 9.0],
        Model::Ce => vec![1.0],
        Model::Modulus => vec![40.0],
    };
    vec![InclusionShape { shape: Shape::Disk { center: [0.35, 0.1], radius: 0.25 }, amplitudes }]
}

#[test]
fn every_model_and_scheme_keeps_the_run_invariants() {
    for model in [Model::Eit, Model::Dot, Model::Ce, Model::Modulus] {
        for scheme in [Scheme::Dfp, Scheme::Bfg] {
            let problem = make_problem(model);
            let h = reconstruct(model, &truth(model), 0.1, scheme, 5);
            assert_eq!(h.last().unwrap().pde_solve_count, expected_solve_count(&problem, 5), "{model:?}");
            assert!(h.windows(2).all(|w| w[1].pde_solve_count > w[0].pde_solve_count));
            assert_eq!(h[1].lambda, 1.0, "{model:?} {scheme:?}");
            for r in &h[1..] {
                assert!(r.lambda >= 0.0);
                for (t, u) in problem.types.iter().zip(&r.u) {
                    assert!(u.iter().all(|&v| v >= t.lower && v <= t.upper));
                }
                if r.k + 1 < h.len() {
                    let d = &r.diagnostics;
                    assert!(d.skipped.is_none(), "{model:?} {scheme:?} k={}: {:?}", r.k, d.skipped);
                    assert!(d.pairing.unwrap() > 0.0);
                    assert!(d.secant_residual.unwrap() <= 1e-10);
                    assert!(d.probe_ratio.unwrap() <= 1.0);
                }
            }
        }
    }
}

#[test]
fn zero_problem_yields_no_inclusion() {
    for model in [Model::Eit, Model::Dot, Model::Ce, Model::Modulus] {
        let h = reconstruct(model, &[], 0.0, Scheme::Bfg, 30);
        for r in &h {
            let max = r.u.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max <= 1e-6, "{model:?} k={} max {max}", r.k);
        }
    }
}

#[test]
fn identical_inputs_give_identical_histories() {
    let a = reconstruct(Model::Dot, &truth(Model::Dot), 0.15, Scheme::Dfp, 4);
    let b = reconstruct(Model::Dot, &truth(Model::Dot), 0.15, Scheme::Dfp, 4);
    assert_eq!(a, b);
}
