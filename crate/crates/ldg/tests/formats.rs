use ldg::harness::{Estimator, TrainingRecord};
use ldg::io::{
    fmt_f64, grad_columns, read_grad_table, read_matrix, read_mdp, read_pair_table, write_grad_table, write_matrix,
    write_mdp, write_pair_table,
};
use ldg::report::{emit_report, read_curves, render_svg};
use ldg_core::nalgebra::DMatrix;
use ldg_core::rng::rng_from_seed;
use ldg_core::{make_gridworld, GradTable, TabularMdp};
use rand::Rng;

fn awkward_values() -> Vec<f64> {
    let mut rng = rng_from_seed(3);
    let mut v = vec![0.1, 1.0 / 3.0, -2.0f64.sqrt(), 1e-300, -4.9e-324, 1.7976931348623157e308, 0.0, -0.0];
    v.extend((0..200).map(|_| rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-20..20))));
    v
}

#[test]
fn floats_survive_text_round_trip() {
    for v in awkward_values() {
        assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits(), "{v:e}");
    }
}

#[test]
fn pair_tables_round_trip_bit_for_bit() {
    let values = awkward_values();
    let rows = DMatrix::from_fn(6, 3, |r, c| values[r * 3 + c]);
    let mut buf = Vec::new();
    write_pair_table(&mut buf, 2, &grad_columns(3), &rows).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("s,a,theta0,theta1,theta2\n0,0,"));
    let (columns, na, back) = read_pair_table(buf.as_slice()).unwrap();
    assert_eq!(columns, grad_columns(3));
    assert_eq!(na, 2);
    assert!(rows.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csv");
    let table = GradTable { gamma: 0.9, w: rows.clone() };
    write_grad_table(&path, &table, 2).unwrap();
    assert_eq!(read_grad_table(&path, 0.9).unwrap(), table);
    let mpath = dir.path().join("m.csv");
    write_matrix(&mpath, &rows).unwrap();
    assert_eq!(read_matrix(&mpath).unwrap(), rows);
}

#[test]
fn mdp_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.json");
    let grid = make_gridworld(3).unwrap();
    write_mdp(&path, &grid).unwrap();
    assert_eq!(read_mdp(&path).unwrap(), grid);

    let skewed = TabularMdp::new(2, 1, vec![0.3, 0.7, 1.0 / 3.0, 2.0 / 3.0], vec![0.1, -0.2], vec![0.25, 0.75], 0.95)
        .unwrap();
    write_mdp(&path, &skewed).unwrap();
    assert_eq!(read_mdp(&path).unwrap(), skewed);

    std::fs::write(&path, r#"{"num_states": 1, "num_actions": 1, "transition": [[[0.5]]], "reward": [[0]], "initial_dist": [1], "discount": 0.9}"#).unwrap();
    assert!(read_mdp(&path).is_err());
    std::fs::write(&path, r#"{"num_states": 1, "num_actions": 1, "transition": [[[1]]], "reward": [[0]], "initial_dist": [1], "discount": 0.9, "extra": 1}"#).unwrap();
    assert!(read_mdp(&path).is_err());
}

fn records(estimators: &[Estimator], seeds: u64, iterations: usize) -> Vec<TrainingRecord> {
    let mut out = Vec::new();
    for &estimator in estimators {
        for seed in 0..seeds {
            for iteration in 0..=iterations {
                out.push(TrainingRecord {
                    estimator,
                    seed,
                    iteration,
                    j1: 0.1 * iteration as f64 + 0.01 * seed as f64 + 1.0 / 3.0,
                    gradient_error: (iteration > 0).then_some(0.5 / (iteration as f64)),
                    samples_consumed: 100 * iteration as u64,
                    wall_clock_ns: 12_345 * iteration as u128,
                });
            }
        }
    }
    out
}

#[test]
fn curves_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(&[Estimator::Reinforce, Estimator::MinmaxLdg], 3, 4);
    emit_report(&recs, dir.path()).unwrap();
    let back = read_curves(&dir.path().join("curves.csv")).unwrap();
    assert_eq!(back, recs);
    let header = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert!(header.starts_with("estimator,seed,iteration,J1,gradient_error,samples_consumed,wall_clock_ns\nreinforce,0,0,"));
    assert!(emit_report(&[], dir.path()).is_err());
}

#[test]
fn svg_has_one_band_and_mean_per_estimator() {
    let recs = records(&[Estimator::Reinforce, Estimator::MinmaxLdg], 3, 10);
    let svg = render_svg(&recs);
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("class=\"band\"").count(), 2);
    assert_eq!(svg.matches("class=\"mean\"").count(), 2);
    assert!(svg.contains("reinforce") && svg.contains("minmax-ldg"));
    assert!(!svg.contains("theoretical-pg"));
}
