//! Synthesised attenuation traces: periodicity, velocity invariance, noise and file round trips.

use magneto_encoder::circulator::CirculatorModel;
use magneto_encoder::encoder::calibrate_lumped_k;
use magneto_encoder::sweep::{
    read_trace, read_trace_from, rotor_field_at_sites, sweep_with_curve, synthesize_sweep, write_trace,
    write_trace_file, ResponseCurve, RotorAssembly, RotorParams, SweepConfig,
};
use magneto_encoder::Error;
use proptest::prelude::*;

fn curve() -> &'static ResponseCurve {
    static CELL: std::sync::OnceLock<ResponseCurve> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let base = CirculatorModel::default();
        let assembly = RotorAssembly::new(&RotorParams::default(), &base).unwrap();
        let model = calibrate_lumped_k(&base, &assembly, 0.017, 0.3, 0.1).unwrap();
        ResponseCurve::new(&model, &assembly).unwrap()
    })
}

#[test]
fn reference_is_the_minimum_over_a_revolution() {
    let c = curve();
    let lowest = (0..36000)
        .map(|i| c.alpha_db(i as f64 * 0.01).unwrap())
        .fold(f64::INFINITY, f64::min);
    assert!(lowest >= -1e-9, "{lowest}");
    assert!(lowest < 1e-3, "{lowest}");
}

#[test]
fn noiseless_revolution_closes() {
    let trace = sweep_with_curve(
        curve(),
        &SweepConfig {
            noise_sigma_db: 0.0,
            ..SweepConfig::default()
        },
        0,
    )
    .unwrap();
    let (first, last) = (trace.alpha_db[0], *trace.alpha_db.last().unwrap());
    assert_eq!(*trace.theta_true_deg.as_ref().unwrap().last().unwrap(), 360.0);
    assert!((first - last).abs() < 1e-9);
}

#[test]
fn noise_envelope_matches_sigma() {
    let cfg = SweepConfig {
        revolutions: 4,
        ..SweepConfig::default()
    };
    let noisy = sweep_with_curve(curve(), &cfg, 12).unwrap();
    let clean = sweep_with_curve(
        curve(),
        &SweepConfig {
            noise_sigma_db: 0.0,
            ..cfg.clone()
        },
        12,
    )
    .unwrap();
    let residual: Vec<f64> = noisy.alpha_db.iter().zip(&clean.alpha_db).map(|(n, c)| n - c).collect();
    let n = residual.len() as f64;
    let mean = residual.iter().sum::<f64>() / n;
    let sd = (residual.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 4.0 * 0.017 / n.sqrt(), "{mean}");
    assert!((sd / 0.017 - 1.0).abs() < 0.1, "{sd}");
    let inside = residual.iter().filter(|r| r.abs() <= 0.05).count() as f64 / n;
    assert!(inside >= 0.99, "{inside}");
}

#[test]
fn same_seed_same_trace() {
    let cfg = SweepConfig::default();
    assert_eq!(
        sweep_with_curve(curve(), &cfg, 3).unwrap(),
        sweep_with_curve(curve(), &cfg, 3).unwrap()
    );
    assert_ne!(
        sweep_with_curve(curve(), &cfg, 3).unwrap().alpha_db,
        sweep_with_curve(curve(), &cfg, 4).unwrap().alpha_db
    );
}

#[test]
fn trace_file_round_trip_is_exact() {
    let trace = sweep_with_curve(curve(), &SweepConfig::default(), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace_file(&path, &trace).unwrap();
    assert_eq!(read_trace(&path).unwrap(), trace);
}

#[test]
fn empty_trace_writes_only_a_header() {
    let mut out = Vec::new();
    write_trace(&mut out, &Default::default()).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(read_trace_from(text.as_bytes()).unwrap().is_empty());
}

#[test]
fn bad_header_is_a_parse_error_on_line_one() {
    let err = read_trace_from("time,alpha\n0,1\n".as_bytes()).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
}

#[test]
fn zero_remanence_adds_no_field_and_no_signal() {
    let base = CirculatorModel::default();
    let params = RotorParams {
        remanence_t: 0.0,
        ..RotorParams::default()
    };
    let assembly = RotorAssembly::new(&params, &base).unwrap();
    for theta in [0.0, 77.0, 200.0] {
        assert_eq!(rotor_field_at_sites(&assembly, &base, theta).unwrap(), [0.0, 0.0]);
    }
}

#[test]
fn invalid_sweeps_are_rejected() {
    let base = CirculatorModel::default();
    let assembly = RotorAssembly::new(&RotorParams::default(), &base).unwrap();
    for cfg in [
        SweepConfig {
            velocity_deg_per_s: 0.0,
            ..SweepConfig::default()
        },
        SweepConfig {
            revolutions: 0,
            ..SweepConfig::default()
        },
        SweepConfig {
            noise_sigma_db: -1.0,
            ..SweepConfig::default()
        },
    ] {
        assert!(matches!(
            synthesize_sweep(&assembly, &base, &cfg, 0),
            Err(Error::Argument(_))
        ));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn response_is_periodic(theta in -720.0..720.0f64) {
        let c = curve();
        prop_assert!((c.alpha_db(theta).unwrap() - c.alpha_db(theta + 360.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn velocity_only_changes_the_sampling(v in 100.0..400.0f64, k in 1usize..50) {
        let cfg = SweepConfig { velocity_deg_per_s: v, noise_sigma_db: 0.0, ..SweepConfig::default() };
        let trace = sweep_with_curve(curve(), &cfg, 0).unwrap();
        let k = k.min(trace.len() - 1);
        let theta = trace.theta_true_deg.as_ref().unwrap()[k];
        prop_assert!((trace.alpha_db[k] - curve().alpha_db(theta).unwrap()).abs() < 1e-12);
    }
}
