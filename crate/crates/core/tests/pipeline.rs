use gprloc::app::ate::ate_rmse;
use gprloc::app::benchmark::{registration_benchmark, registration_config};
use gprloc::app::config::Config;
use gprloc::app::pipeline::{backend, frontend, run_pipeline, truth_at_states, Backend};
use gprloc::simworld::{simulate, RunConfig, SensorConfig, TrajectoryConfig};
use gprloc::Error;

fn truth_list(data: &gprloc::simworld::RawDataset) -> Vec<(f64, gprloc::geom::Pose3)> {
    data.truth.iter().map(|s| (s.t, s.pose)).collect()
}

#[test]
fn odometry_only_on_noise_free_line_ends_at_truth() {
    let mut cfg = Config::default();
    cfg.simulation.trajectory = TrajectoryConfig::straight(20.0);
    cfg.simulation.run = RunConfig::noise_free();
    cfg.simulation.sensor = SensorConfig::clean();
    let (_, data) = simulate(&cfg.simulation, 5).unwrap();
    let (front, run) = run_pipeline(&data, &cfg, Backend::OdometryOnly).unwrap();
    let truth = truth_at_states(&front, &data).unwrap();
    let (t_end, est_end) = run.estimate.last().unwrap();
    let (t_truth, truth_end) = truth.last().unwrap();
    assert_eq!(t_end, t_truth);
    let err = (est_end.translation - truth_end.translation).norm();
    assert!(err < 1e-3, "endpoint error {err}");
}

#[test]
fn stream_gap_is_a_named_error() {
    let cfg = Config::default();
    let (_, mut data) = simulate(&cfg.simulation, 2).unwrap();
    let n = data.imu.len();
    data.imu.drain(n / 2..n / 2 + 200);
    match run_pipeline(&data, &cfg, Backend::OdometryOnly) {
        Err(Error::Stream(msg)) => assert!(msg.contains("imu"), "{msg}"),
        other => panic!("expected a stream error, got {other:?}"),
    }
}

#[test]
fn learned_model_corrects_forward_backward_drift() {
    let base = registration_config(&Config::default());
    let (model, report) = registration_benchmark(&base, &[11, 12, 13]).unwrap();
    assert!(report.combined.learned < report.combined.zeroth);
    assert!(report.combined.learned < report.combined.engineered);

    let mut cfg = Config::default();
    cfg.simulation.world = base.simulation.world.clone();
    cfg.simulation.trajectory = TrajectoryConfig::forward_backward(20.0);
    let (_, data) = simulate(&cfg.simulation, 21).unwrap();
    let front = frontend(&data, &cfg).unwrap();
    assert!(front.pairs().count() > 0);
    let truth = truth_list(&data);
    let odo = backend(&front, &data, &cfg, Backend::OdometryOnly).unwrap();
    let learned = backend(&front, &data, &cfg, Backend::Learned(&model)).unwrap();
    assert_eq!(odo.loop_closure_set, learned.loop_closure_set);
    let (a_odo, a_learned) = (ate_rmse(&odo.estimate, &truth).unwrap(), ate_rmse(&learned.estimate, &truth).unwrap());
    assert!(a_learned < a_odo, "learned {a_learned} odometry {a_odo}");
}
