mod common;

use moacl::harness::metrics::{metrics_csv, read_metrics_csv};
use moacl::harness::{run_modes, RoutingMode};

#[test]
fn tiny_runs_are_reproducible() {
    let cfg = common::tiny_config();
    let (frozen, p, log, state) = common::tiny_run(&cfg);
    let (again, state2) = {
        let (frozen2, p2, log2, state2) = common::tiny_run(&cfg);
        assert_eq!(frozen2.digest(), frozen.digest());
        assert_eq!(p2.tasks, p.tasks);
        (log2, state2)
    };
    assert_eq!(metrics_csv(&log), metrics_csv(&again));
    assert_eq!(state, state2);

    let (logs, _) = run_modes(&cfg, &frozen, &p, &[RoutingMode::Latest, RoutingMode::Generative]).unwrap();
    assert_eq!(metrics_csv(&logs[1]), metrics_csv(&log));
    assert_eq!(logs[0].forced_final, log.forced_final);
}

#[test]
fn tiny_run_bookkeeping() {
    let cfg = common::tiny_config();
    let (_, p, log, state) = common::tiny_run(&cfg);
    assert_eq!(p.tasks.len(), 2);
    assert_eq!(log.final_acc.len(), 2);
    assert_eq!(log.running_avg.len(), 2);
    assert_eq!(state.bank.len(), 1);
    assert_eq!(state.router.len(), 2);
    assert_eq!(log.routed_to, vec![state.bank.slots()[0].id; 2]);
    assert_eq!(state.bank.slots()[0].class_ids.len(), 4);
    state.gate_map.validate(&state.bank).unwrap();
    let summary = read_metrics_csv(&metrics_csv(&log)).unwrap();
    assert_eq!(summary.tasks, 2);
    assert_eq!(summary.params_trainable, log.footprint[1].total);
    assert!((summary.avg_acc - log.avg_acc as f64).abs() < 1e-5);
    for t in 0..2 {
        assert_eq!(state.memory.get(t).unwrap().len(), cfg.replay);
    }
}
