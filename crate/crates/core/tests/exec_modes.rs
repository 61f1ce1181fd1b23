use std::f64::consts::FRAC_PI_3;

use capflow::flow::{self, FlowConfig, InitialSpec, PhiSpec};
use capflow::par::{self, ExecMode};

#[test]
fn sequential_and_parallel_runs_are_bit_identical() {
    let mut cfg = FlowConfig::new(
        FRAC_PI_3,
        2,
        32,
        64,
        PhiSpec::Power { p: 4.0 },
        "1 + 0.2*x1",
    );
    cfg.h0 = InitialSpec {
        scale: 1.0,
        amplitude: 0.1,
        mode: Some("random".into()),
    };
    cfg.t_max = 0.5;
    let mut runs = Vec::new();
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        par::set_mode(mode);
        runs.push(flow::run(&cfg).unwrap());
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(
        bits(runs[0].final_h.values()),
        bits(runs[1].final_h.values())
    );
    assert_eq!(runs[0].steps, runs[1].steps);
    for (a, b) in runs[0].rows.iter().zip(&runs[1].rows) {
        assert_eq!(a.j.to_bits(), b.j.to_bits());
        assert_eq!(a.dissipation.to_bits(), b.dissipation.to_bits());
    }
}
