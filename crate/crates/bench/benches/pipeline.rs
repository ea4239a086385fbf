//! Benchmarks of the hot paths: right-hand-side evaluation, the five-beat
//! limit-cycle solve, one adjoint gradient of the two-channel fitting cost,
//! and Saltelli design generation.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use cardioestim::adjoint::{
    adjoint_gradient, sample_channels, CostObjective, CoupledSensitivity, Protocol,
    SensitivityModel,
};
use cardioestim::coupled::CoupledModel;
use cardioestim::ode::{integrate, run_to_limit_cycle, OdeSystem, SolverConfig};
use cardioestim::params::{ParamId, ParameterSet, ParameterVector};
use cardioestim::qoi::{qois_from_samples, ChannelId, CostWeights};
use cardioestim::sensitivity::saltelli_sample;

fn bench_rhs(c: &mut Criterion) {
    let mut model = CoupledModel::elastance(ParameterSet::baseline()).unwrap();
    let y = model.initial_state();
    let mut dy = vec![0.0; model.dim()];
    c.bench_function("coupled_rhs", |b| {
        b.iter(|| {
            model
                .rhs(black_box(0.37), black_box(&y), &mut dy)
                .unwrap();
            black_box(dy[0])
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    c.bench_function("forward_five_beats", |b| {
        b.iter(|| {
            let mut model = CoupledModel::elastance(ParameterSet::baseline()).unwrap();
            let s0 = model.initial_state();
            let run = run_to_limit_cycle(&mut model, &s0, 5, 0.8, 0.01, &cfg).unwrap();
            black_box(run.final_state[0])
        })
    });
}

fn t_lv_setup() -> (CoupledSensitivity, CostObjective, Protocol, SolverConfig) {
    let params = ParameterSet::baseline();
    let model = CoupledModel::elastance(params.clone()).unwrap();
    let ids = [ParamId::AXb, ParamId::RArSys, ParamId::VHeartTot];
    let theta = ParameterVector::from_set(&ids, &params).unwrap();
    let channels = vec![ChannelId::PArSys, ChannelId::VLv];
    let mut sys = CoupledSensitivity::new(model, theta, channels.clone()).unwrap();
    let protocol = Protocol::beats(5, 0.8, 0.01);
    let cfg = SolverConfig::default();
    let grid = protocol.grid();
    let s0 = sys.init_state();
    let sol = integrate(&mut sys, &s0, (0.0, protocol.t_end), &cfg, &grid).unwrap();
    let sim = sample_channels(&sys, &grid, &sol.samples);
    let pairs: Vec<(ChannelId, Vec<f64>)> = channels.iter().cloned().zip(sim).collect();
    let objective = CostObjective {
        obs: qois_from_samples(0.01, &pairs),
        weights: CostWeights::traces_only(&channels),
        channels,
        dt_sample: 0.01,
    };
    (sys, objective, protocol, cfg)
}

fn bench_gradient(c: &mut Criterion) {
    let (mut sys, objective, protocol, cfg) = t_lv_setup();
    sys.set_theta(&[230.0, 0.75, 450.0]).unwrap();
    let mut group = c.benchmark_group("adjoint");
    group.sample_size(10);
    group.bench_function("t_lv_gradient", |b| {
        b.iter(|| {
            let res = adjoint_gradient(&mut sys, &objective, &protocol, &cfg).unwrap();
            black_box(res.gradient[0])
        })
    });
    group.finish();
}

fn bench_saltelli(c: &mut Criterion) {
    c.bench_function("saltelli_design_1024x3", |b| {
        b.iter(|| {
            let d = saltelli_sample(&[0.0; 3], &[1.0; 3], 1024, black_box(7)).unwrap();
            black_box(d.a[17][1])
        })
    });
}

criterion_group!(benches, bench_rhs, bench_forward, bench_gradient, bench_saltelli);
criterion_main!(benches);
