use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use resx_bench::{mixture, noise};
use resx_core::flow::{ScalePair, TimeSchedule};
use resx_core::guidance::{extra_stage, native_stage, GuidanceConfig, GuidanceMode, TwoStageSetup};
use resx_core::mmdit::{build_model, forward_audit, TokenSequence};
use resx_core::oracle::{DegradationConfig, DegradedOracle, ExactOracle};
use resx_core::projection::{lowpass, ProjectionConfig};
use resx_core::toolkit::{ToolkitConfig, ToolkitPreset};

fn projection(c: &mut Criterion) {
    let mut group = c.benchmark_group("lowpass");
    for side in [32, 128, 256] {
        let x = noise(side, 1);
        let cfg = ProjectionConfig::native_band(side / 4, side);
        group.bench_with_input(BenchmarkId::from_parameter(side), &x, |b, x| b.iter(|| lowpass(x, &cfg)));
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let mix = mixture(128);
    let x = noise(128, 2);
    c.bench_function("mixture_velocity_128", |b| b.iter(|| mix.velocity(&x, 0.4).unwrap()));
}

fn two_stage(c: &mut Criterion) {
    let native = mixture(32);
    let extra = mixture(128);
    let exact = ExactOracle(&native);
    let degraded = DegradedOracle { mixture: &extra, degradation: DegradationConfig::preset() };
    let schedule = TimeSchedule::uniform(30).unwrap();
    let setup = TwoStageSetup {
        native_source: &exact,
        extra_source: &degraded,
        native_shape: native.shape(),
        factor: 4,
        native_schedule: &schedule,
        extra_schedule: &schedule,
    };
    let x1 = native_stage(&setup, 0).unwrap();
    let mut group = c.benchmark_group("extra_stage");
    group.sample_size(10);
    for mode in [GuidanceMode::None, GuidanceMode::ProjectedFlow] {
        let cfg = GuidanceConfig::new(mode);
        group.bench_function(mode.name(), |b| b.iter(|| extra_stage(&setup, &x1, &cfg, 0).unwrap()));
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let model = build_model(0, 256, 64, 4, 2).unwrap();
    let mut group = c.benchmark_group("forward_audit");
    group.sample_size(10);
    for side in [8, 16, 32] {
        let seq = TokenSequence::joint(0, 256, 32, (side, side), None).unwrap();
        let toolkit =
            ToolkitConfig::preset(ToolkitPreset::Lumina, ScalePair::square(8, side).unwrap()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(side * side + 32), &seq, |b, seq| {
            b.iter(|| forward_audit(&model, seq, &toolkit).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, projection, oracle, two_stage, attention);
criterion_main!(benches);
