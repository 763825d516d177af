use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mlnn::problems::{poisson1d, poisson2d};
use mlnn::{collocation_grid, xavier_init, ArchitectureKind, CollocationLoss, NetworkSpec, ProblemDef};

fn bench_case(c: &mut Criterion, name: &str, problem: &ProblemDef, widths: Vec<usize>, m: usize) {
    let spec = NetworkSpec::new(problem.dim(), widths, m, problem.domain_length(), ArchitectureKind::FourierSine)
        .expect("valid spec");
    let params = xavier_init(&spec, 0).into_vec();
    let points = collocation_grid(problem, None);
    let source: Vec<f64> = points.iter().map(|x| problem.source(x)).collect();
    let loss = CollocationLoss {
        operator: *problem.operator(),
        lift: problem.lift().copied(),
        points: &points,
        source: &source,
        scale: 1.0,
    };
    let mut group = c.benchmark_group("loss_and_gradient");
    group.bench_function(BenchmarkId::new(name, spec.param_count()), |b| {
        b.iter(|| loss.loss_and_gradient(&spec, &params).expect("finite loss"))
    });
    group.bench_function(BenchmarkId::new(format!("{name}_loss_only"), spec.param_count()), |b| {
        b.iter(|| loss.loss(&spec, &params).expect("finite loss"))
    });
    group.finish();
}

fn loss_gradient(c: &mut Criterion) {
    let p1 = poisson1d(2).expect("valid problem");
    bench_case(c, "poisson1d_w20_m3", &p1, vec![20], 3);
    bench_case(c, "poisson1d_w40_m8", &p1, vec![40], 8);
    bench_case(c, "poisson2d_w20x20_m3", &poisson2d(), vec![20, 20], 3);
}

criterion_group!(benches, loss_gradient);
criterion_main!(benches);
