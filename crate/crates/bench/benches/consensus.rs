use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use dssfn::consensus::{run_layer_consensus, NodeState, SolverConfig};
use dssfn::topology::circulant_graph;
use dssfn::Graph;
use dssfn_bench::layer_problem;

fn nodes(g: &Graph, p: usize, q: usize, j: usize) -> Vec<NodeState> {
    (0..g.node_count())
        .map(|m| {
            let (y, t) = layer_problem(m as u64, p, q, j);
            NodeState::new(m, y, t, g.neighbors(m).unwrap(), 0.1, 2.0 * q as f64).unwrap()
        })
        .collect()
}

fn activation(c: &mut Criterion) {
    // A hidden-layer node with few samples: the Woodbury path.
    let g = circulant_graph(20, 8).unwrap();
    let state = nodes(&g, 1022, 11, 26).swap_remove(0);
    c.bench_function("node update p=1022 J=26 d=8", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| black_box(s.update(0.5, 1).unwrap()),
            BatchSize::LargeInput,
        )
    });
}

fn layer(c: &mut Criterion) {
    let g = circulant_graph(20, 4).unwrap();
    let base = nodes(&g, 60, 4, 30);
    let mut group = c.benchmark_group("layer consensus M=20 d=4");
    group.sample_size(20);
    let sync = SolverConfig::synchronous(0.1, 20);
    group.bench_function("sync 20 rounds", |b| {
        b.iter_batched(
            || base.clone(),
            |mut ns| run_layer_consensus(&mut ns, &g, &sync, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let asy = SolverConfig::asynchronous(0.1, 400).with_staleness(2);
    group.bench_function("async 400 activations", |b| {
        b.iter_batched(
            || base.clone(),
            |mut ns| run_layer_consensus(&mut ns, &g, &asy, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, activation, layer);
criterion_main!(benches);
