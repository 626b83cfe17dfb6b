use criterion::{criterion_group, criterion_main, Criterion};

use dualseg_bench::bench_volume;
use dualseg_core::grid::Dims;
use dualseg_core::net::{Mode, Network, NetworkConfig, OutputGrads};

fn bench_forward_backward(c: &mut Criterion) {
    let cfg = NetworkConfig::desk_default(3);
    let mut net = Network::build(&cfg).unwrap();
    net.set_mode(Mode::Eval);
    let x = bench_volume(Dims::new(8, 24, 24), 11);

    c.bench_function("net_forward_8x24x24", |b| {
        b.iter(|| net.forward(&x).unwrap())
    });

    c.bench_function("net_forward_backward_8x24x24", |b| {
        b.iter(|| {
            let (out, tape) = net.forward(&x).unwrap();
            let mut g = OutputGrads::zeros_like(&out);
            g.seg.iter_mut().for_each(|v| *v = 1.0);
            net.zero_grads();
            net.backward(&tape, &g).unwrap();
        })
    });
}

criterion_group!(benches, bench_forward_backward);
criterion_main!(benches);
