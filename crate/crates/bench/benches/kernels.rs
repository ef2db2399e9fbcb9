use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tidn_core::diffnet::{Denoiser, Mode, NetworkSpec, ParameterSet, Tensor};
use tidn_core::imaging::{fbp, radon, AcquisitionConfig};
use tidn_core::metrics::empirical_auc;
use tidn_core::numerics::{ImageGrid, RandomStream};

fn noise_images(n: usize, size: usize, stream: &mut RandomStream) -> Vec<ImageGrid> {
    (0..n).map(|_| ImageGrid::new(size, size, (0..size * size).map(|_| stream.normal()).collect()).unwrap()).collect()
}

fn network(c: &mut Criterion) {
    let mut stream = RandomStream::new(1);
    let spec = NetworkSpec::new(9, 8).unwrap();
    let params = ParameterSet::init(&spec, &mut stream).unwrap();
    let batch = noise_images(16, 32, &mut stream);
    let mut net = Denoiser::new(spec, params).unwrap();

    c.bench_function("denoiser eval 16x32x32 D=9 F=8", |b| b.iter(|| net.forward(black_box(&batch), Mode::Eval).unwrap()));
    c.bench_function("denoiser train step 16x32x32 D=9 F=8", |b| {
        b.iter(|| {
            let out = net.forward(black_box(&batch), Mode::Train).unwrap();
            let d = Tensor::from_images(&out).unwrap();
            net.backward(&d, 0, false).unwrap()
        })
    });
}

fn imaging(c: &mut Criterion) {
    let config = AcquisitionConfig { n_views: 60, n_bins: 48, incident_flux: 500.0, normalization: 10.0, count_floor: 1 };
    let image = noise_images(1, 32, &mut RandomStream::new(2)).pop().unwrap();
    let sino = radon(&image, &config).unwrap();
    c.bench_function("radon 32x32 60 views", |b| b.iter(|| radon(black_box(&image), &config).unwrap()));
    c.bench_function("fbp 32x32 60 views", |b| b.iter(|| fbp(black_box(&sino), &config, 32).unwrap()));
}

fn auc(c: &mut Criterion) {
    let mut stream = RandomStream::new(3);
    let t0: Vec<f64> = (0..2000).map(|_| stream.normal()).collect();
    let t1: Vec<f64> = (0..2000).map(|_| stream.normal() + 1.0).collect();
    c.bench_function("empirical auc 2000+2000", |b| b.iter(|| empirical_auc(black_box(&t0), black_box(&t1)).unwrap()));
}

criterion_group!(benches, network, imaging, auc);
criterion_main!(benches);
