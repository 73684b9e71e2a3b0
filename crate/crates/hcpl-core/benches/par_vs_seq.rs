//! Parallel against sequential throughput for the batch stages. The
//! parallel variants fall back to the sequential code when the `parallel`
//! feature is off, so run this with default features to see the spread.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hcpl_core::dataset::CellRecord;
use hcpl_core::layers::BackboneConfig;
use hcpl_core::models::{init_model, predict, predict_seq, ModelConfig, ModelFamily};
use hcpl_core::phantom::{generate_phantom, generate_phantom_seq, PhantomConfig};
use hcpl_core::scattering::{build_filter_bank, scattering2d, scattering2d_seq};
use hcpl_core::segpost::{segment_batch, segment_batch_seq, ProbabilityMaps, SegmentConfig};
use hcpl_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn bench_predict(c: &mut Criterion) {
    let backbone =
        BackboneConfig { channels_in: 4, stage_widths: vec![6, 12], input_h: 16, input_w: 16 };
    let cfg = ModelConfig::new(ModelFamily::Cla, backbone, 19);
    let model = init_model(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cells: Vec<CellRecord> = (0..48)
        .map(|i| CellRecord {
            image_id: (i / 6) as u32,
            cell_id: i as u32,
            crop: rand_tensor(&mut rng, vec![16, 16, 4]),
            labels: vec![0.0; 19],
        })
        .collect();
    let mut g = c.benchmark_group("predict_48_cells");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| black_box(predict(&model, &cells).unwrap())));
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(predict_seq(&model, &cells).unwrap()))
    });
    g.finish();
}

fn bench_scattering(c: &mut Criterion) {
    let bank = build_filter_bank(2, 4, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, vec![64, 64]);
    let mut g = c.benchmark_group("scattering_64px");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| black_box(scattering2d(&x, &bank, 2).unwrap())));
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(scattering2d_seq(&x, &bank, 2).unwrap()))
    });
    g.finish();
}

fn bench_segment(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let side = 96;
    let maps: Vec<ProbabilityMaps> = (0..8)
        .map(|_| {
            let n = side * side;
            let nuc: Vec<f64> =
                (0..n).map(|_| if rng.random_bool(0.05) { 1.0 } else { 0.0 }).collect();
            let cell: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            ProbabilityMaps::new(
                Tensor::from_vec(vec![side, side], nuc).unwrap(),
                Tensor::from_vec(vec![side, side], cell).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let cfg = SegmentConfig { t_nuc: 0.5, t_cell: 0.5, min_area: 16, compare: false };
    let mut g = c.benchmark_group("segment_8_maps");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| black_box(segment_batch(&maps, &cfg).unwrap())));
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(segment_batch_seq(&maps, &cfg).unwrap()))
    });
    g.finish();
}

fn bench_phantom(c: &mut Criterion) {
    let cfg = PhantomConfig {
        image_size: 64,
        num_images: 8,
        cells_per_image: 6,
        cell_radius: 6,
        mixture: PhantomConfig::uniform_mixture(8),
        noise: 0.02,
        seed: 5,
    };
    let mut g = c.benchmark_group("phantom_8_images");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| black_box(generate_phantom(&cfg).unwrap())));
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(generate_phantom_seq(&cfg).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, bench_predict, bench_scattering, bench_segment, bench_phantom);
criterion_main!(benches);
