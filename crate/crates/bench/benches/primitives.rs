use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use storebounce::attacks::{break_kaslr, enumerate_modules, install_gadget};
use storebounce::primitives::speculative_fetch_bounce;
use storebounce::{MicroarchProfile, OsProfile, VirtualAddress};
use storebounce_bench::linux;

fn bounces(c: &mut Criterion) {
    let mut sys = linux(MicroarchProfile::skylake(), 1);
    let mapped = sys.layout.kernel_base;
    let unmapped = VirtualAddress(mapped.0 - 0x20_0000);

    c.bench_function("data_bounce/mapped", |b| b.iter(|| sys.bouncer.data_bounce(&mut sys.core, black_box(mapped)).unwrap()));
    c.bench_function("data_bounce/unmapped", |b| {
        b.iter(|| sys.bouncer.data_bounce(&mut sys.core, black_box(unmapped)).unwrap())
    });
    c.bench_function("bounced/mapped", |b| b.iter(|| sys.bouncer.bounced(&mut sys.core, black_box(mapped)).unwrap()));
    c.bench_function("fetch_bounce", |b| b.iter(|| sys.bouncer.fetch_bounce(&mut sys.core, black_box(mapped)).unwrap()));
}

fn spectre(c: &mut Criterion) {
    let mut sys = linux(MicroarchProfile::skylake(), 2);
    let (mut gadget, range) = install_gadget(&mut sys.core, b"bench secret", 1.0).unwrap();
    c.bench_function("speculative_fetch_bounce", |b| {
        b.iter(|| speculative_fetch_bounce(&mut sys.core, &mut gadget, black_box(range.start), &sys.bouncer).unwrap())
    });
}

fn attacks(c: &mut Criterion) {
    let mut g = c.benchmark_group("attacks");
    g.sample_size(10);
    g.bench_function("kaslr/linux", |b| {
        b.iter_batched(
            || linux(MicroarchProfile::skylake(), 3),
            |mut sys| break_kaslr(&mut sys.core, &sys.bouncer, OsProfile::Linux).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.bench_function("modules/linux", |b| {
        b.iter_batched(
            || linux(MicroarchProfile::skylake(), 4),
            |mut sys| enumerate_modules(&mut sys.core, &sys.bouncer, OsProfile::Linux).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, bounces, spectre, attacks);
criterion_main!(benches);
