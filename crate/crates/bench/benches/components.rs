use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sealswap_bench::{pinned_deployment, random_page};
use sealswap_core::allocator::{MachineId, PageAllocator};
use sealswap_core::pagecrypt::{generate_key, PageCipher, SwapOffset};
use sealswap_core::wire::{decode_command, decode_store_packet, encode_command, encode_store_packet, PagePacket};
use sealswap_core::{Command, Opcode, Tier, PAGE_SIZE};

fn wire(c: &mut Criterion) {
    let cmd = Command {
        src_mid: 3,
        dst_mid: 100,
        tier: Tier::DonorHbm,
        remote_addr: 0x3c000,
        request_token: 42,
        ..Command::new(Opcode::Load)
    };
    let word = encode_command(&cmd);
    let packet = encode_store_packet(&PagePacket {
        header: Command::new(Opcode::Store),
        page: random_page(1),
    });
    let mut g = c.benchmark_group("wire");
    g.bench_function("encode_command", |b| b.iter(|| encode_command(black_box(&cmd))));
    g.bench_function("decode_command", |b| b.iter(|| decode_command(black_box(&word))));
    g.throughput(Throughput::Bytes(packet.len() as u64));
    g.bench_function("decode_store_packet", |b| b.iter(|| decode_store_packet(black_box(&packet))));
    g.finish();
}

fn crypto(c: &mut Criterion) {
    let cipher = PageCipher::new(&generate_key().unwrap()).unwrap();
    let page = random_page(2);
    let sealed = cipher.seal(&page[..], SwapOffset(7)).unwrap();
    let mut g = c.benchmark_group("pagecrypt");
    g.throughput(Throughput::Bytes(PAGE_SIZE as u64));
    g.bench_function("seal_4k", |b| b.iter(|| cipher.seal(black_box(&page[..]), SwapOffset(7))));
    g.bench_function("open_4k", |b| b.iter(|| cipher.open(black_box(&sealed), SwapOffset(7))));
    g.finish();
}

fn allocator(c: &mut Criterion) {
    let mut g = c.benchmark_group("allocator");
    for pages in [64u64, 1 << 21] {
        let mut a = PageAllocator::new(pages, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        g.bench_function(format!("alloc_free_{pages}"), |b| {
            b.iter(|| {
                let addr = a.alloc_random(MachineId(1), &mut rng).unwrap();
                a.free_page(addr, MachineId(1)).unwrap();
            })
        });
    }
    g.finish();
}

fn donee(c: &mut Criterion) {
    let mut g = c.benchmark_group("donee");
    g.throughput(Throughput::Bytes(PAGE_SIZE as u64));
    for tier in [Tier::DoneeHbm, Tier::DonorHbm, Tier::DonorDram, Tier::LocalSwap] {
        let dep = pinned_deployment(tier, 256);
        let page = random_page(4);
        let mut next = 0u64;
        g.bench_function(format!("store_{tier}"), |b| {
            b.iter(|| {
                dep.donee.store(next % 256, &page[..]).unwrap();
                next += 1;
            })
        });
        g.bench_function(format!("load_{tier}"), |b| {
            b.iter_batched(
                || {
                    dep.donee.store(0, &page[..]).unwrap();
                },
                |_| dep.donee.load(0).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, wire, crypto, allocator, donee);
criterion_main!(benches);
