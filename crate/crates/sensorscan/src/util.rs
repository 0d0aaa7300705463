//! Seed derivation, worker-count control, and a small deterministic hash.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicUsize, Ordering};

/// splitmix64 finalizer; stable across platforms and releases.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a master seed and a list of tags
/// (stage id, epoch, sample index, ...). Same inputs always give the same seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = mix64(master ^ 0x53_45_4e_53_4f_52_53_43); // "SENSORSC"
    for &t in tags {
        s = mix64(s ^ t);
    }
    s
}

/// Seeded RNG used everywhere randomness is needed. ChaCha streams are
/// portable, so identical seeds give identical artifacts on any platform.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// FNV-1a over bytes; used for config fingerprints embedded in artifacts.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fingerprint string for a serializable value (canonical JSON bytes).
pub fn fingerprint<T: serde::Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    format!("{:016x}", fnv1a64(&bytes))
}

static JOBS: AtomicUsize = AtomicUsize::new(1);

/// Caps the number of worker threads used by data-parallel loops.
pub fn set_jobs(n: usize) {
    JOBS.store(n.max(1), Ordering::SeqCst);
}

pub fn jobs() -> usize {
    JOBS.load(Ordering::SeqCst)
}

/// Applies `f` to every index in `0..n`, possibly on several threads, and
/// returns results in index order. The output is identical for any worker
/// count; with one job the loop runs inline.
pub fn pmap<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let workers = jobs().min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (off, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(w * chunk + off));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("pmap slot filled")).collect()
}
