//! Truncations and bit flips of valid IDX, NPY and checkpoint files.

use std::panic::{catch_unwind, AssertUnwindSafe};

use nevo::data::idx::{encode_images, encode_labels, parse_images, parse_labels};
use nevo::data::npy::{encode_npy, parse_npy, NpyArray, NpyData};
use nevo::network::{init_params, zoo};
use nevo::persist::{decode_checkpoint, encode_checkpoint, Checkpoint, CheckpointMeta};
use nevo::tensor::Tensor;
use nevo::RngStream;
use rand::Rng;

const CASES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Mutation {
    Truncate,
    Flip,
}

#[derive(Default, Debug)]
struct Tally {
    ok: usize,
    err: usize,
    truncations_accepted: usize,
}

fn mutate(seed: &[u8], rng: &mut impl Rng) -> (Mutation, Vec<u8>) {
    if rng.random_bool(0.5) {
        let len = rng.random_range(0..seed.len());
        (Mutation::Truncate, seed[..len].to_vec())
    } else {
        let mut out = seed.to_vec();
        for _ in 0..rng.random_range(1..=3) {
            let bit = rng.random_range(0..out.len() * 8);
            out[bit / 8] ^= 1 << (bit % 8);
        }
        (Mutation::Flip, out)
    }
}

/// Runs `parse` on mutated copies of `seed`; panics are test failures.
fn fuzz(name: &str, seed: &[u8], cases: usize, stream: u64, parse: impl Fn(&[u8]) -> bool) -> Tally {
    let mut rng = RngStream::new(0xf022).derive(&[stream]).rng();
    let mut t = Tally::default();
    for case in 0..cases {
        let (kind, bytes) = mutate(seed, &mut rng);
        let ok = catch_unwind(AssertUnwindSafe(|| parse(&bytes)))
            .unwrap_or_else(|_| panic!("{name} case {case} ({kind:?}, {} bytes) panicked", bytes.len()));
        if ok {
            t.ok += 1;
            if kind == Mutation::Truncate {
                t.truncations_accepted += 1;
            }
        } else {
            t.err += 1;
        }
    }
    t
}

fn idx_images() -> Vec<u8> {
    let mut rng = RngStream::new(1).rng();
    let data = (0..6 * 28 * 28).map(|_| rng.random_range(0u8..=255) as f32 / 255.0).collect();
    encode_images(&Tensor::new(vec![6, 1, 28, 28], data).unwrap())
}

fn npy() -> Vec<u8> {
    let data = (0..5 * 7 * 3).map(|i| i as f32 * 0.25).collect();
    encode_npy(&NpyArray {
        shape: vec![5, 7, 3],
        data: NpyData::F32(data),
    })
}

fn checkpoint() -> Vec<u8> {
    let spec = zoo::builtin("lenet1").unwrap();
    let params = init_params(&spec, &RngStream::new(3));
    encode_checkpoint(&Checkpoint::new(spec, params, CheckpointMeta {
        stage: "adam".into(),
        step: 4,
        loss: Some(0.25),
        seed: 3,
    }))
}

#[test]
fn ten_thousand_mutations_never_panic() {
    let per = CASES / 4;
    let images = fuzz("idx images", &idx_images(), per, 1, |b| match parse_images(b) {
        Ok(t) => t.len() == t.shape().iter().product::<usize>(),
        Err(_) => false,
    });
    let labels_seed = encode_labels(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
    let labels = fuzz("idx labels", &labels_seed, per, 2, |b| parse_labels(b).is_ok());
    let arrays = fuzz("npy", &npy(), per, 3, |b| match parse_npy(b) {
        Ok(a) => a.data.len() == a.shape.iter().product::<usize>(),
        Err(_) => false,
    });
    let ckpt = checkpoint();
    let ckpts = fuzz("checkpoint", &ckpt, CASES - 3 * per, 4, |b| decode_checkpoint(b).is_ok());

    for (name, t) in [("idx images", &images), ("idx labels", &labels), ("npy", &arrays), ("checkpoint", &ckpts)] {
        assert_eq!(t.truncations_accepted, 0, "{name}: a truncated file parsed: {t:?}");
        assert!(t.err > 0, "{name}: {t:?}");
    }
    // The CRC covers every byte, so no flipped checkpoint may load.
    assert_eq!(ckpts.ok, 0, "{ckpts:?}");
    assert_eq!(images.ok + images.err + labels.ok + labels.err + arrays.ok + arrays.err + ckpts.err, CASES);
}
