//! Independent, labelled seed streams derived from one master seed.

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Sub-seed for the stream called `label`.
pub fn derive(master: u64, label: &str) -> u64 {
    mix(master ^ fnv1a(label))
}

/// Sub-seed for the `index`-th member of a stream.
pub fn derive_indexed(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// The per-component streams of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    pub data: u64,
    pub targets: u64,
    pub subsample: u64,
    pub init: u64,
    pub perturbation: u64,
    pub augmentation: u64,
    pub batching: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self {
            data: derive(master, "data"),
            targets: derive(master, "targets"),
            subsample: derive(master, "subsample"),
            init: derive(master, "init"),
            perturbation: derive(master, "perturbation"),
            augmentation: derive(master, "augmentation"),
            batching: derive(master, "batching"),
        }
    }
}
