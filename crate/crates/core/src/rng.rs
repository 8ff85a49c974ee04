use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for one purpose (`stream`) under a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers; keeping them in one place avoids accidental reuse.
pub(crate) mod streams {
    pub const SUBSAMPLE: u64 = 1;
    pub const FLIP: u64 = 2;
    pub const COLOR: u64 = 3;
    pub const TEST_COLOR: u64 = 4;
    pub const INIT: u64 = 10;
    pub const REPLICA: u64 = 11;
    pub const UNIFORM_ORDER: u64 = 12;
    pub const AUGMENT: u64 = 13;
    pub const BANK: u64 = 14;
    pub const LAMBDA: u64 = 15;
    pub const MIXUP: u64 = 16;
    pub const CRT: u64 = 17;
}
