//! Seed derivation. Every phase draws from its own ChaCha stream so that
//! changing what one phase consumes never shifts another phase's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Erm = 2,
    Selection = 3,
    Retrain = 4,
    Subset = 5,
    DataTrain = 10,
    DataVal = 11,
    DataTest = 12,
    HeadInit = 20,
    SelectionInit = 21,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Stream for the `repeat`-th draw of a repeated phase.
pub fn stream_rng_indexed(seed: u64, stream: Stream, repeat: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | repeat);
    rng
}
