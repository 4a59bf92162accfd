//! Named random substreams derived from one run seed.
//!
//! Each component draws from its own ChaCha stream id, so turning a
//! component off never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Datagen,
    Init,
    Replay,
    Reservoir,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Datagen => 1,
            Stream::Init => 2,
            Stream::Replay => 3,
            Stream::Reservoir => 4,
        }
    }
}

pub fn substream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Bundle of all substreams used by a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRngs {
    pub init: Rng,
    pub replay: Rng,
    pub reservoir: Rng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            init: substream(seed, Stream::Init),
            replay: substream(seed, Stream::Replay),
            reservoir: substream(seed, Stream::Reservoir),
        }
    }
}
