//! Interaction logs, preprocessing, leave-last-out splits, negative sampling
//! and a seeded synthetic generator.

mod ingest;
mod preprocess;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use ingest::{export_canonical, ingest, ingest_reader, Format, IngestReport};
pub use preprocess::{preprocess, sequences, Vocabulary, PADDING_ITEM};
pub use split::{
    pad_left, read_split_dir, sample_negatives, split_leave_last, write_split_dir, Example, SplitDataset, SplitManifest,
    INTERACTIONS_FILE, MANIFEST_FILE, SPLIT_FILE,
};
pub use synth::{synth_generate, SynthConfig, SynthGenerator};

/// One timestamped user-item event.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Mixes a seed with a user and a step into an independent stream seed (splitmix64 finaliser).
pub(crate) fn stream_seed(seed: u64, user: u64, step: u64) -> u64 {
    let mut z = seed
        ^ user.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ step.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
