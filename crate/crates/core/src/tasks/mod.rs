//! Synthetic segmentation data, dataset files and the Dice metric.

mod dataset;
mod metrics;
mod synth;

pub use dataset::{Dataset, DatasetManifest, SampleFiles, DATASET_FORMAT};
pub use metrics::{batch_dice, dice, foreground_dice, split_batch, DiceReport};
pub use synth::{
    generate, generate_sample, Sample, SyntheticTaskSpec, BACKGROUND, LARGE_CLASS, NUM_CLASSES, PRNG_NAME,
    SMALL_CLASS,
};
