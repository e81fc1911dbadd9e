//! Dataset ingestion, preprocessing and batching.

pub mod npy;
pub mod records;
pub mod toy;

pub use npy::{parse_npy, write_npy, NpyArray};
pub use records::{
    extract_features, load_records, make_batch, records_from_array, split_train_val, Batch, ColumnLayout, NormStats,
    ProteinRecord, ValidationSize, PSSM_CHANNELS, RESIDUE_CHANNELS, STANDARD_VAL_SIZE,
};
pub use toy::{repeat_fraction, synth_toy_dataset, ToyRule};
