//! Checkpoint container, run configuration and attention export.

mod checkpoint;
mod config;
mod dump;

pub use checkpoint::{
    fnv1a64, load_checkpoint, save_checkpoint, write_atomic, Checkpoint, Header, StoredTensor, TensorEntry,
    FORMAT_VERSION, MAGIC, PREAMBLE_LEN,
};
pub use config::{BenchConfig, RunConfig, Seeds};
pub use dump::{dump_attention, DumpIndex, HeadFile};
