//! Radiomics tables: CSV ingestion, individual-level splits,
//! standardization and a synthetic generator.

mod csv_io;
mod split;
mod standardize;
mod synth;

pub use csv_io::{
    load_csv, load_csv_with_vocab, write_csv, CellRecord, CsvStream, Dataset, LabelVocab, RawRecord, ID_COLUMNS,
};
pub use split::{split_by_individual, SplitSpec, DEFAULT_TRAIN_RATIO};
pub use standardize::{Standardizer, STD_FLOOR};
pub use synth::{class_names, synthesize_dataset, SynthSpec, CELLS_PER_IMAGE};
