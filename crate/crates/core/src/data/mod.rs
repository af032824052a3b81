//! Loading, splitting, preprocessing and missingness synthesis for expression tables.

mod dataset;
mod missing;
mod preprocess;
mod split;

pub use dataset::{filter_min_class, join_modalities, load_table, parse_table, write_table, TabularDataset};
pub use missing::{impute, synthesize_missing, ImputeStrategy, MissingnessConfig, SyntheticMissing, TrainStats};
pub use preprocess::{PcaModel, Standardizer};
pub use split::{apportion, make_split, make_unmatched_split, SplitConfig, SplitPlan};
