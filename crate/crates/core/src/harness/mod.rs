//! Synthetic data, hyperparameter sweeps, ASR / SSIM curves and CSV output.

mod dataset;
mod report;
mod sweep;

pub use dataset::{
    decode_dataset, encode_dataset, gen_dataset, load_dataset, save_dataset, Dataset, DatasetSpec, DATASET_MAGIC,
    DATASET_VERSION, MAX_CLASSES,
};
pub use report::{
    asr, emit_curve_csv, emit_samples_csv, fmt_sig6, load_curve_csv, pareto_compare, read_curve_csv, read_samples_csv,
    write_curve_csv, write_samples_csv, Comparison, ComparisonRow, CurvePoint, SampleError, SampleRecord, SweepReport,
};
pub use sweep::{run_cell, sweep, MethodSpec, PdrWrap, SweepConfig, Vary};
