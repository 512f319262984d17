//! Synthetic data, experiment orchestration, CSV reports and the command line.

mod cli;
mod experiment;
mod synthetic;

pub use cli::{cli_main, exit_code};
pub use experiment::{
    aggregate, checkpoint_name, mean_std, run_experiment, run_sweep, trace_file_name, train_checkpoint,
    write_aggregate_csv, write_dataset_csv, AggregateRow, BackboneSpec, ExperimentConfig, ExperimentReport,
    RunRecord, StreamKind, SweepParam, SweepRow, CONFIG_VERSION, SWEEP_BATCH_SIZES, SWEEP_DELTAS,
};
pub use synthetic::{gen_synthetic_dataset, ShiftSpec, Split, SyntheticTaskSpec};

/// Format with 9 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = 8 - magnitude;
    if (0..=17).contains(&decimals) {
        format!("{:.*}", decimals as usize, x)
    } else {
        format!("{x:.8e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(0.25), "0.250000000");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(12.5), "12.5000000");
        assert_eq!(fmt_sig(1e-12), "1.00000000e-12");
    }
}
