//! Pseudo-labeling of the unlabeled vendor and the eight-scenario ladder.

mod pseudo;
mod scenario;

pub use pseudo::{
    average_dice, merge_datasets, pseudo_label, PseudoLabelFilter, PseudoLabelRecord,
    PseudoLabeledSet, RejectionReason,
};
pub use scenario::{
    compare_scenarios, compare_scenarios_cached, evaluate_hidden, mean_test_c, prepare_cohort, rows_from_csv, rows_to_csv, rows_to_text, run_scenario, subsample_patients,
    CohortSplits, ComparisonTable, PseudoSummary, ScenarioKind, ScenarioReport, ScenarioRow, ScenarioSettings,
    ScenarioSpec, SupervisedCache, VENDOR_C_TEST_FRACTION,
};
