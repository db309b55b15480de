use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;

use super::pseudo::{merge_datasets, pseudo_label, PseudoLabelFilter, PseudoLabeledSet};
use crate::augment::{ReferencePool, DEFAULT_BINS};
use crate::data::{
    patient_aware_split, preprocess_record, AuditCounter, PreprocessConfig, SliceSample,
    SplitAssignment, Vendor, VolumeRecord, DEFAULT_SPLIT_RATIOS,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_set, DiceReport, LabelMask, LV, MYO, RV};
use crate::nn::{NetworkConfig, NetworkInstance};
use crate::seed;
use crate::trainer::{evaluate, predict, train, EpochMetrics, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioKind {
    FS,
    FS50,
    FSH,
    FS50H,
    SS,
    SS50,
    SSH,
    SS50H,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 8] = [
        ScenarioKind::FS,
        ScenarioKind::FS50,
        ScenarioKind::FSH,
        ScenarioKind::FS50H,
        ScenarioKind::SS,
        ScenarioKind::SS50,
        ScenarioKind::SSH,
        ScenarioKind::SS50H,
    ];

    pub fn labeled_fraction(self) -> f64 {
        use ScenarioKind::*;
        match self {
            FS50 | FS50H | SS50 | SS50H => 0.5,
            _ => 1.0,
        }
    }

    pub fn histogram_matching(self) -> bool {
        use ScenarioKind::*;
        matches!(self, FSH | FS50H | SSH | SS50H)
    }

    pub fn semi_supervised(self) -> bool {
        use ScenarioKind::*;
        matches!(self, SS | SS50 | SSH | SS50H)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub labeled_fraction: f64,
    pub histogram_matching: bool,
    pub semi_supervised: bool,
    pub seed: u64,
    pub train_config: TrainConfig,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64, train_config: TrainConfig) -> Self {
        Self {
            kind,
            labeled_fraction: kind.labeled_fraction(),
            histogram_matching: kind.histogram_matching(),
            semi_supervised: kind.semi_supervised(),
            seed,
            train_config,
        }
    }
}

/// Settings shared by every scenario of a comparison.
#[derive(Clone, Debug)]
pub struct ScenarioSettings {
    pub network: NetworkConfig,
    pub filter: PseudoLabelFilter,
    pub histogram_bins: usize,
    pub pooled_reference: bool,
    pub exclude_zeros: bool,
    /// Continue from the supervised weights instead of a fresh initialization.
    pub fine_tune: bool,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            filter: PseudoLabelFilter::default(),
            histogram_bins: DEFAULT_BINS,
            pooled_reference: false,
            exclude_zeros: false,
            fine_tune: false,
        }
    }
}

/// Preprocessed slices of a cohort, split for the scenario ladder.
#[derive(Clone, Debug)]
pub struct CohortSplits {
    pub train: Vec<SliceSample>,
    pub validation: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
    /// Unlabeled vendor-C slices used for pseudo-labeling and as references.
    pub pool: Vec<SliceSample>,
    /// Held-out vendor-C slices scored against withheld truth.
    pub test_c: Vec<SliceSample>,
    pub assignment: SplitAssignment,
    pub pool_patients: Vec<String>,
    pub test_c_patients: Vec<String>,
}

/// Fraction of unlabeled patients held out for vendor-C testing.
pub const VENDOR_C_TEST_FRACTION: f64 = 0.4;

/// Splits labeled patients by slice-weighted ratios and unlabeled patients
/// into a pseudo-label pool and a held-out test group.
pub fn prepare_cohort(
    labeled: &[VolumeRecord],
    unlabeled: &[VolumeRecord],
    preprocess: &PreprocessConfig,
    split_seed: u64,
) -> Result<CohortSplits> {
    let sizes: Vec<(String, usize)> = labeled
        .iter()
        .map(|r| (r.patient_id.clone(), r.slice_count()))
        .collect();
    let assignment = patient_aware_split(&sizes, DEFAULT_SPLIT_RATIOS, split_seed)?;
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for rec in labeled {
        if rec.labels.is_none() {
            return Err(Error::Invalid(format!("labeled patient {} has no labels", rec.patient_id)));
        }
        let slices = preprocess_record(rec, preprocess)?;
        match assignment.split_of(&rec.patient_id) {
            Some(0) => train.extend(slices),
            Some(1) => validation.extend(slices),
            _ => test.extend(slices),
        }
    }
    let mut ids: Vec<String> = unlabeled.iter().map(|r| r.patient_id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut seed::rng_for(split_seed, &[b"vendor-c"]));
    let audited = unlabeled.iter().all(|r| r.hidden_labels.is_some());
    let held = if audited && ids.len() >= 2 {
        ((ids.len() as f64 * VENDOR_C_TEST_FRACTION).round() as usize).clamp(1, ids.len() - 1)
    } else {
        0
    };
    let mut test_c_patients = ids.split_off(ids.len() - held);
    let mut pool_patients = ids;
    pool_patients.sort();
    test_c_patients.sort();
    let (mut pool, mut test_c) = (Vec::new(), Vec::new());
    for rec in unlabeled {
        let mut slices = preprocess_record(rec, preprocess)?;
        slices.iter_mut().for_each(|s| s.mask = None);
        if test_c_patients.contains(&rec.patient_id) {
            test_c.extend(slices);
        } else {
            pool.extend(slices);
        }
    }
    Ok(CohortSplits {
        train,
        validation,
        test,
        pool,
        test_c,
        assignment,
        pool_patients,
        test_c_patients,
    })
}

/// Seeded patient-level subset of the training slices.
pub fn subsample_patients(samples: &[SliceSample], fraction: f64, seed_value: u64) -> Vec<SliceSample> {
    if fraction >= 1.0 {
        return samples.to_vec();
    }
    let mut ids: Vec<&str> = samples.iter().map(|s| s.patient_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut seed::rng_for(seed_value, &[b"subsample"]));
    let keep = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len().max(1));
    let kept: Vec<&str> = ids[..keep.min(ids.len())].to_vec();
    samples
        .iter()
        .filter(|s| kept.contains(&s.patient_id.as_str()))
        .cloned()
        .collect()
}

#[derive(Clone, Debug)]
pub struct PseudoSummary {
    pub set: PseudoLabeledSet,
    /// Mean withheld-truth dice of accepted pseudo-masks.
    pub audit_dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ScenarioReport {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub train: DiceReport,
    pub validation: Option<DiceReport>,
    pub test: Option<DiceReport>,
    pub test_c: Option<DiceReport>,
    pub pseudo: Option<PseudoSummary>,
    pub supervised_history: Vec<EpochMetrics>,
    pub retrain_history: Vec<EpochMetrics>,
    /// Hidden-mask reads observed before evaluation began; always zero.
    pub hidden_reads_during_training: usize,
}

fn annotate<T>(kind: ScenarioKind, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Scenario {
        kind: kind.to_string(),
        source: Box::new(e),
    })
}

/// Dice on slices whose truth is withheld; reveals every hidden mask.
pub fn evaluate_hidden(net: &NetworkInstance, samples: &[SliceSample]) -> Result<DiceReport> {
    let truths = samples
        .iter()
        .map(|s| {
            s.hidden_mask
                .as_ref()
                .map(|h| h.reveal().clone())
                .ok_or_else(|| Error::Invalid(format!("sample {} has no withheld mask", s.id())))
        })
        .collect::<Result<Vec<LabelMask>>>()?;
    let pred = predict(net, samples)?;
    evaluate_set(&pred.masks, &truths, net.config().num_classes)
}

type SupervisedKey = (u64, u64, bool);

/// Reuses supervised runs shared by FS/SS pairs; the runs are deterministic
/// so a cached outcome equals a fresh one.
#[derive(Default)]
pub struct SupervisedCache(HashMap<SupervisedKey, Arc<TrainOutcome>>);

impl SupervisedCache {
    /// The supervised run for a seed, labeled fraction and matching flag.
    pub fn get(&self, seed: u64, labeled_fraction: f64, histogram_matching: bool) -> Option<&TrainOutcome> {
        self.0
            .get(&(seed, labeled_fraction.to_bits(), histogram_matching))
            .map(|a| a.as_ref())
    }
}

fn policy_for(
    spec: &ScenarioSpec,
    settings: &ScenarioSettings,
    cohort: &CohortSplits,
) -> Result<TrainConfig> {
    let mut cfg = spec.train_config.clone();
    cfg.seed = seed::derive(spec.seed, &[b"train"]);
    cfg.augmentation.seed = seed::derive(spec.seed, &[b"augment"]);
    cfg.augmentation.histogram_match = if spec.histogram_matching {
        let images: Vec<_> = cohort.pool.iter().map(|s| &s.image).collect();
        Some(Arc::new(ReferencePool::from_images(
            &images,
            settings.histogram_bins,
            settings.exclude_zeros,
            settings.pooled_reference,
        )?
        .with_vendor(Vendor::C)))
    } else {
        None
    };
    Ok(cfg)
}

fn run_inner(
    spec: &ScenarioSpec,
    cohort: &CohortSplits,
    settings: &ScenarioSettings,
    cache: &mut SupervisedCache,
) -> Result<ScenarioReport> {
    let counter = AuditCounter::new();
    let recount = |s: &SliceSample| SliceSample {
        hidden_mask: s.hidden_mask.as_ref().map(|h| h.recount(&counter)),
        ..s.clone()
    };
    let pool: Vec<SliceSample> = cohort.pool.iter().map(recount).collect();
    let test_c: Vec<SliceSample> = cohort.test_c.iter().map(recount).collect();

    let train_set = subsample_patients(&cohort.train, spec.labeled_fraction, spec.seed);
    let cfg = policy_for(spec, settings, cohort)?;
    let init_seed = seed::derive(spec.seed, &[b"init"]);
    let key = (spec.seed, spec.labeled_fraction.to_bits(), spec.histogram_matching);
    let supervised = match cache.0.get(&key) {
        Some(hit) if cache_compatible(hit, &cfg) => Arc::clone(hit),
        _ => {
            let net = NetworkInstance::build(settings.network.clone(), init_seed)?;
            let out = Arc::new(train(net, &train_set, &cohort.validation, &cfg)?);
            cache.0.insert(key, Arc::clone(&out));
            out
        }
    };

    let (final_net, pseudo, retrain_history) = if spec.semi_supervised {
        let set = if pool.is_empty() {
            return Err(Error::Invalid("vendor-C pool is empty".into()));
        } else {
            pseudo_label(&supervised.net, &pool, &settings.filter)?
        };
        let merged = merge_datasets(&train_set, &set)?;
        let start = if settings.fine_tune {
            supervised.net.clone()
        } else {
            NetworkInstance::build(settings.network.clone(), init_seed)?
        };
        let out = train(start, &merged, &cohort.validation, &cfg)?;
        (out.net, Some(set), out.history)
    } else {
        (supervised.net.clone(), None, Vec::new())
    };
    let hidden_reads_during_training = counter.reads();
    if hidden_reads_during_training != 0 {
        return Err(Error::Invalid(format!(
            "{hidden_reads_during_training} withheld masks were read before evaluation"
        )));
    }

    let nonempty = |s: &[SliceSample]| !s.is_empty();
    let report = ScenarioReport {
        kind: spec.kind,
        seed: spec.seed,
        train: evaluate(&final_net, &train_set)?,
        validation: nonempty(&cohort.validation)
            .then(|| evaluate(&final_net, &cohort.validation))
            .transpose()?,
        test: nonempty(&cohort.test)
            .then(|| evaluate(&final_net, &cohort.test))
            .transpose()?,
        test_c: nonempty(&test_c)
            .then(|| evaluate_hidden(&final_net, &test_c))
            .transpose()?,
        pseudo: pseudo
            .map(|mut set| {
                let audit_dice = set.audit(final_net.config().num_classes)?;
                Ok::<_, Error>(PseudoSummary { set, audit_dice })
            })
            .transpose()?,
        supervised_history: supervised.history.clone(),
        retrain_history,
        hidden_reads_during_training,
    };
    Ok(report)
}

fn cache_compatible(hit: &TrainOutcome, cfg: &TrainConfig) -> bool {
    hit.history.len() == cfg.epochs
}

/// Runs one scenario: subsample, train, optionally pseudo-label and retrain,
/// then evaluate.
pub fn run_scenario(
    spec: &ScenarioSpec,
    cohort: &CohortSplits,
    settings: &ScenarioSettings,
) -> Result<ScenarioReport> {
    annotate(spec.kind, run_inner(spec, cohort, settings, &mut SupervisedCache::default()))
}

/// Runs every spec in order, sharing supervised runs between FS/SS pairs
/// with the same seed, labeled fraction and matching flag.
pub fn compare_scenarios(
    specs: &[ScenarioSpec],
    cohort: &CohortSplits,
    settings: &ScenarioSettings,
) -> Result<ComparisonTable> {
    compare_scenarios_cached(specs, cohort, settings, &mut SupervisedCache::default())
}

/// As [`compare_scenarios`], keeping supervised runs in `cache` for reuse.
pub fn compare_scenarios_cached(
    specs: &[ScenarioSpec],
    cohort: &CohortSplits,
    settings: &ScenarioSettings,
    cache: &mut SupervisedCache,
) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        rows.push(annotate(spec.kind, run_inner(spec, cohort, settings, cache))?);
    }
    Ok(ComparisonTable { reports: rows })
}

const CLASS_ORDER: [(u8, &str); 3] = [(LV, "LV"), (RV, "RV"), (MYO, "Myo")];
const SPLITS: [&str; 4] = ["train", "val", "test", "testc"];

/// One table row: per split, LV/RV/Myo dice and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRow {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// Indexed `[split][lv, rv, myo, avg]` with splits train, val, test, testc.
    pub dice: [[Option<f64>; 4]; 4],
    pub pseudo_accepted: Option<usize>,
    pub pseudo_rejected: Option<usize>,
    pub pseudo_audit_dice: Option<f64>,
}

fn report_cells(report: Option<&DiceReport>) -> [Option<f64>; 4] {
    let mut cells = [None; 4];
    if let Some(r) = report {
        for (i, (class, _)) in CLASS_ORDER.iter().enumerate() {
            cells[i] = r.class(*class);
        }
        cells[3] = Some(r.average);
    }
    cells
}

impl ScenarioReport {
    pub fn row(&self) -> ScenarioRow {
        ScenarioRow {
            kind: self.kind,
            seed: self.seed,
            dice: [
                report_cells(Some(&self.train)),
                report_cells(self.validation.as_ref()),
                report_cells(self.test.as_ref()),
                report_cells(self.test_c.as_ref()),
            ],
            pseudo_accepted: self.pseudo.as_ref().map(|p| p.set.accepted.len()),
            pseudo_rejected: self.pseudo.as_ref().map(|p| p.set.rejected.len()),
            pseudo_audit_dice: self.pseudo.as_ref().and_then(|p| p.audit_dice),
        }
    }
}

fn csv_header() -> String {
    let mut header = vec!["scenario".to_string(), "seed".to_string()];
    for split in SPLITS {
        for (_, name) in CLASS_ORDER {
            header.push(format!("{split}_{}", name.to_lowercase()));
        }
        header.push(format!("{split}_avg"));
    }
    header.extend(["pseudo_accepted", "pseudo_rejected", "pseudo_audit_dice"].map(String::from));
    header.join(",")
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_f(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One CSV row per scenario run. No timing columns, so reruns are
/// byte-identical.
pub fn rows_to_csv(rows: &[ScenarioRow]) -> String {
    let mut out = csv_header();
    out.push('\n');
    for r in rows {
        let mut cols = vec![r.kind.to_string(), r.seed.to_string()];
        for split in &r.dice {
            cols.extend(split.iter().map(|v| opt_f(*v)));
        }
        cols.push(opt(r.pseudo_accepted));
        cols.push(opt(r.pseudo_rejected));
        cols.push(opt_f(r.pseudo_audit_dice));
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Parses the output of [`rows_to_csv`].
pub fn rows_from_csv(text: &str) -> Result<Vec<ScenarioRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != csv_header() {
        return Err(Error::Invalid("scenario CSV header does not match".into()));
    }
    let bad = |n: usize, what: &str| Error::Invalid(format!("scenario CSV line {n}: {what}"));
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().map(|(i, l)| (i + 2, l)) {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 + 16 + 3 {
            return Err(bad(n, "wrong column count"));
        }
        let float = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(n, "bad number"))
            }
        };
        let count = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(n, "bad count"))
            }
        };
        let mut dice = [[None; 4]; 4];
        for (i, split) in dice.iter_mut().enumerate() {
            for (j, cell) in split.iter_mut().enumerate() {
                *cell = float(cols[2 + i * 4 + j])?;
            }
        }
        rows.push(ScenarioRow {
            kind: cols[0].parse()?,
            seed: cols[1].parse().map_err(|_| bad(n, "bad seed"))?,
            dice,
            pseudo_accepted: count(cols[18])?,
            pseudo_rejected: count(cols[19])?,
            pseudo_audit_dice: float(cols[20])?,
        });
    }
    Ok(rows)
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

/// Training/validation dice per class in the published table layout,
/// followed by held-out test columns.
pub fn rows_to_text(rows: &[ScenarioRow]) -> String {
    let mut header = vec!["DSC".to_string(), "seed".to_string()];
    for (_, name) in CLASS_ORDER {
        header.push(format!("Tr-{name}"));
        header.push(format!("Val-{name}"));
    }
    for (_, name) in CLASS_ORDER {
        header.push(format!("Test-{name}"));
    }
    for (_, name) in CLASS_ORDER {
        header.push(format!("TestC-{name}"));
    }
    header.push("TestC-Avg".into());
    let mut table = vec![header];
    for r in rows {
        let mut row = vec![r.kind.to_string(), r.seed.to_string()];
        for c in 0..3 {
            row.push(fmt_cell(r.dice[0][c]));
            row.push(fmt_cell(r.dice[1][c]));
        }
        row.extend((0..3).map(|c| fmt_cell(r.dice[2][c])));
        row.extend((0..4).map(|c| fmt_cell(r.dice[3][c])));
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|i| table.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (n, row) in table.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:>w$}"))
            .collect();
        let line = line.join("  ");
        let _ = writeln!(out, "{}", line.trim_end());
        if n == 0 {
            let _ = writeln!(out, "{}", "-".repeat(line.len()));
        }
    }
    out
}

/// Mean held-out vendor-C average dice of `kind` over all seeds.
pub fn mean_test_c(rows: &[ScenarioRow], kind: ScenarioKind) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.kind == kind)
        .filter_map(|r| r.dice[3][3])
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ComparisonTable {
    pub reports: Vec<ScenarioReport>,
}

impl ComparisonTable {
    pub fn rows(&self) -> Vec<ScenarioRow> {
        self.reports.iter().map(ScenarioReport::row).collect()
    }

    pub fn csv(&self) -> String {
        rows_to_csv(&self.rows())
    }

    pub fn text(&self) -> String {
        rows_to_text(&self.rows())
    }

    /// Pseudo-label audit of every semi-supervised run.
    pub fn audit_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            if let Some(p) = &r.pseudo {
                for (i, line) in p.set.audit_csv().lines().enumerate() {
                    if i == 0 {
                        if out.is_empty() {
                            let _ = writeln!(out, "scenario,seed,{line}");
                        }
                        continue;
                    }
                    let _ = writeln!(out, "{},{},{line}", r.kind, r.seed);
                }
            }
        }
        out
    }
}
