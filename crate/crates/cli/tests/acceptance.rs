//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.
//!
//! `CARDIOSEG_ACCEPTANCE=1,2,3` restricts the run to the listed criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cardioseg::augment::{compute_histogram, histogram_match};
use cardioseg::config::RunConfig;
use cardioseg::data::{patient_aware_split, SliceSample, DEFAULT_SPLIT_RATIOS};
use cardioseg::phantom::{generate_cohort, PhantomConfig};
use cardioseg::seed;
use cardioseg::ssl::{
    compare_scenarios_cached, mean_test_c, prepare_cohort, pseudo_label, PseudoLabelFilter, ScenarioKind,
    ScenarioRow, ScenarioSpec, SupervisedCache,
};
use cardioseg::trainer::train;
use cardioseg::{dice_coefficient, evaluate_set, NetworkConfig, NetworkInstance};
use common::{gradcheck, oracles};
use rand::Rng as _;

const GRADCHECK_SECONDS: f64 = 120.0;
const DICE_PAIRS: u64 = 1000;
const HISTOGRAM_IMAGES: u64 = 100;
const KS_LIMIT: f64 = 2.0 / 256.0 + 1.0 / 4096.0;
const SELF_MATCH_LIMIT: f64 = 1.0 / 256.0;
const MONOTONE_PAIRS: usize = 20_000;
const LADDER_SEEDS: [u64; 3] = [0, 1, 2];
const SSH_MARGIN: f64 = 0.02;
const FSH_MARGIN: f64 = 0.01;
const LADDER_WALL_SECONDS: f64 = 15.0 * 60.0;
const LADDER_WORKERS: usize = 4;
const SPLIT_RUNS: u64 = 1000;
const SPLIT_TARGET: [f64; 3] = [0.701, 0.176, 0.123];
const SPLIT_TOLERANCE: f64 = 0.05;
const PSEUDO_AUDIT_MIN: f64 = 0.85;
const SMOKE_SIZE: usize = 32;
const SMOKE_EPOCHS: usize = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let reports = gradcheck::all();
    let seconds = started.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    let coordinates: usize = reports.iter().map(|r| r.coordinates).sum();
    outcome(
        failing.is_empty() && seconds < GRADCHECK_SECONDS,
        format!(
            "gradient checks on {} ops x {} instances ({coordinates} coordinates): worst relative error {worst:.2e} \
             (limit {:.0e}), {seconds:.1} s (limit {GRADCHECK_SECONDS} s){}",
            reports.len(),
            gradcheck::INSTANCES,
            gradcheck::MAX_RELATIVE_ERROR,
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    )
}

fn dice_oracle() -> Outcome {
    let mut rng = seed::rng_for(0, &[b"acceptance-dice"]);
    let mut mismatches = 0;
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    for _ in 0..DICE_PAIRS {
        let p = oracles::random_mask(&mut rng, 8, 8, 4);
        let t = oracles::random_mask(&mut rng, 8, 8, 4);
        for k in 0..4 {
            if dice_coefficient(&p, &t, k).unwrap() != oracles::dice_by_sets(&p, &t, k) {
                mismatches += 1;
            }
        }
        let single = evaluate_set(std::slice::from_ref(&p), std::slice::from_ref(&t), 4).unwrap();
        let (per_class, avg) = oracles::set_report_by_sets(std::slice::from_ref(&p), std::slice::from_ref(&t), 4);
        if single.per_class != per_class || single.average != avg {
            mismatches += 1;
        }
        preds.push(p);
        truths.push(t);
    }
    let whole = evaluate_set(&preds, &truths, 4).unwrap();
    let (per_class, avg) = oracles::set_report_by_sets(&preds, &truths, 4);
    if whole.per_class != per_class || whole.average != avg {
        mismatches += 1;
    }
    outcome(
        mismatches == 0,
        format!("{DICE_PAIRS} random 8x8 mask pairs over 4 classes: {mismatches} differences from the set-counting oracle"),
    )
}

fn histogram_property() -> Outcome {
    let mut worst_ks: f64 = 0.0;
    let mut worst_self: f64 = 0.0;
    let mut violations = 0;
    for i in 0..HISTOGRAM_IMAGES {
        let mut rng = seed::rng_for(i, &[b"acceptance-histogram"]);
        let source = oracles::random_image(&mut rng, 64);
        let reference = oracles::random_image(&mut rng, 64);
        let matched = histogram_match(&source, &compute_histogram(&reference, 256).unwrap()).unwrap();
        let counts = oracles::bin_counts(reference.data(), 256);
        worst_ks = worst_ks.max(oracles::ks_brute_force(matched.data(), |t| oracles::piecewise_cdf(&counts, t)));
        let own = histogram_match(&source, &compute_histogram(&source, 256).unwrap()).unwrap();
        for (a, b) in source.data().iter().zip(own.data()) {
            worst_self = worst_self.max((a - b).abs());
        }
        for _ in 0..MONOTONE_PAIRS {
            let (a, b) = (rng.random_range(0..4096), rng.random_range(0..4096));
            let (s, m) = (source.data(), matched.data());
            if s[a] <= s[b] && m[a] > m[b] {
                violations += 1;
            }
        }
    }
    outcome(
        worst_ks <= KS_LIMIT && worst_self <= SELF_MATCH_LIMIT && violations == 0,
        format!(
            "{HISTOGRAM_IMAGES} random 64x64 images: worst KS {worst_ks:.5} (limit {KS_LIMIT:.5}), worst self-match change \
             {worst_self:.5} (limit {SELF_MATCH_LIMIT:.5}), {violations} monotonicity violations in {} sampled pairs",
            HISTOGRAM_IMAGES as usize * MONOTONE_PAIRS
        ),
    )
}

/// Longest-processing-time-first makespan of `units` over `workers`.
fn makespan(units: &[f64], workers: usize) -> f64 {
    let mut sorted = units.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut load = vec![0.0f64; workers];
    for u in sorted {
        let i = (0..workers).min_by(|&a, &b| load[a].total_cmp(&load[b])).unwrap();
        load[i] += u;
    }
    load.into_iter().fold(0.0, f64::max)
}

struct Ladder {
    rows: Vec<ScenarioRow>,
    caches: BTreeMap<u64, SupervisedCache>,
    pools: BTreeMap<u64, Vec<SliceSample>>,
    unit_seconds: Vec<f64>,
    wall_seconds: f64,
}

fn run_ladder() -> Ladder {
    let phantom = PhantomConfig::default();
    let cohort = generate_cohort(&phantom).unwrap();
    let started = Instant::now();
    let mut ladder = Ladder {
        rows: Vec::new(),
        caches: BTreeMap::new(),
        pools: BTreeMap::new(),
        unit_seconds: Vec::new(),
        wall_seconds: 0.0,
    };
    for seed_value in LADDER_SEEDS {
        let cfg = RunConfig {
            seed: seed_value,
            ..RunConfig::default()
        };
        let splits = prepare_cohort(&cohort.labeled, &cohort.unlabeled, &cfg.preprocess, seed_value).unwrap();
        let settings = cfg.scenario_settings();
        let mut cache = SupervisedCache::default();
        let mut by_kind = BTreeMap::new();
        // Each FS/SS pair shares one supervised run: one unit of work.
        for pair in [
            [ScenarioKind::FS, ScenarioKind::SS],
            [ScenarioKind::FS50, ScenarioKind::SS50],
            [ScenarioKind::FSH, ScenarioKind::SSH],
            [ScenarioKind::FS50H, ScenarioKind::SS50H],
        ] {
            let unit = Instant::now();
            let specs: Vec<ScenarioSpec> = pair
                .iter()
                .map(|&k| ScenarioSpec::new(k, seed_value, cfg.train_config()))
                .collect();
            let table = compare_scenarios_cached(&specs, &splits, &settings, &mut cache).unwrap();
            for row in table.rows() {
                by_kind.insert(row.kind, row);
            }
            ladder.unit_seconds.push(unit.elapsed().as_secs_f64());
        }
        ladder.rows.extend(ScenarioKind::ALL.iter().map(|k| by_kind.remove(k).unwrap()));
        ladder.caches.insert(seed_value, cache);
        ladder.pools.insert(seed_value, splits.pool);
    }
    ladder.wall_seconds = started.elapsed().as_secs_f64();
    ladder
}

fn test_c_avg(row: &ScenarioRow) -> f64 {
    row.dice[3][3].unwrap_or(f64::NAN)
}

fn scenario_ladder(ladder: &Ladder) -> Outcome {
    print!("{}", cardioseg::ssl::rows_to_text(&ladder.rows));
    let mean = |k| mean_test_c(&ladder.rows, k).unwrap_or(f64::NAN);
    let (fs, fsh, ssh) = (mean(ScenarioKind::FS), mean(ScenarioKind::FSH), mean(ScenarioKind::SSH));
    let mut ssh_best = 0;
    for seed_value in LADDER_SEEDS {
        let rows: Vec<&ScenarioRow> = ladder.rows.iter().filter(|r| r.seed == seed_value).collect();
        let ssh_row = rows.iter().find(|r| r.kind == ScenarioKind::SSH).unwrap();
        if rows.iter().all(|r| test_c_avg(r) <= test_c_avg(ssh_row)) {
            ssh_best += 1;
        }
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let projected = makespan(&ladder.unit_seconds, LADDER_WORKERS);
    let wall_ok = if cores >= LADDER_WORKERS {
        ladder.wall_seconds.min(projected) <= LADDER_WALL_SECONDS
    } else {
        projected <= LADDER_WALL_SECONDS
    };
    outcome(
        ssh >= fs + SSH_MARGIN && fsh >= fs + FSH_MARGIN && ssh_best >= 2 && wall_ok,
        format!(
            "mean vendor-C test dice FS {fs:.4}, FSH {fsh:.4} (needs >= {:.4}), SSH {ssh:.4} (needs >= {:.4}); \
             SSH best in {ssh_best}/3 seeds (needs 2); {} units took {:.0} s serially on {cores} core(s), \
             {projected:.0} s as {LADDER_WORKERS} parallel workers (limit {LADDER_WALL_SECONDS:.0} s)",
            fs + FSH_MARGIN,
            fs + SSH_MARGIN,
            ladder.unit_seconds.len(),
            ladder.wall_seconds,
        ),
    )
}

/// The smoke profile: desk defaults at 32x32 with a depth-2 network and 5
/// epochs, trained on the labeled split of the default cohort.
fn smoke_profile() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.phantom.image_size = SMOKE_SIZE;
    cfg.preprocess.crop_height = SMOKE_SIZE;
    cfg.preprocess.crop_width = SMOKE_SIZE;
    cfg.network.depth = 2;
    cfg.train.epochs = SMOKE_EPOCHS;
    cfg
}

fn architecture_trend() -> Outcome {
    let profile = smoke_profile();
    let cohort = generate_cohort(&profile.phantom).unwrap();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed_value in LADDER_SEEDS {
        let splits = prepare_cohort(&cohort.labeled, &cohort.unlabeled, &profile.preprocess, seed_value).unwrap();
        let mut cfg = profile.train_config();
        cfg.seed = seed::derive(seed_value, &[b"train"]);
        cfg.augmentation.seed = seed::derive(seed_value, &[b"augment"]);
        let final_loss = |residual: bool| {
            let net = NetworkInstance::build(
                NetworkConfig {
                    residual,
                    ..profile.network.clone()
                },
                seed::derive(seed_value, &[b"init"]),
            )
            .unwrap();
            train(net, &splits.train, &splits.validation, &cfg).unwrap().history.last().unwrap().train_loss
        };
        let (res, plain) = (final_loss(true), final_loss(false));
        if res <= plain {
            wins += 1;
        }
        detail.push(format!("seed {seed_value}: residual {res:.4} vs plain {plain:.4}"));
    }
    outcome(
        wins >= 2,
        format!(
            "final training loss, smoke profile ({SMOKE_SIZE}x{SMOKE_SIZE}, depth 2, {SMOKE_EPOCHS} epochs, {:?} loss): {}; residual <= plain in {wins}/3 (needs 2)",
            profile.train.loss,
            detail.join(", ")
        ),
    )
}

fn split_integrity() -> Outcome {
    let mut leaks = 0;
    let mut worst: f64 = 0.0;
    for run in 0..SPLIT_RUNS {
        let mut rng = seed::rng_for(run, &[b"acceptance-split"]);
        let n = rng.random_range(60..=200);
        let patients: Vec<(String, usize)> = (0..n).map(|i| (format!("p{i:03}"), 2 * rng.random_range(6..=12))).collect();
        let a = patient_aware_split(&patients, DEFAULT_SPLIT_RATIOS, run).unwrap();
        for p in &patients {
            let homes = [&a.train, &a.validation, &a.test].iter().filter(|s| s.contains(&p.0)).count();
            if homes != 1 {
                leaks += 1;
            }
        }
        for (r, t) in a.realized_ratios().iter().zip(SPLIT_TARGET) {
            worst = worst.max((r - t).abs());
        }
    }
    outcome(
        leaks == 0 && worst <= SPLIT_TOLERANCE,
        format!(
            "{SPLIT_RUNS} seeded splits of 60-200 patients: {leaks} leaked or unassigned patients, worst ratio deviation \
             {:.2} pp (limit {:.0} pp)",
            worst * 100.0,
            SPLIT_TOLERANCE * 100.0
        ),
    )
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_cardioseg");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let status = Command::new(exe).args(args).stdout(std::process::Stdio::null()).status().unwrap();
        assert!(status.success(), "cardioseg {args:?} failed");
    };
    let root = dir.path();
    let manifest = root.join("cohort");
    run(&["--seed", "5", "generate", "--out", manifest.to_str().unwrap()]);
    let scenario = |out: &str, jobs: &str| {
        let out = root.join(out);
        run(&[
            "--seed", "5", "scenarios", "--manifest", manifest.to_str().unwrap(), "--epochs", "2",
            "--only", "FS,FSH,SS,SSH", "--jobs", jobs, "--out", out.to_str().unwrap(),
        ]);
        csv_files(&out)
    };
    let first = scenario("first", "1");
    let second = scenario("second", "1");
    let fanned = scenario("fanned", "2");
    let identical = !first.is_empty() && first == second && first == fanned;
    outcome(
        identical,
        format!(
            "cardioseg scenarios with --seed 5 run twice serially and once with --jobs 2: {} CSV files ({}), {}",
            first.len(),
            first.keys().cloned().collect::<Vec<_>>().join(", "),
            if identical { "byte-identical" } else { "contents differ" }
        ),
    )
}

fn pseudo_label_audit(ladder: &Ladder) -> Outcome {
    let mut lines = Vec::new();
    let (mut dice_sum, mut accepted) = (0.0, 0usize);
    let mut vacuous_ok = true;
    for seed_value in LADDER_SEEDS {
        let net = &ladder.caches[&seed_value].get(seed_value, 1.0, true).unwrap().net;
        let pool = &ladder.pools[&seed_value];
        let mut set = pseudo_label(net, pool, &PseudoLabelFilter::default()).unwrap();
        let audit = set.audit(4).unwrap();
        if let Some(d) = audit {
            dice_sum += d * set.accepted.len() as f64;
            accepted += set.accepted.len();
        }
        let vacuous = pseudo_label(net, pool, &PseudoLabelFilter::vacuous()).unwrap();
        vacuous_ok &= vacuous.accepted.len() == pool.len();
        lines.push(format!(
            "seed {seed_value}: {}/{} accepted, hidden-truth dice {}, vacuous {}/{}",
            set.accepted.len(),
            pool.len(),
            audit.map_or("n/a".into(), |d| format!("{d:.4}")),
            vacuous.accepted.len(),
            pool.len()
        ));
    }
    let mean = (accepted > 0).then(|| dice_sum / accepted as f64);
    outcome(
        mean.is_some_and(|d| d >= PSEUDO_AUDIT_MIN) && vacuous_ok,
        format!(
            "FSH model pseudo-labels: mean hidden-truth dice over {accepted} accepted masks {} (limit {PSEUDO_AUDIT_MIN}); {}",
            mean.map_or("n/a".into(), |d| format!("{d:.4}")),
            lines.join("; ")
        ),
    )
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("CARDIOSEG_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut failures = 0;
    let mut report = |n: u32, name: &str, o: Outcome| {
        println!("criterion {n} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failures += usize::from(!o.passed);
    };
    if wanted(1) {
        report(1, "gradient correctness", gradient_correctness());
    }
    if wanted(2) {
        report(2, "dice oracle equivalence", dice_oracle());
    }
    if wanted(3) {
        report(3, "histogram matching", histogram_property());
    }
    if wanted(5) {
        report(5, "architecture trend", architecture_trend());
    }
    if wanted(6) {
        report(6, "split integrity", split_integrity());
    }
    if wanted(7) {
        report(7, "determinism", determinism());
    }
    if wanted(4) || wanted(8) {
        let ladder = run_ladder();
        if wanted(4) {
            report(4, "scenario ladder", scenario_ladder(&ladder));
        }
        if wanted(8) {
            report(8, "pseudo-label audit", pseudo_label_audit(&ladder));
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
