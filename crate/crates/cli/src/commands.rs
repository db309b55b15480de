use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use cardioseg::augment::{compute_histogram, histogram_match, ReferencePool};
use cardioseg::config::{Profile, RunConfig};
use cardioseg::data::{load_manifest, write_manifest, LoadMode, SliceSample, Vendor, VolumeRecord};
use cardioseg::nn::{load_checkpoint, save_checkpoint};
use cardioseg::phantom::{generate_cohort, write_preview};
use cardioseg::ssl::{
    compare_scenarios, evaluate_hidden, mean_test_c, prepare_cohort, pseudo_label as run_pseudo_label,
    rows_from_csv, rows_to_csv, rows_to_text, CohortSplits, PseudoLabelFilter, ScenarioKind,
    ScenarioRow, ScenarioSpec,
};
use cardioseg::trainer::{evaluate as run_evaluate, metrics_csv, run_summary, train as run_train};
use cardioseg::viz::{read_gray, write_grid, Tile};
use cardioseg::{LossKind, NetworkInstance};

use crate::output::{write_file_atomic, Staging};
use crate::{Arch, Common, LossArg, OutArg, SplitArg, TrainOverrides};

const OUT_ENV: &str = "CARDIOSEG_OUT";

fn out_dir(out: &OutArg, command: &str) -> PathBuf {
    if let Some(p) = &out.out {
        return p.clone();
    }
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(command)
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("config {}", path.display()))?,
        None => RunConfig::profile(common.profile.parse::<Profile>()?),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.phantom.seed = seed;
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(arch) = o.arch {
        cfg.network.residual = matches!(arch, Arch::Resunet);
    }
    if let Some(loss) = o.loss {
        cfg.train.loss = match loss {
            LossArg::Ce => LossKind::CrossEntropy,
            LossArg::Dice => LossKind::Dice,
            LossArg::Both => LossKind::SumOfBoth,
        };
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(d) = o.depth {
        cfg.network.depth = d;
    }
    if let Some(c) = o.crop {
        cfg.preprocess.crop_height = c;
        cfg.preprocess.crop_width = c;
    }
}

fn announce(command: &str, cfg: &RunConfig) {
    println!("# cardioseg {command}: effective configuration");
    print!("{}", cfg.to_toml());
    println!("# end of configuration");
}

fn load_cohort(manifest: &Path, cfg: &RunConfig) -> Result<CohortSplits> {
    let loaded = load_manifest(manifest, LoadMode::Strict)
        .with_context(|| format!("manifest {}", manifest.display()))?;
    let (labeled, unlabeled): (Vec<VolumeRecord>, Vec<VolumeRecord>) =
        loaded.records.into_iter().partition(|r| r.labels.is_some());
    ensure!(!labeled.is_empty(), "manifest has no labeled patients");
    Ok(prepare_cohort(&labeled, &unlabeled, &cfg.preprocess, cfg.seed)?)
}

pub fn generate(common: &Common, out: &OutArg) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    announce("generate", &cfg);
    let target = out_dir(out, "generate");
    let stage = Staging::new(&target)?;
    let cohort = generate_cohort(&cfg.phantom)?;
    let records: Vec<VolumeRecord> = cohort.records().cloned().collect();
    write_manifest(stage.path(), &records)?;
    let previews = stage.path().join("previews");
    fs::create_dir_all(&previews)?;
    for rec in &records {
        write_preview(rec, &previews.join(format!("{}.png", rec.patient_id)))?;
    }
    let mut summary = String::new();
    let mut slices = 0;
    for vendor in [Vendor::A, Vendor::B, Vendor::C] {
        let recs: Vec<&VolumeRecord> = records.iter().filter(|r| r.vendor == vendor).collect();
        let n: usize = recs.iter().map(|r| r.slice_count()).sum();
        slices += n;
        let role = if vendor == Vendor::C { "unlabeled" } else { "labeled" };
        let _ = writeln!(summary, "vendor {vendor}: {} patients, {n} ED/ES slices, {role}", recs.len());
    }
    let _ = writeln!(summary, "total: {} patients, {slices} ED/ES slices", records.len());
    stage.write("cohort.txt", &summary)?;
    stage.write("config.toml", cfg.to_toml())?;
    let check = load_manifest(stage.path(), LoadMode::Strict)?;
    ensure!(check.records.len() == records.len(), "written manifest failed validation");
    let dir = stage.commit()?;
    print!("{summary}");
    println!("wrote {}", dir.display());
    Ok(())
}

fn train_config_for(cfg: &RunConfig, cohort: &CohortSplits, histmatch: bool) -> Result<cardioseg::trainer::TrainConfig> {
    let mut tc = cfg.train_config();
    if histmatch {
        ensure!(!cohort.pool.is_empty(), "--histmatch needs unlabeled patients in the manifest");
        let images: Vec<_> = cohort.pool.iter().map(|s| &s.image).collect();
        let pool = ReferencePool::from_images(
            &images,
            cfg.augmentation.histogram_bins,
            cfg.augmentation.exclude_zeros,
            cfg.augmentation.pooled_reference,
        )?
        .with_vendor(Vendor::C);
        tc.augmentation.histogram_match = Some(Arc::new(pool));
    }
    Ok(tc)
}

pub fn train(
    common: &Common,
    manifest: &Path,
    overrides: &TrainOverrides,
    histmatch: bool,
    out: &OutArg,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_overrides(&mut cfg, overrides);
    cfg.validate()?;
    announce("train", &cfg);
    let target = out_dir(out, "train");
    let stage = Staging::new(&target)?;
    let cohort = load_cohort(manifest, &cfg)?;
    let tc = train_config_for(&cfg, &cohort, histmatch)?;
    let net = NetworkInstance::build(cfg.network.clone(), cfg.seed)?;
    println!(
        "training {} parameters on {} slices ({} validation)",
        net.parameter_count(),
        cohort.train.len(),
        cohort.validation.len()
    );
    let outcome = run_train(net, &cohort.train, &cohort.validation, &tc)?;
    for m in &outcome.history {
        let val = m.val_dice.as_ref().map(|d| format!("{:.4}", d.average)).unwrap_or_default();
        println!("epoch {:>3}  loss {:.5}  val dice {val}  ({:.1}s)", m.epoch, m.train_loss, m.wall_seconds);
    }
    let ckpt = stage.path().join("model.ckpt");
    save_checkpoint(&outcome.net, &ckpt)?;
    stage.write("metrics.csv", metrics_csv(&outcome.history, tc.loss))?;
    let mut summary = run_summary(&tc, &outcome);
    if !cohort.test.is_empty() {
        let report = run_evaluate(&outcome.net, &cohort.test)?;
        let _ = writeln!(summary, "test_dice = {:.6}", report.average);
    }
    stage.write("summary.txt", &summary)?;
    stage.write("config.toml", cfg.to_toml())?;
    let reloaded = load_checkpoint(&ckpt).context("written checkpoint failed validation")?;
    let same = reloaded.config() == outcome.net.config()
        && reloaded.params().iter().zip(outcome.net.params()).all(|(a, b)| a.tensor == b.tensor);
    ensure!(same, "written checkpoint differs from the trained network");
    let dir = stage.commit()?;
    print!("{summary}");
    println!("wrote {}", dir.display());
    Ok(())
}

fn split_samples(cohort: &CohortSplits, split: SplitArg) -> (&[SliceSample], &'static str) {
    match split {
        SplitArg::Train => (&cohort.train, "train"),
        SplitArg::Val => (&cohort.validation, "val"),
        SplitArg::Test => (&cohort.test, "test"),
        SplitArg::Testc => (&cohort.test_c, "testc"),
    }
}

pub fn evaluate(
    common: &Common,
    checkpoint: &Path,
    manifest: &Path,
    split: SplitArg,
    out: &OutArg,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let net = load_checkpoint(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    cfg.network = net.config().clone();
    cfg.validate()?;
    announce("evaluate", &cfg);
    let target = out_dir(out, "evaluate");
    let stage = Staging::new(&target)?;
    let cohort = load_cohort(manifest, &cfg)?;
    let (samples, name) = split_samples(&cohort, split);
    ensure!(!samples.is_empty(), "split `{name}` is empty");
    let report = if matches!(split, SplitArg::Testc) {
        evaluate_hidden(&net, samples)?
    } else {
        run_evaluate(&net, samples)?
    };
    let csv = format!("checkpoint,split,class,dice\n{}", report.csv_rows("model", name));
    stage.write("evaluation.csv", &csv)?;
    let dir = stage.commit()?;
    print!("{csv}");
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn pseudo_label(
    common: &Common,
    checkpoint: &Path,
    manifest: &Path,
    vacuous: bool,
    out: &OutArg,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let net = load_checkpoint(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    cfg.network = net.config().clone();
    if vacuous {
        cfg.pseudo_label = PseudoLabelFilter::vacuous();
    }
    cfg.validate()?;
    announce("pseudo-label", &cfg);
    let target = out_dir(out, "pseudo-label");
    let stage = Staging::new(&target)?;
    let cohort = load_cohort(manifest, &cfg)?;
    ensure!(!cohort.pool.is_empty(), "manifest has no unlabeled pool");
    let mut set = run_pseudo_label(&net, &cohort.pool, &cfg.pseudo_label)?;
    let audit = set.audit(net.config().num_classes)?;
    stage.write("pseudo_labels.csv", set.audit_csv())?;
    if !set.accepted.is_empty() {
        let mut tiles = Vec::new();
        for s in &set.accepted {
            tiles.push(Tile::Gray(&s.image));
            if let Some(m) = &s.mask {
                tiles.push(Tile::Labels(m));
            }
        }
        write_grid(&tiles, 6, &stage.path().join("accepted.png"))?;
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "pool = {}", set.records.len());
    let _ = writeln!(summary, "accepted = {}", set.accepted.len());
    let _ = writeln!(summary, "rejected = {}", set.rejected.len());
    if let Some(d) = audit {
        let _ = writeln!(summary, "accepted_hidden_dice = {d:.6}");
    }
    stage.write("summary.txt", &summary)?;
    let dir = stage.commit()?;
    print!("{summary}");
    println!("wrote {}", dir.display());
    Ok(())
}

/// Scenarios that share one supervised run land in the same work unit.
fn work_units(kinds: &[ScenarioKind], seeds: &[u64]) -> Vec<(u64, Vec<ScenarioKind>)> {
    let mut units = Vec::new();
    for &seed in seeds {
        let mut groups: BTreeMap<(u64, bool), Vec<ScenarioKind>> = BTreeMap::new();
        for &k in kinds {
            groups
                .entry((k.labeled_fraction().to_bits(), k.histogram_matching()))
                .or_default()
                .push(k);
        }
        units.extend(groups.into_values().map(|g| (seed, g)));
    }
    units
}

#[allow(clippy::too_many_arguments)]
pub fn scenarios(
    common: &Common,
    manifest: &Path,
    only: Option<Vec<String>>,
    seeds: Option<Vec<u64>>,
    jobs: usize,
    overrides: &TrainOverrides,
    out: &OutArg,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_overrides(&mut cfg, overrides);
    if let Some(only) = only {
        cfg.scenarios.kinds = only;
    }
    if let Some(seeds) = seeds {
        cfg.scenarios.seeds = seeds;
    } else if let Some(seed) = common.seed {
        cfg.scenarios.seeds = vec![seed];
    }
    cfg.validate()?;
    ensure!(jobs >= 1, "--jobs must be at least 1");
    ensure!(!cfg.scenarios.seeds.is_empty(), "no seeds configured");
    announce("scenarios", &cfg);
    let kinds = cfg.scenario_kinds()?;
    let target = out_dir(out, "scenarios");
    let stage = Staging::new(&target)?;
    stage.write("config.toml", cfg.to_toml())?;

    let (rows, audit) = if jobs == 1 {
        run_scenarios_here(&cfg, manifest, &kinds)?
    } else {
        run_scenarios_fanned(&stage, manifest, &kinds, &cfg.scenarios.seeds, jobs)?
    };
    let csv = rows_to_csv(&rows);
    let text = rows_to_text(&rows);
    stage.write("scenarios.csv", &csv)?;
    stage.write("scenarios.txt", &text)?;
    stage.write("pseudo_audit.csv", &audit)?;
    stage.write("summary.txt", means_text(&rows, &kinds))?;
    let reread = rows_from_csv(&fs::read_to_string(stage.path().join("scenarios.csv"))?)?;
    ensure!(reread.len() == rows.len(), "written scenario CSV failed validation");
    let dir = stage.commit()?;
    print!("{text}");
    print!("{}", means_text(&rows, &kinds));
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_scenarios_here(
    cfg: &RunConfig,
    manifest: &Path,
    kinds: &[ScenarioKind],
) -> Result<(Vec<ScenarioRow>, String)> {
    let mut rows = Vec::new();
    let mut audit = String::new();
    for &seed in &cfg.scenarios.seeds {
        let mut seeded = cfg.clone();
        seeded.seed = seed;
        let cohort = load_cohort(manifest, &seeded)?;
        let specs: Vec<ScenarioSpec> = kinds
            .iter()
            .map(|&k| ScenarioSpec::new(k, seed, seeded.train_config()))
            .collect();
        let table = compare_scenarios(&specs, &cohort, &seeded.scenario_settings())?;
        rows.extend(table.rows());
        append_csv(&mut audit, &table.audit_csv());
    }
    Ok((rows, audit))
}

fn append_csv(acc: &mut String, part: &str) {
    let mut lines = part.lines();
    let Some(header) = lines.next() else { return };
    if acc.is_empty() {
        acc.push_str(header);
        acc.push('\n');
    }
    for line in lines {
        acc.push_str(line);
        acc.push('\n');
    }
}

fn run_scenarios_fanned(
    stage: &Staging,
    manifest: &Path,
    kinds: &[ScenarioKind],
    seeds: &[u64],
    jobs: usize,
) -> Result<(Vec<ScenarioRow>, String)> {
    let exe = std::env::current_exe().context("cannot locate the cardioseg executable")?;
    let config = stage.path().join("config.toml");
    let units = work_units(kinds, seeds);
    let mut pending: Vec<(usize, &(u64, Vec<ScenarioKind>))> = units.iter().enumerate().collect();
    pending.reverse();
    let mut running = Vec::new();
    let mut failures = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some((i, (seed, group))) = pending.pop() else { break };
            let only: Vec<String> = group.iter().map(|k| k.to_string()).collect();
            let child = Process::new(&exe)
                .arg("scenarios")
                .arg("--config")
                .arg(&config)
                .arg("--manifest")
                .arg(manifest)
                .arg("--only")
                .arg(only.join(","))
                .arg("--seeds")
                .arg(seed.to_string())
                .arg("--out")
                .arg(stage.path().join("units").join(format!("unit{i:03}")))
                .stdout(std::process::Stdio::null())
                .spawn()
                .context("cannot start a scenario worker")?;
            running.push((i, child));
        }
        let (i, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            failures.push(i);
        }
    }
    if !failures.is_empty() {
        bail!("scenario workers {failures:?} failed");
    }
    let mut by_key = BTreeMap::new();
    let mut audits = BTreeMap::new();
    for (i, _) in units.iter().enumerate() {
        let dir = stage.path().join("units").join(format!("unit{i:03}"));
        for row in rows_from_csv(&fs::read_to_string(dir.join("scenarios.csv"))?)? {
            by_key.insert((row.seed, row.kind), row);
        }
        let audit = fs::read_to_string(dir.join("pseudo_audit.csv"))?;
        for line in audit.lines().skip(1) {
            let mut parts = line.splitn(3, ',');
            let kind: ScenarioKind = parts.next().unwrap_or_default().parse()?;
            let seed: u64 = parts.next().unwrap_or_default().parse()?;
            audits.entry((seed, kind)).or_insert_with(Vec::new).push(line.to_string());
        }
        if audit.lines().next().is_some() {
            audits.entry((u64::MAX, ScenarioKind::FS)).or_insert_with(|| vec![audit.lines().next().unwrap_or_default().to_string()]);
        }
    }
    fs::remove_dir_all(stage.path().join("units"))?;
    let order = |seed: u64, kind: ScenarioKind| (seed, kind);
    let mut rows = Vec::new();
    let mut audit = String::new();
    if let Some(header) = audits.remove(&(u64::MAX, ScenarioKind::FS)) {
        audit.push_str(&header[0]);
        audit.push('\n');
    }
    for &seed in seeds {
        for &kind in kinds {
            let row = by_key
                .remove(&order(seed, kind))
                .with_context(|| format!("worker output lacks {kind} seed {seed}"))?;
            rows.push(row);
            for line in audits.remove(&(seed, kind)).unwrap_or_default() {
                audit.push_str(&line);
                audit.push('\n');
            }
        }
    }
    Ok((rows, audit))
}

fn means_text(rows: &[ScenarioRow], kinds: &[ScenarioKind]) -> String {
    let mut out = String::from("mean held-out vendor-C dice over seeds\n");
    for &k in kinds {
        if let Some(m) = mean_test_c(rows, k) {
            let _ = writeln!(out, "{:>6}  {m:.4}", k.to_string());
        }
    }
    out
}

pub fn histmatch(common: &Common, source: &Path, reference: &Path, out: &Path, bins: usize) -> Result<()> {
    println!("# cardioseg histmatch: effective configuration");
    println!("source = {:?}", source.display().to_string());
    println!("reference = {:?}", reference.display().to_string());
    println!("out = {:?}", out.display().to_string());
    println!("bins = {bins}");
    println!("seed = {}", common.seed.unwrap_or(0));
    println!("# end of configuration");
    let src = read_gray(source).with_context(|| format!("source {}", source.display()))?;
    let refimg = read_gray(reference).with_context(|| format!("reference {}", reference.display()))?;
    let hist = compute_histogram(&refimg, bins)?;
    let matched = histogram_match(&src, &hist)?;
    write_file_atomic(out, |tmp| Ok(write_grid(&[Tile::Gray(&matched)], 1, tmp)?))?;
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "matched".into());
    let triptych = out.with_file_name(format!("{stem}_triptych.png"));
    write_file_atomic(&triptych, |tmp| {
        Ok(write_grid(
            &[Tile::Gray(&src), Tile::Gray(&refimg), Tile::Gray(&matched)],
            3,
            tmp,
        )?)
    })?;
    let check = read_gray(out)?;
    ensure!(
        (check.height(), check.width()) == (src.height(), src.width()),
        "written image failed validation"
    );
    println!(
        "mean intensity: source {:.1}, reference {:.1}, matched {:.1} (8-bit levels)",
        src.mean() * 255.0,
        refimg.mean() * 255.0,
        matched.mean() * 255.0
    );
    println!("wrote {} and {}", out.display(), triptych.display());
    Ok(())
}

pub fn report(csv: &Path) -> Result<()> {
    let text = fs::read_to_string(csv).with_context(|| format!("cannot read {}", csv.display()))?;
    let rows = rows_from_csv(&text)?;
    let mut kinds: Vec<ScenarioKind> = rows.iter().map(|r| r.kind).collect();
    kinds.sort();
    kinds.dedup();
    print!("{}", rows_to_text(&rows));
    print!("{}", means_text(&rows, &kinds));
    Ok(())
}

pub fn config(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    println!("# cardioseg configuration reference ({} profile)", common.profile);
    println!("# every key is optional; omitted keys take the values below");
    print!("{}", cfg.to_toml());
    Ok(())
}
