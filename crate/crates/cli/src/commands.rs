use std::path::{Path, PathBuf};

use birads_core::checkpoint;
use birads_core::cv::{
    ablate_augmentations, ablate_layers, ablate_wiring, augmentation_policies, fold_seed, Table, DEFAULT_AUG_SIZES,
    DEFAULT_LAYER_COUNTS,
};
use birads_core::data::load_metadata_csv;
use birads_core::data::synth::synth_generate;
use birads_core::fsio::write_atomic;
use birads_core::gradcheck::{mass_vocabulary, run_gradcheck, GradcheckConfig, GradcheckReport};
use birads_core::metrics::{fmt_sig, roc_csv, METRIC_NAMES};
use birads_core::tape::BackwardFault;
use birads_core::train::{evaluate, prepare, train_fold};
use birads_core::{
    run_cv, ConfigMap, CvSettings, Dataset, DescriptorVocabulary, Error, MetricsReport, ModelConfig, Result,
    SynthConfig,
};

use crate::args::{model_config, resolve, resolve_model, ModelArgs, Resolved};
use crate::manifest::RunManifest;
use crate::{AblateMode, AblateCmd, CvCmd, EvalCmd, GradcheckCmd, SynthGenCmd, TrainCmd};

/// A completed check whose outcome was negative.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn is_nonempty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some())
}

/// Loads the dataset under `dir`, recording the metadata and every image in
/// the manifest's input hash.
fn load_data(dir: &Path, vocab: &DescriptorVocabulary, manifest: &mut RunManifest) -> Result<Dataset> {
    let meta = dir.join(Dataset::METADATA_FILE);
    let records = load_metadata_csv(&meta, vocab)?;
    manifest.add_input(Dataset::METADATA_FILE, &meta)?;
    for r in &records {
        for p in [&r.cc_image, &r.mlo_image] {
            manifest.add_input(&p.display().to_string(), &dir.join(p))?;
        }
    }
    Dataset::from_records(dir, &records)
}

fn add_config_input(manifest: &mut RunManifest, model: &ModelArgs) -> Result<()> {
    if let Some(c) = &model.config {
        if ModelConfig::preset(c).is_none() {
            manifest.add_input("config", Path::new(c))?;
        }
    }
    if let Some(v) = &model.vocab {
        manifest.add_input("vocab", v)?;
    }
    Ok(())
}

/// Manifest for a run; `outputs` are named relative to the output directory.
fn start(
    command: &str,
    mut config: ConfigMap,
    seed: Option<u64>,
    outputs: &[&str],
    extra: &[(&str, String)],
) -> Result<RunManifest> {
    for (k, v) in extra {
        config.set(*k, v);
    }
    let mut m = RunManifest::new(command, config, seed);
    m.outputs = outputs.iter().map(PathBuf::from).collect();
    Ok(m)
}

pub fn synth_gen(cmd: &SynthGenCmd) -> Result<()> {
    let cfg = SynthConfig {
        n_cases: cmd.n_cases,
        alpha: cmd.alpha,
        seed: cmd.seed,
        image_size: cmd.size,
    };
    cfg.validate()?;
    if is_nonempty_dir(&cmd.out) && !cmd.force {
        return Err(Error::Usage(format!(
            "{} exists and is not empty; pass --force to write into it",
            cmd.out.display()
        )));
    }
    create_dir(&cmd.out)?;
    let mut manifest = start(
        "synth-gen",
        cfg.manifest(),
        Some(cfg.seed),
        &["manifest.txt", "metadata.csv", "images"],
        &[],
    )?;
    manifest.write(&cmd.out)?;
    let records = synth_generate(&cmd.out, &cfg)?;
    let malignant = records.iter().filter(|r| r.label == 1).count();
    println!(
        "wrote {} cases ({} malignant, {} images) to {}",
        records.len(),
        malignant,
        2 * records.len(),
        cmd.out.display()
    );
    manifest.finish(&cmd.out)
}

/// Training and test indices of `fold`, or all cases when no fold is named.
fn fold_split(labels: &[u8], fold: Option<usize>, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    match fold {
        None => Ok(((0..labels.len()).collect(), Vec::new())),
        Some(f) => {
            let plan = birads_core::data::stratified_kfold(labels, k, seed)?;
            Ok((plan.train_indices(f)?, plan.test_indices(f)?.to_vec()))
        }
    }
}

pub fn train(cmd: &TrainCmd) -> Result<()> {
    let r = resolve(&cmd.model, &cmd.train, "default")?;
    create_dir(&cmd.out)?;
    let mut extra = vec![("data", cmd.data.display().to_string()), ("k", cmd.k.to_string())];
    extra.push(("fold", cmd.fold.map_or("all".into(), |f| f.to_string())));
    let mut manifest = start(
        "train",
        r.to_kv(),
        Some(r.train.seed),
        &["model.ckpt", "loss.csv"],
        &extra,
    )?;
    add_config_input(&mut manifest, &cmd.model)?;
    let dataset = load_data(&cmd.data, &r.vocab, &mut manifest)?;
    manifest.write(&cmd.out)?;

    let (train_idx, _) = fold_split(&dataset.labels(), cmd.fold, cmd.k, r.train.seed)?;
    let prepared = prepare(&dataset, &r.vocab, &r.model)?;
    let cases: Vec<_> = train_idx.iter().map(|&i| prepared[i].clone()).collect();
    let train_cfg = match cmd.fold {
        Some(f) => birads_core::TrainConfig {
            seed: fold_seed(r.train.seed, f),
            ..r.train.clone()
        },
        None => r.train.clone(),
    };
    let (model, trace) = train_fold(&cases, &r.vocab, &r.model, &train_cfg)?;
    checkpoint::save(&model, &cmd.out.join("model.ckpt"))?;
    write_atomic(&cmd.out.join("loss.csv"), trace.to_csv())?;
    println!(
        "trained on {} cases for {} iterations: loss {} -> {} (last 10%)",
        cases.len(),
        trace.entries.len(),
        fmt_sig(trace.first_loss().unwrap_or(f64::NAN)),
        fmt_sig(trace.tail_mean(0.1).unwrap_or(f64::NAN))
    );
    manifest.finish(&cmd.out)
}

/// Architecture fields that must agree between a checkpoint and a requested
/// configuration. Initialization seed and dropout only affect training.
fn architecture(cfg: &ModelConfig) -> ConfigMap {
    let mut kv = ConfigMap::new();
    for (k, v) in cfg.to_kv().iter() {
        if k != "init_seed" && k != "dropout" {
            kv.set(k, v);
        }
    }
    kv
}

fn check_compatible(ckpt: &birads_core::DualBranchModel, model: &ModelArgs) -> Result<()> {
    if model.is_set() {
        let (cfg, _) = resolve_model(model, "default")?;
        let (want, have) = (architecture(&cfg), architecture(ckpt.config()));
        let mismatch = want.iter().find(|(k, v)| have.get(k) != Some(*v));
        if let Some((k, v)) = mismatch {
            return Err(Error::Version(format!(
                "checkpoint has {k}={}, requested configuration has {k}={v}",
                have.get(k).unwrap_or("?")
            )));
        }
    }
    if model.vocab.is_some() && &model.vocabulary()? != ckpt.vocabulary() {
        return Err(Error::Version("checkpoint was trained with a different vocabulary".into()));
    }
    Ok(())
}

pub fn metrics_csv(r: &MetricsReport) -> String {
    let vals: Vec<String> = r.values().iter().map(|v| fmt_sig(*v)).collect();
    let c = r.confusion;
    format!(
        "{},threshold,tp,fp,tn,fn,undefined\n{},{},{},{},{},{},{}\n",
        METRIC_NAMES.join(","),
        vals.join(","),
        fmt_sig(r.threshold),
        c.tp,
        c.fp,
        c.tn,
        c.fn_,
        r.undefined.join(";")
    )
}

fn print_metrics(r: &MetricsReport) {
    for (name, v) in METRIC_NAMES.iter().zip(r.values()) {
        println!("{name:<12} {}", fmt_sig(v));
    }
    if !r.undefined.is_empty() {
        println!("undefined (reported as 0): {}", r.undefined.join(", "));
    }
}

pub fn eval(cmd: &EvalCmd) -> Result<()> {
    if !cmd.checkpoint.is_file() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", cmd.checkpoint.display())));
    }
    let model = checkpoint::load(&cmd.checkpoint)?;
    check_compatible(&model, &cmd.model)?;
    create_dir(&cmd.out)?;
    let mut config = model.config().to_kv();
    config.set("data", cmd.data.display());
    config.set("fold", cmd.fold.map_or("all".into(), |f| f.to_string()));
    config.set("k", cmd.k);
    let mut manifest = start(
        "eval",
        config,
        Some(cmd.seed),
        &["metrics.csv", "roc.csv"],
        &[],
    )?;
    manifest.add_input("checkpoint", &cmd.checkpoint)?;
    let dataset = load_data(&cmd.data, model.vocabulary(), &mut manifest)?;
    manifest.write(&cmd.out)?;

    let indices = match cmd.fold {
        Some(_) => fold_split(&dataset.labels(), cmd.fold, cmd.k, cmd.seed)?.1,
        None => (0..dataset.len()).collect(),
    };
    let subset = dataset.subset(&indices);
    let cases = prepare(&subset, model.vocabulary(), model.config())?;
    let report = evaluate(&model, &cases)?;
    write_atomic(&cmd.out.join("metrics.csv"), metrics_csv(&report))?;
    write_atomic(&cmd.out.join("roc.csv"), roc_csv(&report.roc))?;
    println!("evaluated {} cases", cases.len());
    print_metrics(&report);
    manifest.finish(&cmd.out)
}

fn cv_report(r: &Resolved, data: &Dataset, settings: &CvSettings, out: &Path) -> Result<()> {
    let report = run_cv(data, &r.vocab, &r.model, &r.train, settings)?;
    write_atomic(&out.join("cv.csv"), report.to_csv())?;
    for (name, (mean, std)) in METRIC_NAMES.iter().zip(report.summary) {
        println!("{name:<12} {} ± {}", fmt_sig(mean), fmt_sig(std));
    }
    Ok(())
}

pub fn cv(cmd: &CvCmd) -> Result<()> {
    ablate(&AblateCmd {
        mode: AblateMode::Cv,
        data: cmd.data.clone(),
        out: cmd.out.clone(),
        k: cmd.k,
        jobs: cmd.jobs,
        counts: None,
        aug_sizes: None,
        model: cmd.model.clone(),
        train: cmd.train.clone(),
    })
}

fn print_table(t: &Table) {
    println!("{}", t.header.join(" | "));
    for row in &t.rows {
        println!("{}", row.join(" | "));
    }
}

pub fn ablate(cmd: &AblateCmd) -> Result<()> {
    let r = resolve(&cmd.model, &cmd.train, "default")?;
    let settings = CvSettings {
        k: cmd.k,
        jobs: cmd.jobs.max(1),
    };
    let output = match cmd.mode {
        AblateMode::Cv => "cv.csv",
        AblateMode::Wiring => "wiring.csv",
        AblateMode::Layers => "layers.csv",
        AblateMode::Aug => "augmentation.csv",
    };
    create_dir(&cmd.out)?;
    let mut config = r.to_kv();
    config.set("mode", cmd.mode.name());
    config.set("k", cmd.k);
    config.set("data", cmd.data.display());
    let counts: Vec<usize> = cmd.counts.clone().unwrap_or(DEFAULT_LAYER_COUNTS.to_vec());
    let sizes: [usize; 3] = match &cmd.aug_sizes {
        None => DEFAULT_AUG_SIZES,
        Some(s) => s
            .as_slice()
            .try_into()
            .map_err(|_| Error::Usage(format!("--aug-sizes needs exactly 3 sizes, got {}", s.len())))?,
    };
    match cmd.mode {
        AblateMode::Layers => config.set("counts", counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")),
        AblateMode::Aug => config.set("aug_sizes", sizes.map(|c| c.to_string()).join(";")),
        _ => {}
    }
    let mut manifest = start(
        cmd.mode.command(),
        config,
        Some(r.train.seed),
        &[output],
        &[],
    )?;
    add_config_input(&mut manifest, &cmd.model)?;
    let data = load_data(&cmd.data, &r.vocab, &mut manifest)?;
    manifest.write(&cmd.out)?;
    let table = match cmd.mode {
        AblateMode::Cv => {
            cv_report(&r, &data, &settings, &cmd.out)?;
            return manifest.finish(&cmd.out);
        }
        AblateMode::Wiring => ablate_wiring(&data, &r.vocab, &r.model, &r.train, &settings)?,
        AblateMode::Layers => ablate_layers(&data, &r.vocab, &r.model, &r.train, &settings, &counts)?,
        AblateMode::Aug => {
            let policies = augmentation_policies(&r.train.augmentation, sizes);
            ablate_augmentations(&data, &r.vocab, &r.model, &r.train, &settings, &policies)?
        }
    };
    write_atomic(&cmd.out.join(output), table.to_csv())?;
    print_table(&table);
    manifest.finish(&cmd.out)
}

fn gradcheck_csv(report: &GradcheckReport) -> String {
    let mut out = String::from("group,count,worst_relative_error\n");
    for g in &report.groups {
        out.push_str(&format!("{},{},{:e}\n", g.name, g.count, g.worst));
    }
    out
}

pub fn gradcheck(cmd: &GradcheckCmd) -> anyhow::Result<()> {
    let args = ModelArgs {
        config: Some(cmd.config.clone()),
        ..ModelArgs::default()
    };
    let model = model_config(&args, "minimal")?;
    let vocab = match &cmd.vocab {
        Some(p) => DescriptorVocabulary::load(p)?,
        None => mass_vocabulary(),
    };
    model.validate(vocab.len())?;
    let cfg = GradcheckConfig {
        model,
        vocab,
        seed: cmd.seed,
        fault: cmd.inject_fault.map(BackwardFault::ScaleRelu),
        ..GradcheckConfig::default()
    };
    let mut config = cfg.model.to_kv();
    config.set("step", format!("{:e}", cfg.step));
    config.set("tolerance", format!("{:e}", cfg.tolerance));
    if let Some(f) = cmd.inject_fault {
        config.set("inject_fault", f);
    }
    let mut manifest = RunManifest::new("gradcheck", config, Some(cmd.seed));
    if let Some(out) = &cmd.out {
        create_dir(out)?;
        manifest.outputs = vec![PathBuf::from("gradcheck.csv")];
        manifest.write(out)?;
    }
    let started = std::time::Instant::now();
    let report = run_gradcheck(&cfg)?;
    for g in &report.groups {
        let verdict = if g.worst < report.tolerance { "ok" } else { "FAIL" };
        println!("{:<40} {:>6}  {:.3e}  {verdict}", g.name, g.count, g.worst);
    }
    println!(
        "worst relative error {:.3e} (tolerance {:e}) over {} groups in {:.1}s",
        report.worst,
        report.tolerance,
        report.groups.len(),
        started.elapsed().as_secs_f64()
    );
    if let Some(out) = &cmd.out {
        write_atomic(&out.join("gradcheck.csv"), gradcheck_csv(&report))?;
        manifest.finish(out)?;
    }
    if !report.passed() {
        return Err(VerificationFailed(format!(
            "gradient check failed: worst relative error {:.3e} ≥ {:e}",
            report.worst, report.tolerance
        ))
        .into());
    }
    Ok(())
}
