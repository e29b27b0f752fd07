use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use m2vae::datasets::{
    generate_synthetic, write_attributes, write_image_features_binary, write_image_features_text, write_interactions,
    Catalog, FeatureMatrix, InteractionLog, SyntheticSpec, Vocab,
};
use m2vae::evaluation::{
    evaluate, format_ablation_table, format_report_table, mean_std, run_ablation, run_variant, summarize, EvalReport,
    SplitPart, Variant,
};
use m2vae::theory::{verify as verify_theory, ElboToy, FusionCase};
use m2vae::training::{
    full_model_check, load_checkpoint, save_checkpoint, EpochRecord, GradCheckOptions, TrainConfig, Trainer,
};
use serde::Serialize;

use crate::config::{prepare, with_parameter, RunConfig};
use crate::{AblateArgs, EvalArgs, GradcheckArgs, Part, SweepArgs, SynthArgs, TrainArgs, VerifyArgs};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const CHECKPOINT: &str = "checkpoint.m2vc";
const EPOCH_LOG: &str = "epochs.jsonl";

/// 1 for numerical or verification failures, 2 for everything a user can fix
/// by changing flags, config, or data.
pub fn exit_status(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<m2vae::Error>() {
        Some(m2vae::Error::NonFinite { .. }) => 1,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn run_dir(flag: &Option<PathBuf>, config: &RunConfig, root: &Path, command: &str) -> PathBuf {
    flag.clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| root.join(command))
}

fn write_resolved(dir: &Path, config: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.toml"), config.to_toml()?)
}

fn split_part(p: Part) -> SplitPart {
    match p {
        Part::Validation => SplitPart::Validation,
        Part::Test => SplitPart::Test,
    }
}

/// Reorders users and items into the first-seen order the loader will
/// assign when reading the written interactions back.
fn reload_order(log: &InteractionLog, catalog: &Catalog) -> Result<(InteractionLog, Catalog)> {
    let mut users = vec![usize::MAX; log.user_count];
    let mut items = vec![usize::MAX; log.item_count];
    let (mut nu, mut ni) = (0, 0);
    let mut entries = Vec::with_capacity(log.entries.len());
    for &(u, i) in &log.entries {
        if users[u] == usize::MAX {
            users[u] = nu;
            nu += 1;
        }
        if items[i] == usize::MAX {
            items[i] = ni;
            ni += 1;
        }
        entries.push((users[u], items[i]));
    }
    if ni < log.item_count {
        log::warn!("{} items have no interactions and are not written", log.item_count - ni);
    }
    let mut old_item = vec![0; ni];
    for (old, &new) in items.iter().enumerate() {
        if new != usize::MAX {
            old_item[new] = old;
        }
    }
    let mut user_tokens = vec![String::new(); nu];
    for (old, &new) in users.iter().enumerate() {
        if new != usize::MAX {
            user_tokens[new] = log.users.token(old).to_string();
        }
    }
    let item_tokens = old_item.iter().map(|&o| log.items.token(o).to_string()).collect();
    let attributes = old_item.iter().map(|&o| catalog.attributes[o].clone()).collect();
    let cols = catalog.image_dim();
    let data = old_item.iter().flat_map(|&o| catalog.image_of(o).to_vec()).collect();
    let catalog = Catalog::new(attributes, catalog.attribute_count, FeatureMatrix::new(ni, cols, data))?;
    let log = InteractionLog {
        entries,
        user_count: nu,
        item_count: ni,
        users: Vocab::from_tokens(user_tokens),
        items: Vocab::from_tokens(item_tokens),
    };
    Ok((log, catalog))
}

pub fn synth(args: &SynthArgs) -> Result<ExitCode> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { spec.$f = v; } )* };
    }
    set!(
        items,
        users,
        clusters,
        attributes,
        feature_dim,
        interactions_per_user,
        subtypes,
        noise_scale,
        seed
    );
    spec.validate()?;

    let data = generate_synthetic(&spec)?;
    let (log, catalog) = reload_order(&data.log, &data.catalog)?;
    create_dir(&args.out)?;
    let attr_tokens: Vec<String> = (0..catalog.attribute_count).map(|a| format!("a{a}")).collect();
    write_interactions(&args.out.join("interactions.tsv"), &log)?;
    write_attributes(
        &args.out.join("attributes.tsv"),
        &log.items,
        &catalog.attributes,
        &attr_tokens,
    )?;
    let features = if args.text_features {
        let p = args.out.join("features.tsv");
        write_image_features_text(&p, &log.items, &catalog.image_features)?;
        p
    } else {
        let p = args.out.join("features.bin");
        write_image_features_binary(&p, &catalog.image_features)?;
        p
    };
    write_file(&args.out.join("synthetic.toml"), toml::to_string(&spec)?)?;
    println!(
        "wrote {} interactions, {} users, {} items to {} (features: {})",
        log.len(),
        log.user_count,
        log.item_count,
        args.out.display(),
        features.file_name().unwrap().to_string_lossy()
    );
    Ok(ExitCode::SUCCESS)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{line}").with_context(|| format!("writing {}", path.display()))
}

/// Keeps the first `n` lines of the epoch log, dropping records written after
/// the checkpoint being resumed.
fn truncate_log(path: &Path, n: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let kept: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
    if kept.lines().count() < n {
        bail!("{} holds fewer than {n} epochs; cannot resume", path.display());
    }
    write_file(path, kept)
}

fn save_atomic(path: &Path, config: &TrainConfig, state: &m2vae::training::TrainState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    save_checkpoint(&tmp, config, state)?;
    fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<String> {
    let table = format_report_table(std::slice::from_ref(report));
    write_file(&dir.join(format!("{stem}.txt")), &table)?;
    write_file(&dir.join(format!("{stem}.jsonl")), jsonl(std::slice::from_ref(report))?)?;
    Ok(table)
}

pub fn train(args: &TrainArgs, root: &Path) -> Result<ExitCode> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    let variant = config.variant()?;
    let dir = run_dir(&args.out, &config, root, "train");
    let data = prepare(&config)?;
    let train_config = variant.apply(&config.train);
    let trainer = Trainer::new(train_config.clone(), &data.split, &data.catalog)?;

    create_dir(&dir)?;
    let ckpt_path = dir.join(CHECKPOINT);
    let log_path = dir.join(EPOCH_LOG);
    let mut state = if args.resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.train_config != train_config {
            bail!(
                "checkpoint {} was written with a different training config",
                ckpt_path.display()
            );
        }
        ckpt.check_shapes(&train_config.model_config(
            data.split.user_count,
            data.split.item_count,
            data.catalog.attribute_count,
        ))?;
        truncate_log(&log_path, ckpt.state.epoch)?;
        log::info!("resuming after epoch {}", ckpt.state.epoch);
        ckpt.state
    } else {
        if args.resume {
            log::warn!("no checkpoint in {}; starting fresh", dir.display());
        }
        write_file(&log_path, "")?;
        trainer.init_state()?
    };
    write_resolved(&dir, &config)?;

    while !trainer.finished(&state) {
        if args.stop_after.is_some_and(|n| state.epoch >= n) {
            println!("stopped after epoch {}; resume with --resume", state.epoch);
            return Ok(ExitCode::SUCCESS);
        }
        let rec: EpochRecord = trainer.step_epoch(&mut state)?;
        append_line(&log_path, &serde_json::to_string(&rec)?)?;
        save_atomic(&ckpt_path, &train_config, &state)?;
        log::info!(
            "epoch {} loss {:.5} val HR@5 {}",
            rec.epoch,
            rec.loss.total,
            rec.val_hr5.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    // A resumed run that was already complete still needs its checkpoint.
    if !ckpt_path.exists() {
        save_atomic(&ckpt_path, &train_config, &state)?;
    }

    let mut report = evaluate(
        state.final_params(),
        &data.catalog,
        &data.split,
        SplitPart::Test,
        &[5, 10],
    )?;
    report.variant = variant.name().to_string();
    report.seed = train_config.seed;
    let table = write_report(&dir, "eval_test", &report)?;
    print!("{table}");
    println!(
        "{} epochs{}; outputs in {}",
        state.epoch,
        if state.stopped { " (early stop)" } else { "" },
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: &EvalArgs) -> Result<ExitCode> {
    let ckpt_dir = args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let config_path = args.config.clone().unwrap_or_else(|| ckpt_dir.join("config.toml"));
    let config = RunConfig::load(&config_path)?;
    let variant = config.variant()?;
    let data = prepare(&config)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    ckpt.check_shapes(&ckpt.train_config.model_config(
        data.split.user_count,
        data.split.item_count,
        data.catalog.attribute_count,
    ))?;
    if ckpt.train_config.dim != config.train.dim {
        bail!(
            "checkpoint dim {} differs from config dim {}",
            ckpt.train_config.dim,
            config.train.dim
        );
    }
    let part = split_part(args.part);
    let mut report = evaluate(ckpt.state.final_params(), &data.catalog, &data.split, part, &[5, 10])?;
    report.variant = variant.name().to_string();
    report.seed = ckpt.train_config.seed;

    let dir = args.out.clone().unwrap_or(ckpt_dir);
    create_dir(&dir)?;
    if !dir.join("config.toml").exists() {
        write_resolved(&dir, &config)?;
    }
    let stem = match part {
        SplitPart::Validation => "eval_validation",
        SplitPart::Test => "eval_test",
    };
    let table = write_report(&dir, stem, &report)?;
    print!("{table}");
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct AblationRecord<'a> {
    variant: &'a str,
    seed: u64,
    alignment: f64,
    epochs: usize,
    report: &'a EvalReport,
}

#[derive(Serialize)]
struct AblationSummary {
    #[serde(flatten)]
    row: m2vae::evaluation::AblationRow,
    alignment_mean: f64,
    alignment_std: f64,
}

pub fn ablate(args: &AblateArgs, root: &Path) -> Result<ExitCode> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(v) = &args.variants {
        config.ablation.variants = v.clone();
    }
    if let Some(s) = &args.seeds {
        config.ablation.seeds = s.clone();
    }
    let variants = config
        .ablation
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    if variants.is_empty() || config.ablation.seeds.is_empty() {
        bail!("ablation needs at least one variant and one seed");
    }
    let dir = run_dir(&args.out, &config, root, "ablate");
    let data = prepare(&config)?;
    create_dir(&dir)?;
    write_resolved(&dir, &config)?;

    let mut raw = String::new();
    let mut summaries = Vec::new();
    let mut candidates = 0;
    for v in &variants {
        log::info!("variant {v}");
        let runs = run_ablation(*v, &data.catalog, &data.split, &config.train, &config.ablation.seeds)?;
        for r in &runs {
            raw.push_str(&serde_json::to_string(&AblationRecord {
                variant: v.name(),
                seed: r.report.seed,
                alignment: r.alignment,
                epochs: r.epochs.len(),
                report: &r.report,
            })?);
            raw.push('\n');
            candidates = r.report.candidates;
        }
        let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
        let align: Vec<f64> = runs.iter().map(|r| r.alignment).collect();
        let (alignment_mean, alignment_std) = mean_std(&align);
        summaries.push(AblationSummary {
            row: summarize(v.name(), &reports),
            alignment_mean,
            alignment_std,
        });
    }
    let rows: Vec<_> = summaries.iter().map(|s| s.row.clone()).collect();
    let mut table = format_ablation_table(&rows);
    if candidates > 0 {
        let _ = writeln!(
            table,
            "random HR@5 = {:.4} over {candidates} cold candidates",
            (5.0 / candidates as f64).min(1.0)
        );
    }
    write_file(&dir.join("runs.jsonl"), raw)?;
    write_file(&dir.join("ablation.jsonl"), jsonl(&summaries)?)?;
    write_file(&dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SweepRow {
    parameter: String,
    value: f64,
    seed: u64,
    hr5: f64,
    ndcg5: f64,
    hr10: f64,
    ndcg10: f64,
    alignment: f64,
    epochs: usize,
}

pub fn sweep(args: &SweepArgs, root: &Path) -> Result<ExitCode> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(p) = &args.parameter {
        config.sweep.parameter = p.clone();
    }
    if let Some(g) = &args.grid {
        config.sweep.grid = g.clone();
    }
    if config.sweep.grid.is_empty() {
        bail!("sweep grid is empty");
    }
    let name = config.sweep.parameter.clone();
    let configs = config
        .sweep
        .grid
        .iter()
        .map(|&v| with_parameter(&config.train, &name, v))
        .collect::<Result<Vec<_>>>()?;
    let variant = config.variant()?;
    let dir = run_dir(&args.out, &config, root, "sweep");
    create_dir(&dir)?;
    write_resolved(&dir, &config)?;

    let mut rows = Vec::new();
    for (value, c) in config.sweep.grid.iter().zip(&configs) {
        log::info!("{name} = {value}");
        // Width changes alter the image projection, so data is prepared per value.
        let mut rc = config.clone();
        rc.train = c.clone();
        let data = prepare(&rc)?;
        let out = run_variant(variant, &data.catalog, &data.split, c, c.seed)?;
        let get = |v: Option<f64>| v.ok_or_else(|| anyhow!("missing metric"));
        rows.push(SweepRow {
            parameter: name.clone(),
            value: *value,
            seed: c.seed,
            hr5: get(out.report.hit_rate(5))?,
            ndcg5: get(out.report.ndcg(5))?,
            hr10: get(out.report.hit_rate(10))?,
            ndcg10: get(out.report.ndcg(10))?,
            alignment: out.alignment,
            epochs: out.epochs.len(),
        });
    }
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<14} {:>8} {:>8} {:>8} {:>8}",
        name, "HR@5", "NDCG@5", "HR@10", "NDCG@10"
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.value, r.hr5, r.ndcg5, r.hr10, r.ndcg10
        );
    }
    write_file(&dir.join("sweep.jsonl"), jsonl(&rows)?)?;
    write_file(&dir.join("sweep.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct VerifyFlags<'a> {
    draws: usize,
    seed: u64,
    cases: Option<&'a Path>,
    elbo_samples: usize,
}

pub fn verify(args: &VerifyArgs) -> Result<ExitCode> {
    let fixture: Option<Vec<FusionCase>> = match &args.cases {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let toy = ElboToy::default();
    let elbo = (args.elbo_samples > 0).then_some((&toy, args.elbo_samples));
    let report = verify_theory(args.draws, args.seed, fixture.as_deref(), elbo)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let flags = VerifyFlags {
            draws: args.draws,
            seed: args.seed,
            cases: args.cases.as_deref(),
            elbo_samples: args.elbo_samples,
        };
        write_file(&dir.join("config.toml"), toml::to_string(&flags)?)?;
        write_file(&dir.join("verify.txt"), &text)?;
        write_file(&dir.join("verify.jsonl"), jsonl(std::slice::from_ref(&report))?)?;
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let config = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let rc: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            rc.variant()?.apply(&rc.train)
        }
        None => TrainConfig::default(),
    };
    let opts = GradCheckOptions {
        corrupt: args.corrupt.clone().map(|t| (t, 1.1)),
        ..Default::default()
    };
    let report = full_model_check(&config, args.seed, &opts)?;
    if let Some(name) = &args.corrupt {
        if !report.tensors.iter().any(|t| &t.name == name) {
            let names: Vec<&str> = report.tensors.iter().map(|t| t.name.as_str()).collect();
            bail!("unknown tensor `{name}` (valid: {})", names.join(", "));
        }
    }
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<28} {:>12} {:>14} {:>14}",
        "tensor", "max rel err", "analytic", "numeric"
    );
    for t in &report.tensors {
        let _ = writeln!(
            text,
            "{:<28} {:>12.3e} {:>14.6e} {:>14.6e}",
            t.name, t.max_rel_error, t.analytic, t.numeric
        );
    }
    let worst = report.worst().ok_or_else(|| anyhow!("model has no parameters"))?;
    let passed = report.max_rel_error() < GRADCHECK_TOLERANCE;
    let _ = writeln!(text, "checked {} scalars, loss {:.6}", report.checked, report.loss);
    let _ = writeln!(
        text,
        "worst tensor {} ({:.3e}); {}",
        worst.name,
        worst.max_rel_error,
        if passed { "PASS" } else { "FAIL" }
    );
    print!("{text}");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_file(&dir.join("config.toml"), toml::to_string(&config)?)?;
        write_file(&dir.join("gradcheck.txt"), &text)?;
        write_file(&dir.join("gradcheck.jsonl"), jsonl(&report.tensors)?)?;
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
