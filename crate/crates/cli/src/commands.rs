use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cad_core::clr::RatioModel;
use cad_core::data::{ingest_files, IngestConfig};
use cad_core::density::{train_flow, AffineFlow, ConditionalGaussian, DensityModel};
use cad_core::embed::{similarity_matrix, table_to_embeddings, LearnedEncoder};
use cad_core::eval::{evaluate_generalization, evaluate_ratio_model, evaluate_with, similarity_rank_correlation};
use cad_core::io::{
    load_benchmark, load_json, save_benchmark, save_json, write_embeddings_csv, write_loss_trace,
    write_matrix_csv, write_text,
};
use cad_core::oracle::{
    auc_equivalence, base_optimality_trials, flow_checks, gradient_check, ratio_recovery,
    ratio_recovery_config,
};
use cad_core::pipeline::{train_clr, train_gaussian_baseline};
use cad_core::rng::seeded;
use cad_core::synth::{generate, ground_truth_overlap_matrix, SynthConfig};
use cad_core::{Benchmark, EvalReport};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{load_toml, ModelKind, TrainRun, RESOLVED_CONFIG};
use crate::failure::{OracleFailed, Usage};
use crate::{EvalArgs, IngestArgs, OracleKind, SynthArgs, TrainArgs, VerifyArgs};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const ENCODER: &str = "encoder.json";

/// A trained model plus the configuration that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainRun,
    pub model: TrainedModel,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrainedModel {
    Clr(RatioModel),
    Gaussian(ConditionalGaussian),
    Flow(AffineFlow),
}

impl TrainedModel {
    fn num_tasks(&self) -> usize {
        match self {
            TrainedModel::Clr(m) => m.num_tasks(),
            TrainedModel::Gaussian(m) => m.num_tasks(),
            TrainedModel::Flow(m) => m.num_tasks(),
        }
    }

    fn embeddings(&self) -> Option<&Array2<f64>> {
        match self {
            TrainedModel::Clr(m) => Some(&m.embeddings),
            TrainedModel::Gaussian(m) => Some(&m.embeddings),
            TrainedModel::Flow(_) => None,
        }
    }
}

fn write_resolved<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).context("serializing resolved configuration")?;
    write_text(&dir.join(RESOLVED_CONFIG), &text)?;
    Ok(())
}

pub fn synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => load_toml(path)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($field:ident <- $flag:expr),*) => { $(if let Some(v) = $flag { cfg.$field = v; })* };
    }
    set!(categories <- args.categories, k <- args.k, dim <- args.d, n_per_category <- args.n,
         center_scale <- args.center_scale, stddev <- args.stddev, test_fraction <- args.test_fraction,
         seed <- seed);
    cfg.validate()?;
    let b = generate(&cfg)?;
    save_benchmark(&b, &args.out)?;
    write_resolved(&args.out, &cfg)?;
    println!(
        "wrote {} tasks ({} training samples, {} test samples) to {}",
        b.num_tasks(),
        b.train.population_len(),
        b.test.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct IngestRecord<'a> {
    events: &'a Path,
    users: &'a Path,
    label: &'a str,
    min_exposures: usize,
    keep_fraction: f64,
    train_ratio: f64,
    split_seed: u64,
}

pub fn ingest(args: IngestArgs, seed: Option<u64>) -> Result<()> {
    let split_seed = args.split_seed.or(seed).unwrap_or(0);
    let cfg = IngestConfig {
        label_key: args.label.clone(),
        min_exposures: args.min_exposures,
        keep_fraction: args.keep_fraction,
        train_ratio: args.train_ratio,
    };
    let mut b = ingest_files(&args.events, &args.users, &cfg, &mut seeded(split_seed, 0))?;
    b.meta.insert("split_seed".into(), split_seed.to_string());
    save_benchmark(&b, &args.out)?;
    write_resolved(
        &args.out,
        &IngestRecord {
            events: &args.events,
            users: &args.users,
            label: &args.label,
            min_exposures: args.min_exposures,
            keep_fraction: args.keep_fraction,
            train_ratio: args.train_ratio,
            split_seed,
        },
    )?;
    println!("kept {} tasks; wrote {}", b.num_tasks(), args.out.display());
    Ok(())
}

fn resolve_train(args: &TrainArgs, seed: Option<u64>) -> Result<TrainRun> {
    let mut run: TrainRun = match &args.config {
        Some(path) => load_toml(path)?,
        None => TrainRun::default(),
    };
    if let Some(m) = args.model {
        if m != run.model {
            // Model-specific settings from the file belong to the old model.
            run.flow = None;
        }
        run.model = m;
    }
    if args.init.is_some() {
        run.init = args.init.clone();
    }
    if args.m0.is_some() {
        run.m0 = args.m0;
    }
    let t = &mut run.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if args.embed_dim.is_some() {
        t.embed_dim = args.embed_dim;
    }
    if let Some(p) = args.patience {
        t.patience = (p > 0).then_some(p);
    }
    if let Some(h) = &args.hidden {
        t.hidden = h.clone();
        if args.dropout.is_none() && t.dropout.len() != h.len() {
            return Err(Usage("--hidden changes the layer count; give --dropout as well".into()).into());
        }
    }
    if let Some(d) = &args.dropout {
        t.dropout = d.clone();
    }
    if let Some(s) = seed {
        t.seed = s;
    }
    run.resolve()
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let run = resolve_train(&args, seed)?;
    let b = load_benchmark(&args.benchmark)
        .with_context(|| format!("loading benchmark {}", args.benchmark.display()))?;
    let mut rng = seeded(run.train.seed, 0);
    let out = &args.out;
    let (model, trace) = match run.model {
        ModelKind::Clr => {
            let kind = run.init_kind()?.expect("resolved");
            let r = train_clr(&b, kind, &run.train, &mut rng)?;
            write_embeddings_csv(&out.join("init_embeddings.csv"), &r.init.table)?;
            if let Some(enc) = &r.init.encoder {
                save_json(&out.join(ENCODER), enc)?;
            }
            if let Some(pre) = &r.init.pre_trace {
                write_loss_trace(&out.join("pre_loss_trace.csv"), pre)?;
            }
            (TrainedModel::Clr(r.model), r.trace)
        }
        ModelKind::Gaussian => {
            let kind = run.init_kind()?.expect("resolved");
            let r = train_gaussian_baseline(&b, kind, &run.train, &mut rng)?;
            write_embeddings_csv(&out.join("init_embeddings.csv"), &r.init.table)?;
            if let Some(enc) = &r.init.encoder {
                save_json(&out.join(ENCODER), enc)?;
            }
            (TrainedModel::Gaussian(r.model), r.trace)
        }
        ModelKind::Flow => {
            let flow_cfg = run.flow.clone().expect("resolved");
            let (m, trace) = train_flow(&b.train, &flow_cfg, &run.train, &mut rng)?;
            (TrainedModel::Flow(m), trace)
        }
    };
    if let Some(table) = model.embeddings() {
        write_embeddings_csv(&out.join("embeddings.csv"), table)?;
    }
    write_loss_trace(&out.join("loss_trace.csv"), &trace)?;
    write_text(&out.join(RESOLVED_CONFIG), &run.to_toml())?;
    save_json(&out.join(CHECKPOINT), &Checkpoint { config: run.clone(), model })?;
    let best = trace.best_val_loss().unwrap_or(f64::NAN);
    println!(
        "trained {} on {} tasks: best validation loss {best:.6} at epoch {}; wrote {}",
        run.label(),
        b.num_tasks(),
        trace.best_epoch,
        out.display()
    );
    Ok(())
}

fn checkpoint_dir(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(CHECKPOINT), path.to_path_buf())
    } else {
        let dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (path.to_path_buf(), dir)
    }
}

fn load_encoder(dir: &Path) -> Result<Option<LearnedEncoder>> {
    let path = dir.join(ENCODER);
    if path.exists() {
        Ok(Some(load_json(&path)?))
    } else {
        Ok(None)
    }
}

fn benchmark_keys(prefix: &str, b: &Benchmark, config: &mut BTreeMap<String, String>) {
    for (k, v) in &b.meta {
        config.insert(format!("{prefix}.{k}"), v.clone());
    }
}

fn write_report(out: &Path, report: &EvalReport, seed: u64) -> Result<()> {
    let stem = report.file_stem(seed);
    write_text(&out.join(format!("{stem}.json")), &(report.to_json()? + "\n"))?;
    write_text(&out.join(format!("{stem}.txt")), &format!("{report}\n"))?;
    Ok(())
}

pub fn eval(args: EvalArgs, seed: Option<u64>) -> Result<()> {
    let (ckpt_path, ckpt_dir) = checkpoint_dir(&args.checkpoint);
    let ckpt: Checkpoint = load_json(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let b = load_benchmark(&args.benchmark)
        .with_context(|| format!("loading benchmark {}", args.benchmark.display()))?;
    let seed = seed.unwrap_or(ckpt.config.train.seed);
    let encoder = load_encoder(&ckpt_dir)?;

    let mut config = ckpt.config.flatten();
    benchmark_keys("benchmark", &b, &mut config);

    let (report, target) = if args.generalize {
        let test_path = args.test_benchmark.as_ref().expect("clap enforces");
        let test = load_benchmark(test_path)
            .with_context(|| format!("loading benchmark {}", test_path.display()))?;
        let TrainedModel::Clr(model) = &ckpt.model else {
            return Err(Usage("--generalize needs a clr checkpoint".into()).into());
        };
        let Some(enc) = &encoder else {
            return Err(Usage("--generalize needs a checkpoint trained with --init learned".into()).into());
        };
        benchmark_keys("test_benchmark", &test, &mut config);
        let train_k = b.meta.get("k").cloned().unwrap_or_else(|| "?".into());
        let test_k = test.meta.get("k").cloned().unwrap_or_else(|| "?".into());
        config.insert("generalization".into(), format!("k={train_k}->k={test_k}"));
        let name = args.experiment.clone().unwrap_or_else(|| format!("{}_generalize", ckpt.config.label()));
        (evaluate_generalization(enc, model, &test, &name, config)?, test)
    } else {
        if ckpt.model.num_tasks() != b.num_tasks() {
            return Err(cad_core::Error::Shape {
                context: "checkpoint tasks vs benchmark tasks",
                expected: b.num_tasks(),
                found: ckpt.model.num_tasks(),
            }
            .into());
        }
        let name = args.experiment.clone().unwrap_or_else(|| ckpt.config.label());
        let report = match &ckpt.model {
            TrainedModel::Clr(m) => evaluate_ratio_model(m, &b, &name, config)?,
            TrainedModel::Gaussian(m) => {
                let dm = DensityModel::Gaussian(m.clone());
                evaluate_with(&b, &name, config, |t, xs| dm.score_many(t, xs))?
            }
            TrainedModel::Flow(m) => {
                let dm = DensityModel::Flow(m.clone());
                evaluate_with(&b, &name, config, |t, xs| dm.score_many(t, xs))?
            }
        };
        (report, b)
    };
    write_report(&args.out, &report, seed)?;
    println!("{report}");

    if args.emit_similarity {
        let table = match (&encoder, ckpt.model.embeddings()) {
            (Some(enc), _) => enc.encode_collection(&target.train)?,
            (None, Some(t)) if !args.generalize => t.clone(),
            _ => return Err(Usage("--emit-similarity needs task embeddings".into()).into()),
        };
        let sim = similarity_matrix(&table_to_embeddings(&table))?;
        write_matrix_csv(&args.out.join("similarity.csv"), &sim)?;
        if target.ground_truth_active.is_some() {
            let truth = ground_truth_overlap_matrix(&target)?;
            write_matrix_csv(&args.out.join("overlap.csv"), &truth)?;
            match similarity_rank_correlation(&sim, &truth) {
                Ok(rho) => println!("similarity vs ground-truth overlap: spearman {rho:.4}"),
                Err(e) => println!("similarity vs ground-truth overlap: {e}"),
            }
        }
    }
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct VerifyReport {
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    prop1: Option<cad_core::oracle::BaseOptimalityTrials>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gradcheck: Option<cad_core::oracle::GradCheckReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratio: Option<cad_core::oracle::RatioRecoveryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow: Option<cad_core::oracle::FlowCheckReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    auc: Option<cad_core::oracle::AucEquivalenceReport>,
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn verify(args: VerifyArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let wants = |k: OracleKind| args.oracle == OracleKind::All || args.oracle == k;
    let mut report = VerifyReport {
        seed,
        ..VerifyReport::default()
    };
    let mut failed = Vec::new();

    if wants(OracleKind::Prop1) {
        let trials = args.trials.unwrap_or(50);
        let r = base_optimality_trials(trials, 2, 3, 200, &mut seeded(seed, 1))?;
        println!(
            "{} prop1: {}/{} instances, worst mixture-minus-grid gap {:.3e}",
            verdict(r.passed),
            r.trials - r.failures,
            r.trials,
            r.worst_gap
        );
        if !r.passed {
            failed.push("prop1".to_owned());
        }
        report.prop1 = Some(r);
    }
    if wants(OracleKind::Gradcheck) {
        let nets = args.trials.unwrap_or(20);
        let r = gradient_check(nets, &mut seeded(seed, 2))?;
        println!(
            "{} gradcheck: {} nets, {} entries, max relative error {:.3e}",
            verdict(r.passed),
            r.nets,
            r.entries_checked,
            r.max_relative_error
        );
        if !r.passed {
            failed.push("gradcheck".to_owned());
        }
        report.gradcheck = Some(r);
    }
    if wants(OracleKind::Auc) {
        let trials = args.trials.unwrap_or(1000);
        let r = auc_equivalence(trials, &mut seeded(seed, 3))?;
        println!(
            "{} auc: {} score sets, {} mismatches, hand case {}",
            verdict(r.passed),
            r.trials,
            r.mismatches,
            r.hand_case
        );
        if !r.passed {
            failed.push("auc".to_owned());
        }
        report.auc = Some(r);
    }
    if wants(OracleKind::Flow) {
        let r = flow_checks(&mut seeded(seed, 4))?;
        println!(
            "{} flow: round trip {:.3e}, masked jacobian {:.3e}, density integral {:.5}",
            verdict(r.passed),
            r.round_trip_error,
            r.jacobian_leak,
            r.integral
        );
        if !r.passed {
            failed.push("flow".to_owned());
        }
        report.flow = Some(r);
    }
    if wants(OracleKind::Ratio) {
        let r = ratio_recovery(args.pairs, &ratio_recovery_config(), &mut seeded(seed, 5))?;
        println!(
            "{} ratio: max grid error {:.4}, identical-distribution control {:.4}",
            verdict(r.passed),
            r.max_error,
            r.control_max_abs
        );
        if !r.passed {
            failed.push("ratio".to_owned());
        }
        report.ratio = Some(r);
    }

    if let Some(out) = &args.out {
        save_json(&out.join("verify_report.json"), &report)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(OracleFailed(failed).into())
    }
}
