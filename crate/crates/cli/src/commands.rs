//! One function per subcommand.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use serde_json::json;

use crate::config::{ExperimentConfig, ModelSection, Scale};
use crate::{NumericalFailure, PredictorKind, Split};
use gazetr::ablation::run_ablation;
use gazetr::checkpoint;
use gazetr::data::{evaluate, generate_synthetic, read_dataset, write_dataset, ConstantPredictor, Dataset, DatasetManifest, GeometricDecoder, LabelOracle, Predictor};
use gazetr::gaze::mean_predictor_baseline;
use gazetr::gradcheck::{run_suite, SuiteOptions};
use gazetr::models::{build_variant, ModelVariant, VariantTag};
use gazetr::train::{train_with, TrainOptions};

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.data_dir()?;
    let g = &cfg.data.generator;
    let data = generate_synthetic(g)?;
    let manifest = DatasetManifest::for_synthetic(g);
    write_dataset(dir, &data, &manifest, cfg.overwrite)?;
    cfg.persist(dir)?;
    println!(
        "wrote {} samples of {:?} from {} subjects to {} (train subjects {:?}, test subjects {:?})",
        data.len(),
        manifest.image_shape,
        g.subjects,
        dir.display(),
        manifest.splits.train,
        manifest.splits.test
    );
    Ok(())
}

fn load_splits(cfg: &ExperimentConfig, variant: &ModelVariant) -> Result<(Dataset, Dataset, DatasetManifest)> {
    let dir = cfg.data_dir()?;
    let (data, manifest) = read_dataset(dir)?;
    let size = variant.image_size();
    let want = [variant.in_channels(), size, size];
    if manifest.image_shape != want {
        bail!("dataset images are {:?} but the {} model expects {:?}", manifest.image_shape, variant.tag(), want);
    }
    let (train, test) = (manifest.train_split(&data), manifest.test_split(&data));
    if train.is_empty() {
        bail!("dataset {} has no training samples", dir.display());
    }
    Ok((train, test, manifest))
}

pub fn train(cfg: &ExperimentConfig, checkpoint_every: Option<usize>) -> Result<()> {
    let variant = cfg.model.resolve()?;
    let (train_set, test, _) = load_splits(cfg, &variant)?;
    let out = &cfg.output;
    if out.join("final").join(checkpoint::MANIFEST_FILE).exists() && !cfg.overwrite {
        bail!("{} already holds a trained model; pass --overwrite to replace it", out.display());
    }
    let mut model = build_variant(&variant, cfg.model.seed)?;
    if let Some(p) = &cfg.pretrain {
        checkpoint::load_into(&mut model, p).with_context(|| format!("loading pre-trained weights from {}", p.display()))?;
    }
    let initial = if test.is_empty() { None } else { Some(evaluate(&model, &test)?) };
    cfg.persist(out)?;
    println!(
        "training {} ({} parameters) on {} samples for {} epochs{}",
        variant.tag(),
        model.parameter_count(),
        train_set.len(),
        cfg.train.epochs,
        cfg.pretrain.as_ref().map(|p| format!(" from {}", p.display())).unwrap_or_default()
    );
    let epochs = cfg.train.epochs;
    let mut log = |r: &gazetr::train::EpochRecord| {
        println!("epoch {:>3}/{epochs} lr {:.3e} loss {:.5} ({:.1}s)", r.epoch + 1, r.lr, r.mean_loss, r.seconds);
    };
    let opts = TrainOptions {
        checkpoint_dir: Some(out.clone()),
        checkpoint_every,
        on_epoch: Some(&mut log),
    };
    let report = train_with(&mut model, &train_set, &cfg.train, opts)?;
    report.write_jsonl(&out.join("report.jsonl"))?;

    let baseline = mean_predictor_baseline(train_set.labels())?;
    let (test_error, baseline_error) = if test.is_empty() {
        (None, None)
    } else {
        (Some(evaluate(&model, &test)?), Some(evaluate(&ConstantPredictor(baseline), &test)?))
    };
    let summary = json!({
        "variant": variant.tag().name(),
        "parameters": model.parameter_count(),
        "train_samples": train_set.len(),
        "test_samples": test.len(),
        "steps": report.steps,
        "initial_test_error_deg": initial,
        "test_error_deg": test_error,
        "mean_baseline_error_deg": baseline_error,
        "pretrain": cfg.pretrain,
        "checkpoint": report.final_checkpoint,
    });
    write_json(&out.join("summary.json"), &summary)?;
    match (test_error, baseline_error) {
        (Some(e), Some(b)) => println!("held-out error {e:.3} deg (mean-predictor baseline {b:.3} deg)"),
        _ => println!("no held-out subjects; skipped evaluation"),
    }
    println!("checkpoint written to {}", out.join("final").display());
    Ok(())
}

pub fn eval(ckpt: Option<&Path>, data_dir: &Path, split: Split, kind: PredictorKind, json_out: Option<&Path>) -> Result<()> {
    let (data, manifest) = read_dataset(data_dir)?;
    let subset = match split {
        Split::Train => manifest.train_split(&data),
        Split::Test => manifest.test_split(&data),
        Split::All => data.clone(),
    };
    if subset.is_empty() {
        bail!("the {split:?} split of {} is empty", data_dir.display());
    }
    let model = match (kind, ckpt) {
        (PredictorKind::Model, Some(p)) => Some(checkpoint::load(p)?),
        (PredictorKind::Model, None) => bail!("--predictor model needs --checkpoint"),
        _ => None,
    };
    let predictor: Box<dyn Predictor> = match kind {
        PredictorKind::Model => {
            let m = model.clone().expect("loaded above");
            let size = m.variant.image_size();
            if manifest.image_shape != [m.variant.in_channels(), size, size] {
                bail!("dataset images are {:?} but the checkpoint expects {size}-pixel images", manifest.image_shape);
            }
            Box::new(m)
        }
        PredictorKind::Mean => Box::new(ConstantPredictor(mean_predictor_baseline(manifest.train_split(&data).labels())?)),
        PredictorKind::Decoder => Box::new(GeometricDecoder::new(manifest.generator.clone())),
        PredictorKind::Oracle => Box::new(LabelOracle),
    };
    let err = evaluate(predictor.as_ref(), &subset)?;
    let variant = model.as_ref().map(|m| m.tag().name());
    let name = variant.unwrap_or(match kind {
        PredictorKind::Mean => "mean",
        PredictorKind::Decoder => "decoder",
        _ => "oracle",
    });
    println!("{name} on {} {} samples: {err:.4} deg", subset.len(), format!("{split:?}").to_lowercase());
    let value = json!({
        "predictor": format!("{kind:?}").to_lowercase(),
        "variant": variant,
        "checkpoint": ckpt,
        "split": format!("{split:?}").to_lowercase(),
        "samples": subset.len(),
        "mean_angular_error_deg": err,
    });
    if let Some(p) = json_out {
        write_json(p, &value)?;
    }
    Ok(())
}

pub fn audit(tag: Option<VariantTag>, scale: Scale, image_size: Option<usize>, json_out: Option<&Path>) -> Result<()> {
    let tags = tag.map(|t| vec![t]).unwrap_or_else(|| VariantTag::ALL.to_vec());
    let section = ModelSection {
        scale,
        image_size,
        ..ModelSection::default()
    };
    let mut rows = Vec::new();
    for t in tags {
        let variant = section.resolve_as(t)?;
        let model = build_variant(&variant, 0)?;
        let modules = model.audit();
        let total = model.parameter_count();
        println!("{t} ({scale:?}, {} px)", variant.image_size());
        for (m, n) in &modules {
            println!("  {m:<10} {n:>12}");
        }
        println!("  {:<10} {total:>12}  ({:.3} M)", "total", total as f64 / 1e6);
        let modules: serde_json::Map<String, serde_json::Value> = modules.into_iter().map(|(m, n)| (m, json!(n))).collect();
        rows.push(json!({
            "variant": t.name(),
            "scale": format!("{scale:?}").to_lowercase(),
            "image_size": variant.image_size(),
            "modules": modules,
            "total": total,
        }));
    }
    if let Some(p) = json_out {
        write_json(p, &json!(rows))?;
    }
    Ok(())
}

pub fn gradcheck(scope: Option<String>, seed: u64, corrupt: bool, json_out: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let reports = run_suite(&SuiteOptions { scope, seed, corrupt })?;
    let mut failed = 0;
    for r in &reports {
        if !r.passed() {
            failed += 1;
        }
        println!(
            "{} {:<24} {:.3e} (tolerance {:.0e}, {} elements)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.elements
        );
    }
    println!("{} checks, {failed} failed, {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    if let Some(p) = json_out {
        let rows: Vec<_> = reports
            .iter()
            .map(|r| json!({"name": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance, "elements": r.elements, "passed": r.passed()}))
            .collect();
        write_json(p, &json!(rows))?;
    }
    if failed > 0 {
        return Err(NumericalFailure(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig, backbone: bool) -> Result<()> {
    let out = &cfg.output;
    let path = out.join("ablation.json");
    if path.exists() && !cfg.overwrite {
        bail!("{} already exists; pass --overwrite to replace it", path.display());
    }
    let hybrid = cfg.model.resolve_as(VariantTag::Hybrid)?;
    let shallow = cfg.model.resolve_as(VariantTag::ShallowHybrid)?;
    let conv = ModelSection {
        transformer: None,
        ..cfg.model.clone()
    }
    .resolve_as(VariantTag::ConvBaseline)?;
    let (train_set, test, _) = load_splits(cfg, &hybrid)?;
    if test.is_empty() {
        bail!("ablation needs held-out subjects in the dataset");
    }
    cfg.persist(out)?;
    let report = run_ablation(&hybrid, &shallow, backbone.then_some(&conv), cfg.model.seed, &train_set, &test, &cfg.train)?;
    write_json(&path, &serde_json::to_value(&report)?)?;
    print!("{}", report.summary());
    println!("report written to {}", path.display());
    Ok(())
}
