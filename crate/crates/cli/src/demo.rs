//! End-to-end run on a generated keyword corpus with the mock backend.

use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use scbm_core::analysis::{permutation_importance, subset_sweep};
use scbm_core::dataset::Split;
use scbm_core::encoder::EncodeOptions;
use scbm_core::explain;
use scbm_core::model::Checkpoint;
use scbm_core::prompting::resolve_template;
use scbm_core::synthetic::keyword_corpus;
use scbm_core::training::{evaluate, train, TrainingConfig, TrainingSet};
use serde_json::json;

use crate::commands::{encode_to, load_matrix, prediction_lines, row_labels, split_rows, write_global, write_json};
use crate::manifest::RunManifest;

const SWEEP_SIZES: [usize; 5] = [1, 2, 5, 10, 30];
const SWEEP_TRIALS: usize = 5;
const TOP_CONFIDENT: usize = 5;

pub fn run(seed: u64, samples: usize, out: &Path) -> anyhow::Result<()> {
    let start = Instant::now();
    let corpus = keyword_corpus(samples, seed);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let dataset_path = out.join("dataset.jsonl");
    scbm_core::container::atomic_write(&dataset_path, corpus.dataset.to_jsonl().as_bytes())?;
    let lexicon_path = out.join("lexicon.txt");
    scbm_core::container::atomic_write(&lexicon_path, corpus.lexicon.to_file_string().as_bytes())?;
    let rules_path = out.join("rules.json");
    write_json(&rules_path, &corpus.rules)?;

    let template = resolve_template("plain_text")?;
    let backend = corpus.backend();
    let matrix_path = out.join("matrix.scbm");
    encode_to(
        &corpus.dataset,
        &corpus.lexicon,
        &template,
        &backend,
        json!({"kind": "mock", "noise": corpus.noise, "noise_seed": corpus.noise_seed}),
        &out.join("cache"),
        &EncodeOptions::default(),
        &matrix_path,
    )?;
    let matrix = load_matrix(&matrix_path)?;

    let set = |split| -> anyhow::Result<(TrainingSet, Vec<String>)> {
        let m = split_rows(&matrix, &corpus.dataset, split)?;
        Ok((
            TrainingSet::from_matrix(&m, row_labels(&m, &corpus.dataset)?),
            m.sample_ids().to_vec(),
        ))
    };
    let (train_set, _) = set(Split::Train)?;
    let (val_set, _) = set(Split::Validation)?;
    let (test_set, test_ids) = set(Split::Test)?;
    let labels = corpus.dataset.label_set().labels().to_vec();
    let n = labels.len();
    let adjectives = matrix.adjectives().to_vec();

    let config = TrainingConfig {
        seed,
        ..TrainingConfig::default()
    };
    let mut manifest = RunManifest::new(
        "demo",
        json!({
            "samples": samples,
            "training": config,
            "non_paper_choices": config.non_paper_choices(false),
            "sweep_sizes": SWEEP_SIZES,
            "sweep_trials": SWEEP_TRIALS,
        }),
    );
    manifest
        .input("dataset", corpus.dataset.fingerprint())
        .input("lexicon", corpus.lexicon.fingerprint());
    manifest
        .seed("corpus", seed)
        .seed("training", seed)
        .seed("permutation", seed)
        .seed("sweep", seed);
    let manifest_hash = manifest.hash();

    let outcome = train(&train_set, &val_set, n, &config)?;
    let params = outcome.params;
    let test_f1 = evaluate(&params, &test_set, n)?;

    let mut ckpt = Checkpoint::new(
        params.clone(),
        seed,
        matrix.lexicon_fingerprint(),
        matrix.template_fingerprint(),
        labels.clone(),
        adjectives.clone(),
        config.lambda,
    );
    ckpt.meta.manifest = Some(manifest_hash);
    let ckpt_path = out.join("model.ckpt");
    ckpt.save(&ckpt_path)?;
    let log_path = out.join("training_log.json");
    write_json(&log_path, &outcome.log)?;

    let global_path = out.join("global_heatmap.csv");
    let local_path = out.join("local_heatmap.csv");
    let overlap = write_global(
        &params,
        &test_set,
        &test_ids,
        &adjectives,
        &labels,
        false,
        &global_path,
        Some((TOP_CONFIDENT, &local_path)),
    )?;

    // One local explanation for the first test sample of each class.
    let mut explanations = Vec::new();
    for class in 0..n {
        if let Some(i) = test_set.labels.iter().position(|&l| l == class) {
            explanations.push(explain::explain_local(
                &params,
                &test_set.inputs[i],
                None,
                &adjectives,
                &labels,
                &test_ids[i],
                5,
            )?);
        }
    }
    let explanations_path = out.join("explanations.json");
    write_json(&explanations_path, &explanations)?;

    let perm = permutation_importance(&params, &test_set, &adjectives, n, 10, seed)?;
    let perm_path = out.join("permutation.json");
    write_json(&perm_path, &perm)?;

    let sweep = subset_sweep(
        &train_set,
        &val_set,
        &test_set,
        n,
        &SWEEP_SIZES,
        SWEEP_TRIALS,
        &config,
        seed,
    )?;
    let sweep_path = out.join("sweep.json");
    write_json(&sweep_path, &sweep)?;
    let sweep_csv = out.join("sweep.csv");
    scbm_core::container::atomic_write(&sweep_csv, sweep.to_csv().as_bytes())?;

    let test_matrix = split_rows(&matrix, &corpus.dataset, Split::Test)?;
    let predictions_path = out.join("predictions.jsonl");
    let mut body = prediction_lines(&ckpt, &test_matrix, None, 5)?.join("\n");
    body.push('\n');
    scbm_core::container::atomic_write(&predictions_path, body.as_bytes())?;

    let ranked: Vec<_> = perm
        .ranked()
        .into_iter()
        .take(5)
        .map(|a| json!({"adjective": a.adjective, "mean_delta": a.mean_delta}))
        .collect();
    let decisive: Vec<_> = corpus
        .decisive
        .iter()
        .map(|(label, adj)| {
            let delta = perm
                .per_adjective
                .iter()
                .find(|a| &a.adjective == adj)
                .map(|a| a.mean_delta);
            json!({"label": label, "adjective": adj, "mean_delta": delta})
        })
        .collect();
    let summary = json!({
        "seed": seed,
        "samples": samples,
        "adjectives": adjectives.len(),
        "train_samples": train_set.len(),
        "val_samples": val_set.len(),
        "test_samples": test_set.len(),
        "best_epoch": outcome.log.best_epoch,
        "val_macro_f1": outcome.log.best_val_macro_f1,
        "test_macro_f1": test_f1,
        "overlap_statistic": overlap,
        "permutation_top": ranked,
        "decisive": decisive,
    });
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;

    for p in [
        &dataset_path,
        &lexicon_path,
        &rules_path,
        &matrix_path,
        &ckpt_path,
        &log_path,
        &global_path,
        &local_path,
        &explanations_path,
        &perm_path,
        &sweep_path,
        &sweep_csv,
        &predictions_path,
        &summary_path,
    ] {
        manifest.output(p)?;
    }
    manifest.write(&out.join("manifest.json"))?;

    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "demo corpus: {samples} samples, {} adjectives, seed {seed}",
        adjectives.len()
    );
    println!(
        "best epoch {}, val macro-F1 {:.4}",
        outcome.log.best_epoch, outcome.log.best_val_macro_f1
    );
    println!(
        "test macro-F1 {test_f1:.4} (target >= 0.95): {}",
        if test_f1 >= 0.95 { "pass" } else { "FAIL" }
    );
    for d in &decisive {
        println!(
            "permuting {}: mean delta F1 {:+.4}",
            d["adjective"].as_str().unwrap_or("?"),
            d["mean_delta"].as_f64().unwrap_or(f64::NAN)
        );
    }
    println!("elapsed {elapsed:.1}s; artifacts in {}", out.display());
    Ok(())
}
