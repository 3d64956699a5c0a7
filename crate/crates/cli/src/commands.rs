use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};
use scbm_core::analysis::{permutation_importance, subset_sweep};
use scbm_core::dataset::{id_index, load_dataset, stratified_holdout, stratified_kfold, Dataset, Split, TextSample};
use scbm_core::encoder::{self, ConceptMatrix, EncodeOptions};
use scbm_core::explain::{self, HeatmapData};
use scbm_core::gateway::{Backend, HttpBackend, HttpConfig, KeywordRule, MockBackend, RetryPolicy};
use scbm_core::lexicon::{load_lexicon, Adjective, Lexicon};
use scbm_core::model::{Checkpoint, EmbeddingTable, ModelParams};
use scbm_core::prompting::{builtin_templates, persona, resolve_template, ChatFormat, PromptTemplate};
use scbm_core::training::{evaluate, train_repeats, TrainingConfig, TrainingSet};
use serde_json::json;

use crate::config::{self, FileConfig};
use crate::manifest::RunManifest;
use crate::{EncodeArgs, PredictArgs, PromptStyle, TrainArgs, TrainingOverrides};

/// `<path>.<suffix>` next to an output file.
pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    scbm_core::container::atomic_write(path, &bytes)?;
    Ok(())
}

fn parse_chat(s: &str) -> anyhow::Result<ChatFormat> {
    Ok(match s {
        "messages" => ChatFormat::Messages,
        "plain" => ChatFormat::Plain,
        "llama2" => ChatFormat::Llama2,
        "llama3" => ChatFormat::Llama3,
        other => bail!("unknown chat format {other:?} (expected messages, plain, llama2 or llama3)"),
    })
}

fn styled_template(name: &str, style: &PromptStyle) -> anyhow::Result<PromptTemplate> {
    let mut t = resolve_template(name).with_context(|| format!("template {name:?}"))?;
    if let Some(id) = style.persona {
        let p = persona(id).with_context(|| format!("persona must be 1-9, got {id}"))?;
        t = t.with_persona(p);
    }
    if let Some(c) = &style.chat {
        t = t.with_chat(parse_chat(c)?);
    }
    Ok(t.with_gloss(style.gloss))
}

fn lexicon_for(path: Option<&Path>, lang: &str) -> anyhow::Result<Lexicon> {
    match path {
        Some(p) => Ok(load_lexicon(p, lang)?),
        None => Lexicon::builtin(lang).with_context(|| format!("no built-in lexicon for language {lang:?}")),
    }
}

pub(crate) fn load_matrix(path: &Path) -> anyhow::Result<ConceptMatrix> {
    ConceptMatrix::load(path).with_context(|| format!("loading matrix {}", path.display()))
}

fn load_labels(path: &Path) -> anyhow::Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading labels {}", path.display()))
}

/// Class index of every matrix row, looked up by sample id.
pub(crate) fn row_labels(matrix: &ConceptMatrix, dataset: &Dataset) -> anyhow::Result<Vec<usize>> {
    let index = id_index(dataset);
    let labels = dataset.label_indices();
    matrix
        .sample_ids()
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| labels[i])
                .with_context(|| format!("sample {id:?} is not in the label dataset"))
        })
        .collect()
}

fn embeddings_for(table: &EmbeddingTable, ids: &[String]) -> anyhow::Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|id| table.get(id).with_context(|| format!("no embedding for sample {id:?}")))
        .collect()
}

fn training_set(
    matrix: &ConceptMatrix,
    dataset: &Dataset,
    embeddings: Option<&EmbeddingTable>,
) -> anyhow::Result<TrainingSet> {
    let set = TrainingSet::from_matrix(matrix, row_labels(matrix, dataset)?);
    Ok(match embeddings {
        Some(t) => set.with_embeddings(embeddings_for(t, matrix.sample_ids())?),
        None => set,
    })
}

pub(crate) fn training_config(o: &TrainingOverrides) -> anyhow::Result<TrainingConfig> {
    let mut c = FileConfig::load(o.config.as_deref())?.training;
    if let Some(v) = o.lambda {
        c.lambda = v;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.epochs {
        c.epochs = v;
    }
    if let Some(v) = o.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = o.patience {
        c.patience = v;
    }
    if let Some(v) = o.hidden {
        c.hidden = v;
    }
    c.validate()?;
    Ok(c)
}

/// A checkpoint together with the matrix it is applied to, after checking
/// that both come from the same lexicon and template.
fn load_model(checkpoint: &Path, matrix: &Path) -> anyhow::Result<(Checkpoint, ConceptMatrix)> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let m = load_matrix(matrix)?;
    if ckpt.meta.lexicon_fingerprint != m.lexicon_fingerprint()
        || ckpt.meta.template_fingerprint != m.template_fingerprint()
        || ckpt.meta.adjectives != m.adjectives()
    {
        bail!(
            "{} was encoded with a different lexicon or template than {} was trained on",
            matrix.display(),
            checkpoint.display()
        );
    }
    Ok((ckpt, m))
}

fn model_embeddings(ckpt: &Checkpoint, path: Option<&Path>) -> anyhow::Result<Option<EmbeddingTable>> {
    match (ckpt.meta.dims.embedding, path) {
        (None, None) => Ok(None),
        (None, Some(_)) => bail!("checkpoint has no fusion layer; drop --embeddings"),
        (Some(_), None) => bail!("fused checkpoint needs --embeddings"),
        (Some(d), Some(p)) => {
            let t = EmbeddingTable::load(p).with_context(|| format!("loading embeddings {}", p.display()))?;
            if t.dim() != d {
                bail!("embedding width {} differs from the checkpoint's {d}", t.dim());
            }
            Ok(Some(t))
        }
    }
}

pub fn lexicon_validate(path: &Path, lang: &str) -> anyhow::Result<()> {
    let lex = load_lexicon(path, lang)?;
    let glossed = lex.adjectives().iter().filter(|a| a.gloss.is_some()).count();
    println!("adjectives:  {}", lex.len());
    println!("with gloss:  {glossed}");
    println!("fingerprint: {}", lex.fingerprint());
    Ok(())
}

pub fn lexicon_export(lang: &str, out: &Path) -> anyhow::Result<()> {
    let lex = Lexicon::builtin(lang).with_context(|| format!("no built-in lexicon for language {lang:?}"))?;
    ensure_parent(out)?;
    scbm_core::container::atomic_write(out, lex.to_file_string().as_bytes())?;
    println!("wrote {} adjectives to {}", lex.len(), out.display());
    Ok(())
}

pub fn data_inspect(path: &Path, folds: Option<usize>, seed: u64) -> anyhow::Result<()> {
    let ds = load_labels(path)?;
    println!("samples:     {}", ds.len());
    println!("context:     {}", if ds.has_context() { "yes" } else { "no" });
    println!("fingerprint: {}", ds.fingerprint());
    println!("labels:      {}", ds.label_set().labels().join(", "));
    let counts = ds.counts();
    for split in [Split::Train, Split::Validation, Split::Test, Split::Unassigned] {
        let row: Vec<String> = ds
            .label_set()
            .labels()
            .iter()
            .map(|l| format!("{l}={}", counts.get(&(split, l.clone())).copied().unwrap_or(0)))
            .collect();
        let total: usize = counts.iter().filter(|((s, _), _)| *s == split).map(|(_, c)| c).sum();
        if total > 0 {
            println!("{:<11}  {total:>6}  {}", split.as_str(), row.join(" "));
        }
    }
    if let Some(k) = folds {
        let f = stratified_kfold(&ds, k, seed)?;
        let sizes: Vec<String> = f.iter().map(|(_, test)| test.len().to_string()).collect();
        println!("{k}-fold test sizes (seed {seed}): {}", sizes.join(" "));
    }
    Ok(())
}

pub fn prompt_list() -> anyhow::Result<()> {
    for (name, t) in builtin_templates() {
        println!(
            "{name:<18} lang={} context={} fingerprint={}",
            t.language(),
            if t.expects_context() { "yes" } else { "no" },
            &t.fingerprint()[..12]
        );
    }
    println!();
    for id in 1..=9 {
        if let Some(p) = persona(id) {
            println!("persona {id}: {p}");
        }
    }
    Ok(())
}

pub fn prompt_render(
    template: &str,
    style: &PromptStyle,
    adjective: &str,
    text: &str,
    context: Option<&str>,
) -> anyhow::Result<()> {
    let t = styled_template(template, style)?;
    let adj = Adjective {
        index: 0,
        surface: adjective.to_string(),
        gloss: None,
    };
    let sample = TextSample {
        id: "cli".into(),
        text: text.to_string(),
        context: context.map(str::to_string),
        label: String::new(),
        split: Split::Unassigned,
    };
    let r = t.render(&adj, &sample)?;
    println!("chat:   {}", r.chat.as_str());
    println!("system: {}", r.system);
    println!("user:   {}", r.user);
    println!("--- prefix ---\n{}", r.prefix);
    println!("--- suffix ---\n{}", r.suffix);
    Ok(())
}

fn make_backend(args: &crate::BackendArgs, file: &FileConfig) -> anyhow::Result<(Box<dyn Backend>, serde_json::Value)> {
    let b = &file.backend;
    let kind = args
        .backend
        .clone()
        .or_else(|| b.kind.clone())
        .unwrap_or_else(|| "http".into());
    match kind.as_str() {
        "mock" => {
            let path = args
                .rules
                .clone()
                .or_else(|| b.rules.clone())
                .context("the mock backend needs --rules")?;
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let rules: Vec<KeywordRule> =
                serde_json::from_str(&text).with_context(|| format!("parsing rules {}", path.display()))?;
            let noise = b.noise.unwrap_or(0.0);
            let noise_seed = b.noise_seed.unwrap_or(0);
            let desc = json!({"kind": "mock", "rules": rules, "noise": noise, "noise_seed": noise_seed});
            Ok((Box::new(MockBackend::new(rules, noise_seed).with_noise(noise)), desc))
        }
        "http" => {
            let base = config::resolve(args.base_url.clone(), b.base_url.clone(), config::ENV_BASE_URL)
                .with_context(|| format!("no base URL: pass --base-url or set {}", config::ENV_BASE_URL))?;
            let model = args
                .model
                .clone()
                .or_else(|| b.model.clone())
                .context("the http backend needs --model")?;
            let mut cfg = HttpConfig::new(&base, &model);
            if let Some(e) = args.endpoint.as_deref() {
                cfg.endpoint = serde_json::from_value(json!(e))
                    .with_context(|| format!("unknown endpoint {e:?} (expected chat or completions)"))?;
            } else if let Some(e) = b.endpoint {
                cfg.endpoint = e;
            }
            if let Some(k) = args.top_k.or(b.top_k) {
                cfg.top_k = k;
            }
            if let Some(t) = b.timeout_secs {
                cfg.timeout_secs = t;
            }
            cfg.yes_table = b.yes_table.clone();
            cfg.api_key = std::env::var(config::ENV_API_KEY).ok().filter(|k| !k.is_empty());
            let desc = serde_json::to_value(&cfg)?;
            Ok((Box::new(HttpBackend::new(cfg)), desc))
        }
        other => bail!("unknown backend {other:?} (expected mock or http)"),
    }
}

pub fn encode(args: &EncodeArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut dataset = load_labels(&args.data)?;
    if let Some(split) = &args.split {
        let want: Split = serde_json::from_value(json!(split)).with_context(|| format!("unknown split {split:?}"))?;
        let samples: Vec<TextSample> = dataset.samples().iter().filter(|s| s.split == want).cloned().collect();
        if samples.is_empty() {
            bail!("no samples in split {split:?}");
        }
        dataset = Dataset::new(samples, Some(dataset.label_set().labels().to_vec()))?;
    }
    let lexicon = lexicon_for(args.lexicon.as_deref(), &args.lang)?;
    let template = styled_template(&args.template, &args.style)?;
    let (backend, backend_desc) = make_backend(&args.backend, &file)?;

    let defaults = EncodeOptions::default();
    let options = EncodeOptions {
        parallel: args.parallel.or(file.encode.parallel).unwrap_or(defaults.parallel),
        checkpoint_every: args
            .checkpoint_every
            .or(file.encode.checkpoint_every)
            .unwrap_or(defaults.checkpoint_every),
        retry: RetryPolicy {
            max_attempts: args
                .max_attempts
                .or(file.encode.max_attempts)
                .unwrap_or(defaults.retry.max_attempts),
            ..defaults.retry
        },
    };
    let cache_dir = args.cache_dir.clone().unwrap_or_else(|| sibling(&args.out, "cache"));
    encode_to(
        &dataset,
        &lexicon,
        &template,
        backend.as_ref(),
        backend_desc,
        &cache_dir,
        &options,
        &args.out,
    )
}

/// Encode and write the matrix plus its manifest.
#[allow(clippy::too_many_arguments)]
pub(crate) fn encode_to(
    dataset: &Dataset,
    lexicon: &Lexicon,
    template: &PromptTemplate,
    backend: &dyn Backend,
    backend_desc: serde_json::Value,
    cache_dir: &Path,
    options: &EncodeOptions,
    out: &Path,
) -> anyhow::Result<()> {
    let mut manifest = RunManifest::new(
        "encode",
        json!({"template": template.to_file_spec(), "backend": backend_desc, "options": options}),
    );
    manifest
        .input("dataset", dataset.fingerprint())
        .input("lexicon", lexicon.fingerprint())
        .input("template", &template.run_fingerprint(lexicon))
        .input("model", backend.model_id());
    info!("encoding {} samples x {} adjectives", dataset.len(), lexicon.len());
    let matrix = encoder::encode(dataset, lexicon, template, backend, cache_dir, options)?;
    let matrix = matrix.with_manifest(&manifest.hash());
    ensure_parent(out)?;
    matrix.save(out)?;
    manifest.output(out)?;
    let coverage = encoder::coverage_summary(cache_dir, matrix.adjectives(), encoder::LOW_COVERAGE)?;
    if coverage.below_threshold > 0 {
        warn!(
            "{} of {} queries listed less than {} of the first-token mass (min {:.3}); yes-mass may be underestimated",
            coverage.below_threshold, coverage.cells, coverage.threshold, coverage.min
        );
    }
    let coverage_path = sibling(out, "coverage.json");
    write_json(&coverage_path, &coverage)?;
    manifest.output(&coverage_path)?;
    manifest.write(&sibling(out, "manifest.json"))?;
    println!(
        "wrote {} x {} matrix to {}",
        matrix.rows(),
        matrix.cols(),
        out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let config = training_config(&args.training)?;
    let dataset = load_labels(&args.labels)?;
    let n = dataset.label_set().len();
    let train_m = load_matrix(&args.train)?;
    let emb = args
        .fusion_embeddings
        .as_deref()
        .map(|p| EmbeddingTable::load(p).with_context(|| format!("loading embeddings {}", p.display())))
        .transpose()?;

    let full = training_set(&train_m, &dataset, emb.as_ref())?;
    let (train_set, val_set) = match &args.val {
        Some(p) => {
            let val_m = load_matrix(p)?;
            train_m.compatible_with(&val_m)?;
            (full, training_set(&val_m, &dataset, emb.as_ref())?)
        }
        None => {
            let held = stratified_holdout(&full.labels, n, args.val_fraction, config.seed);
            let mut is_val = vec![false; full.len()];
            for &i in &held {
                is_val[i] = true;
            }
            let kept: Vec<usize> = (0..full.len()).filter(|&i| !is_val[i]).collect();
            (full.select(&kept), full.select(&held))
        }
    };
    let test_set = match &args.test {
        Some(p) => {
            let test_m = load_matrix(p)?;
            train_m.compatible_with(&test_m)?;
            Some(training_set(&test_m, &dataset, emb.as_ref())?)
        }
        None => None,
    };

    let mut manifest = RunManifest::new(
        "train",
        json!({
            "training": config,
            "non_paper_choices": config.non_paper_choices(emb.is_some()),
            "repeats": args.repeats,
            "val_fraction": args.val.is_none().then_some(args.val_fraction),
        }),
    );
    manifest.input_file("train_matrix", &args.train)?;
    manifest.input("labels", dataset.fingerprint());
    for (name, p) in [
        ("val_matrix", &args.val),
        ("test_matrix", &args.test),
        ("embeddings", &args.fusion_embeddings),
    ] {
        if let Some(p) = p {
            manifest.input_file(name, p)?;
        }
    }
    manifest.seed("training", config.seed);

    let (summary, mut outcomes) = train_repeats(&train_set, &val_set, test_set.as_ref(), n, &config, args.repeats)?;
    let outcome = outcomes.swap_remove(0);
    let test_f1 = test_set.as_ref().map(|t| evaluate(&outcome.params, t, n)).transpose()?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut ckpt = Checkpoint::new(
        outcome.params,
        config.seed,
        train_m.lexicon_fingerprint(),
        train_m.template_fingerprint(),
        dataset.label_set().labels().to_vec(),
        train_m.adjectives().to_vec(),
        config.lambda,
    );
    ckpt.meta.manifest = Some(manifest.hash());
    let ckpt_path = args.out.join("model.ckpt");
    ckpt.save(&ckpt_path)?;
    let log_path = args.out.join("training_log.json");
    write_json(&log_path, &outcome.log)?;
    let metrics_path = args.out.join("metrics.json");
    write_json(
        &metrics_path,
        &json!({
            "best_epoch": outcome.log.best_epoch,
            "val_macro_f1": outcome.log.best_val_macro_f1,
            "test_macro_f1": test_f1,
            "stopped_early": outcome.log.stopped_early,
        }),
    )?;
    for p in [&ckpt_path, &log_path, &metrics_path] {
        manifest.output(p)?;
    }
    if args.repeats > 1 {
        let p = args.out.join("repeats.json");
        write_json(&p, &summary)?;
        manifest.output(&p)?;
        println!(
            "val macro-F1 over {} seeds: {:.4} +/- {:.4}",
            args.repeats, summary.val_mean, summary.val_std
        );
        if let (Some(m), Some(s)) = (summary.test_mean, summary.test_std) {
            println!("test macro-F1 over {} seeds: {m:.4} +/- {s:.4}", args.repeats);
        }
    }
    manifest.write(&args.out.join("manifest.json"))?;
    println!(
        "best epoch {}, val macro-F1 {:.4}{}",
        outcome.log.best_epoch,
        outcome.log.best_val_macro_f1,
        test_f1.map(|f| format!(", test macro-F1 {f:.4}")).unwrap_or_default()
    );
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

/// One JSONL prediction line per matrix row.
pub(crate) fn prediction_lines(
    ckpt: &Checkpoint,
    matrix: &ConceptMatrix,
    emb: Option<&EmbeddingTable>,
    k: usize,
) -> anyhow::Result<Vec<String>> {
    let k = k.min(matrix.cols());
    let mut out = Vec::with_capacity(matrix.rows());
    for (r, id) in matrix.sample_ids().iter().enumerate() {
        let e = emb
            .map(|t| t.get(id).with_context(|| format!("no embedding for sample {id:?}")))
            .transpose()?;
        let ex = explain::explain_local(
            &ckpt.params,
            &matrix.row_f64(r),
            e.as_deref(),
            matrix.adjectives(),
            &ckpt.meta.label_order,
            id,
            k,
        )?;
        let top: Vec<_> = ex
            .ranked
            .iter()
            .map(|c| json!({"adjective": c.adjective, "score": c.score}))
            .collect();
        let line = json!({
            "id": id,
            "label": ex.predicted_label,
            "label_index": ex.predicted_index,
            "probs": ex.probs,
            "top": top,
        });
        out.push(serde_json::to_string(&line)?);
    }
    Ok(out)
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let (ckpt, matrix) = load_model(&args.checkpoint, &args.matrix)?;
    let emb = model_embeddings(&ckpt, args.embeddings.as_deref())?;
    let lines = prediction_lines(&ckpt, &matrix, emb.as_ref(), args.k)?;
    match &args.out {
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for l in &lines {
                writeln!(w, "{l}")?;
            }
        }
        Some(out) => {
            let mut body = lines.join("\n");
            body.push('\n');
            ensure_parent(out)?;
            scbm_core::container::atomic_write(out, body.as_bytes())?;
            let mut manifest = RunManifest::new("predict", json!({"k": args.k}));
            manifest
                .input_file("checkpoint", &args.checkpoint)?
                .input_file("matrix", &args.matrix)?;
            manifest.output(out)?;
            manifest.write(&sibling(out, "manifest.json"))?;
            println!("wrote {} predictions to {}", lines.len(), out.display());
        }
    }
    Ok(())
}

pub fn explain_local(
    checkpoint: &Path,
    matrix: &Path,
    sample_id: &str,
    k: usize,
    embeddings: Option<&Path>,
) -> anyhow::Result<()> {
    let (ckpt, m) = load_model(checkpoint, matrix)?;
    let emb = model_embeddings(&ckpt, embeddings)?;
    let row = m
        .sample_ids()
        .iter()
        .position(|id| id == sample_id)
        .with_context(|| format!("sample {sample_id:?} is not in {}", matrix.display()))?;
    let e = emb
        .as_ref()
        .map(|t| {
            t.get(sample_id)
                .with_context(|| format!("no embedding for sample {sample_id:?}"))
        })
        .transpose()?;
    let ex = explain::explain_local(
        &ckpt.params,
        &m.row_f64(row),
        e.as_deref(),
        m.adjectives(),
        &ckpt.meta.label_order,
        sample_id,
        k,
    )?;
    println!("{}", serde_json::to_string_pretty(&ex)?);
    Ok(())
}

pub struct GlobalArgs<'a> {
    pub checkpoint: &'a Path,
    pub matrix: &'a Path,
    pub labels: &'a Path,
    pub out: &'a Path,
    pub include_errors: bool,
    pub top_confident: Option<usize>,
    pub local_out: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
}

/// Global heatmap and, optionally, the top-confident local heatmap. Returns
/// the overlap statistic of the class means.
#[allow(clippy::too_many_arguments)]
pub(crate) fn write_global(
    params: &ModelParams,
    data: &TrainingSet,
    ids: &[String],
    adjectives: &[String],
    labels: &[String],
    include_errors: bool,
    out: &Path,
    local: Option<(usize, &Path)>,
) -> anyhow::Result<f64> {
    let g = explain::explain_global(params, data, adjectives, labels, include_errors)?;
    ensure_parent(out)?;
    g.heatmap().write(out)?;
    if let Some((per_class, local_out)) = local {
        let idx = explain::top_confident(params, data, per_class)?;
        let row_labels = idx
            .iter()
            .map(|&i| format!("{} ({})", ids[i], labels[data.labels[i]]))
            .collect();
        let h: HeatmapData = explain::local_heatmap(params, data, &idx, row_labels, adjectives)?;
        ensure_parent(local_out)?;
        h.write(local_out)?;
    }
    Ok(g.overlap_statistic())
}

pub fn explain_global(a: &GlobalArgs) -> anyhow::Result<()> {
    let (ckpt, m) = load_model(a.checkpoint, a.matrix)?;
    let emb = model_embeddings(&ckpt, a.embeddings)?;
    let dataset = load_labels(a.labels)?;
    if dataset.label_set().labels() != ckpt.meta.label_order.as_slice() {
        bail!("label order of {} differs from the checkpoint", a.labels.display());
    }
    let data = training_set(&m, &dataset, emb.as_ref())?;
    let local_default;
    let local = match a.top_confident {
        Some(n) => {
            local_default = a.out.with_extension("local.csv");
            Some((n, a.local_out.unwrap_or(&local_default)))
        }
        None => None,
    };
    let overlap = write_global(
        &ckpt.params,
        &data,
        m.sample_ids(),
        m.adjectives(),
        &ckpt.meta.label_order,
        a.include_errors,
        a.out,
        local,
    )?;
    let mut manifest = RunManifest::new(
        "explain-global",
        json!({"include_errors": a.include_errors, "top_confident": a.top_confident}),
    );
    manifest
        .input_file("checkpoint", a.checkpoint)?
        .input_file("matrix", a.matrix)?
        .input("labels", dataset.fingerprint());
    manifest.output(a.out)?;
    if let Some((_, p)) = local {
        manifest.output(p)?;
    }
    manifest.write(&sibling(a.out, "manifest.json"))?;
    println!("overlap statistic: {overlap:.6}");
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn analyze_perm(
    checkpoint: &Path,
    matrix: &Path,
    labels: &Path,
    reps: usize,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let (ckpt, m) = load_model(checkpoint, matrix)?;
    if ckpt.meta.dims.embedding.is_some() {
        bail!("permutation importance runs on bottleneck-only checkpoints");
    }
    let dataset = load_labels(labels)?;
    let data = training_set(&m, &dataset, None)?;
    let n = ckpt.meta.label_order.len();
    let report = permutation_importance(&ckpt.params, &data, m.adjectives(), n, reps, seed)?;
    write_json(out, &report)?;
    let mut manifest = RunManifest::new("analyze-perm", json!({"repetitions": reps}));
    manifest
        .input_file("checkpoint", checkpoint)?
        .input_file("matrix", matrix)?
        .input("labels", dataset.fingerprint());
    manifest.seed("permutation", seed);
    manifest.output(out)?;
    manifest.write(&sibling(out, "manifest.json"))?;
    println!("baseline macro-F1 {:.4}", report.baseline_f1);
    for a in report.ranked().into_iter().take(10) {
        println!("{:<20} {:+.4} (std {:.4})", a.adjective, a.mean_delta, a.std_delta);
    }
    Ok(())
}

pub struct SweepArgs<'a> {
    pub train: &'a Path,
    pub val: &'a Path,
    pub test: &'a Path,
    pub labels: &'a Path,
    pub sizes: &'a [usize],
    pub trials: usize,
    pub seed: u64,
    pub training: &'a TrainingOverrides,
    pub out: &'a Path,
}

pub fn analyze_sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let config = training_config(a.training)?;
    let dataset = load_labels(a.labels)?;
    let n = dataset.label_set().len();
    let tr = load_matrix(a.train)?;
    let va = load_matrix(a.val)?;
    let te = load_matrix(a.test)?;
    tr.compatible_with(&va)?;
    tr.compatible_with(&te)?;
    let report = subset_sweep(
        &training_set(&tr, &dataset, None)?,
        &training_set(&va, &dataset, None)?,
        &training_set(&te, &dataset, None)?,
        n,
        a.sizes,
        a.trials,
        &config,
        a.seed,
    )?;
    write_json(a.out, &report)?;
    let csv_path = a.out.with_extension("csv");
    scbm_core::container::atomic_write(&csv_path, report.to_csv().as_bytes())?;
    let mut manifest = RunManifest::new(
        "analyze-sweep",
        json!({"training": config, "sizes": a.sizes, "trials": a.trials}),
    );
    manifest
        .input_file("train_matrix", a.train)?
        .input_file("val_matrix", a.val)?
        .input_file("test_matrix", a.test)?
        .input("labels", dataset.fingerprint());
    manifest.seed("sweep", a.seed).seed("training", config.seed);
    manifest.output(a.out)?;
    manifest.output(&csv_path)?;
    manifest.write(&sibling(a.out, "manifest.json"))?;
    for p in &report.points {
        println!(
            "size {:>4}: test macro-F1 {:.4} +/- {:.4}, train {:.4}",
            p.size, p.mean_test_f1, p.std_test_f1, p.mean_train_f1
        );
    }
    Ok(())
}

/// Rows of `matrix` whose samples fall in `split`.
pub(crate) fn split_rows(matrix: &ConceptMatrix, dataset: &Dataset, split: Split) -> anyhow::Result<ConceptMatrix> {
    let index = id_index(dataset);
    let samples = dataset.samples();
    let rows: Vec<usize> = matrix
        .sample_ids()
        .iter()
        .enumerate()
        .filter(|(_, id)| index.get(id.as_str()).is_some_and(|&i| samples[i].split == split))
        .map(|(r, _)| r)
        .collect();
    if rows.is_empty() {
        bail!("no rows in split {}", split.as_str());
    }
    Ok(matrix.select_rows(&rows))
}
