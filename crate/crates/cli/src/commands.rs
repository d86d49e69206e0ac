use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use toothlabel::crops::{
    generate_crops, oversample_positives, parse_segmentation_manifest, split_dataset, CropError,
    CropRef, SegmentationSet, Split, SplitManifest,
};
use toothlabel::evaluation::{evaluate, PredictionSet};
use toothlabel::labeling::{
    build_label_matrix, build_vocabulary, count_phrases, default_allowlist, ConditionVocabulary,
    SynonymMap, DEFAULT_ALLOWLIST, DEFAULT_SYNONYMS,
};
use toothlabel::metrics::ols_fit;
use toothlabel::phrases::{
    normalize, PhraseCache, PhrasePipeline, PhraseSet, RemoteExtractor, RuleExtractor, Strategy,
    DEFAULT_PROMPT,
};
use toothlabel::report::{Corpus, CorpusManifest, PresenceFilter};
use toothlabel::study::{
    analysis_to_csv, consensus, kappa_per_condition, leave_one_out_eval, per_condition_analysis,
    sample_expert_set, trend_fits, AnnotationRecord, AnnotationSet, ExpertImageDataset, RaterGroup,
    StratumCounts, TiePolicy,
};
use toothlabel_service::{ServiceConfig, ServiceError};

use crate::io::{
    load_labels, read_json, read_text, require, summary_path, write_atomic, write_dir_atomic,
    write_json, Plan,
};
use crate::{runtime, validation, CliError, Command, PipelineConfig};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn version_text() -> String {
    let rules = RuleExtractor::new(&SynonymMap::dental_default().multiword_terms());
    format!(
        "toothlabel {}\nprompt    sha256:{}\nsynonyms  sha256:{}\nallowlist sha256:{}\nrules     {}",
        env!("CARGO_PKG_VERSION"),
        sha256_hex(DEFAULT_PROMPT.as_bytes()),
        sha256_hex(DEFAULT_SYNONYMS.as_bytes()),
        sha256_hex(DEFAULT_ALLOWLIST.as_bytes()),
        rules.identity(),
    )
}

pub fn dispatch(command: Command, cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    match command {
        Command::ParseReports(a) => parse_reports(a, cfg, dry_run),
        Command::ExtractPhrases(a) => extract_phrases(a, cfg, dry_run),
        Command::BuildVocab(a) => build_vocab(a, cfg, dry_run),
        Command::LinkLabels(a) => link_labels(a, cfg, dry_run),
        Command::IngestSegmentation(a) => ingest(a, cfg, dry_run),
        Command::MakeCrops(a) => make_crops(a, cfg, dry_run),
        Command::Split(a) => split(a, cfg, dry_run),
        Command::Oversample(a) => oversample(a, cfg, dry_run),
        Command::Evaluate(a) => evaluate_cmd(a, cfg, dry_run),
        Command::Kappa(a) => kappa(a, cfg, dry_run),
        Command::FitTrend(a) => fit_trend(a, dry_run),
        Command::SampleExpertSet(a) => sample_expert(a, cfg, dry_run),
        Command::ConsensusEval(a) => consensus_eval(a, cfg, dry_run),
        Command::Serve(a) => serve(a, cfg, dry_run),
    }
}

fn emit<T: Serialize>(summary: &T) {
    println!(
        "{}",
        serde_json::to_string(summary).expect("summary serializes")
    );
}

fn synonyms(cfg: &PipelineConfig, flag: Option<PathBuf>) -> Result<SynonymMap, CliError> {
    match flag.or_else(|| cfg.vocabulary.synonyms.clone()) {
        Some(p) => SynonymMap::from_json(&read_text(&p)?)
            .map_err(|e| validation(format!("{}: {e}", p.display()))),
        None => Ok(SynonymMap::dental_default()),
    }
}

fn allowlist(cfg: &PipelineConfig, flag: Option<PathBuf>) -> Result<BTreeSet<String>, CliError> {
    match flag.or_else(|| cfg.vocabulary.allowlist.clone()) {
        Some(p) => {
            let names: Vec<String> = read_json(&p)?;
            Ok(names.iter().map(|n| normalize(n)).collect())
        }
        None => Ok(default_allowlist()),
    }
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    Corpus::from_jsonl(&read_text(path)?)
        .map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn load_phrases(path: &Path) -> Result<PhraseSet, CliError> {
    PhraseSet::from_jsonl(&read_text(path)?)
        .map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn crop_error(e: CropError) -> CliError {
    match e {
        CropError::ManifestParse(_)
        | CropError::MissingImageDimensions(_)
        | CropError::BadRatios(_)
        | CropError::UnknownCondition { .. }
        | CropError::BadFactor
        | CropError::BadCropId(_) => validation(e),
        _ => runtime(e),
    }
}

fn parse_ratios(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| validation(format!("--ratios {s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| validation(format!("--ratios {s:?}: expected three values")))
}

fn parse_counts(s: &str) -> Result<StratumCounts, CliError> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| validation(format!("--per-condition {s:?}: {e}")))?;
    match parts[..] {
        [tp, fp, fn_] => Ok(StratumCounts { tp, fp, fn_ }),
        _ => Err(validation(format!(
            "--per-condition {s:?}: expected TP,FP,FN"
        ))),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Result<T, CliError> {
    serde_json::from_value(json!(value))
        .map_err(|_| validation(format!("--{flag}: unknown value {value:?}")))
}

fn subset_of(split: &SplitManifest, which: Split) -> BTreeSet<CropRef> {
    split
        .entries
        .iter()
        .filter(|e| e.split == which)
        .map(|e| CropRef::new(e.image_id.clone(), e.tooth))
        .collect()
}

fn parse_reports(
    a: crate::ParseReportsArgs,
    cfg: &PipelineConfig,
    dry_run: bool,
) -> Result<(), CliError> {
    let dir = require(a.reports_dir, &cfg.paths.reports_dir, "reports-dir")?;
    let manifest = require(a.manifest, &cfg.paths.corpus_manifest, "manifest")?;
    let out = require(a.out, &cfg.paths.corpus, "out")?;
    let patterns = if a.presence_patterns.is_empty() {
        cfg.extraction.presence_patterns.clone()
    } else {
        a.presence_patterns
    };
    let plan = Plan::new("parse-reports")
        .input(&dir)
        .input(&manifest)
        .output(&out)
        .params(json!({ "presence_patterns": patterns }));
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let filter = PresenceFilter::new(&patterns).map_err(validation)?;
    let manifest = CorpusManifest::load(&manifest).map_err(validation)?;
    let corpus = Corpus::load_dir(&dir, &manifest, &filter).map_err(validation)?;
    write_atomic(&out, corpus.to_jsonl().as_bytes())?;
    let lines: usize = corpus.reports.iter().map(|r| r.lines.len()).sum();
    let excluded: usize = corpus
        .reports
        .iter()
        .map(|r| r.lines.iter().filter(|l| l.excluded).count())
        .sum();
    emit(&json!({"reports": corpus.reports.len(), "lines": lines, "excluded_lines": excluded}));
    Ok(())
}

fn extract_phrases(
    a: crate::ExtractPhrasesArgs,
    cfg: &PipelineConfig,
    dry_run: bool,
) -> Result<(), CliError> {
    let corpus_path = require(a.corpus, &cfg.paths.corpus, "corpus")?;
    let out = require(a.out, &cfg.paths.phrases, "out")?;
    let cache_path = a.cache.or_else(|| cfg.paths.cache.clone());
    let strategy: Strategy = match &a.strategy {
        Some(s) => s
            .parse()
            .map_err(|e: String| validation(format!("--strategy: {e}")))?,
        None => cfg.extraction.strategy,
    };
    let mut endpoint = cfg.extraction.endpoint.clone();
    if let Some(url) = a.endpoint_url {
        endpoint.base_url = url;
    }
    if let Some(model) = a.model {
        endpoint.model = model;
    }
    let mut plan = Plan::new("extract-phrases")
        .input(&corpus_path)
        .output(&out)
        .params(
            json!({"strategy": strategy, "endpoint": endpoint.base_url, "model": endpoint.model}),
        );
    if let Some(p) = &cfg.extraction.prompt {
        plan = plan.input(p);
    }
    if let Some(c) = &cache_path {
        plan = plan.output(c);
    }
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let prompt = match &cfg.extraction.prompt {
        Some(p) => read_text(p)?,
        None => DEFAULT_PROMPT.to_string(),
    };
    let corpus = load_corpus(&corpus_path)?;
    let cache = match &cache_path {
        Some(p) => PhraseCache::open(p).map_err(runtime)?,
        None => PhraseCache::in_memory(),
    };
    let rules = RuleExtractor::new(&synonyms(cfg, None)?.multiword_terms());
    let max_concurrent = endpoint.max_concurrent;
    let remote = (strategy != Strategy::Rules).then(|| RemoteExtractor::http(endpoint, prompt));
    let mut pipeline = PhrasePipeline::new(strategy, &rules, remote.as_ref(), &cache);
    pipeline.max_concurrent = max_concurrent;
    let phrases = pipeline.extract_corpus(&corpus).map_err(runtime)?;
    write_atomic(&out, phrases.to_jsonl().as_bytes())?;
    emit(
        &json!({"reports": phrases.reports.len(), "extractors": phrases.extractors(), "cache_entries": cache.len()}),
    );
    Ok(())
}

fn build_vocab(
    a: crate::BuildVocabArgs,
    cfg: &PipelineConfig,
    dry_run: bool,
) -> Result<(), CliError> {
    let corpus_path = require(a.corpus, &cfg.paths.corpus, "corpus")?;
    let phrases_path = require(a.phrases, &cfg.paths.phrases, "phrases")?;
    let out = require(a.out, &cfg.paths.vocabulary, "out")?;
    let min_count = a.min_count.unwrap_or(cfg.vocabulary.min_count);
    let mut plan = Plan::new("build-vocab")
        .input(&corpus_path)
        .input(&phrases_path)
        .output(&out)
        .params(json!({ "min_count": min_count }));
    if let Some(f) = &a.frequencies_out {
        plan = plan.output(f);
    }
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let synonyms = synonyms(cfg, a.synonyms)?;
    let allowlist = allowlist(cfg, a.allowlist)?;
    let corpus = load_corpus(&corpus_path)?;
    let phrases = load_phrases(&phrases_path)?;
    let frequencies = count_phrases(&corpus, &phrases, &synonyms);
    if let Some(f) = &a.frequencies_out {
        let mut rows: Vec<(&String, &u64)> = frequencies.iter().collect();
        rows.sort_by(|x, y| y.1.cmp(x.1).then_with(|| x.0.cmp(y.0)));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["phrase", "count"]).map_err(runtime)?;
        for (phrase, count) in rows {
            w.write_record([phrase.as_str(), &count.to_string()])
                .map_err(runtime)?;
        }
        write_atomic(f, &w.into_inner().map_err(runtime)?)?;
    }
    let vocabulary =
        build_vocabulary(&frequencies, min_count, &allowlist, &synonyms).map_err(runtime)?;
    write_json(&out, &vocabulary)?;
    emit(
        &json!({"conditions": vocabulary.names().collect::<Vec<_>>(), "distinct_phrases": frequencies.len()}),
    );
    Ok(())
}

fn link_labels(
    a: crate::LinkLabelsArgs,
    cfg: &PipelineConfig,
    dry_run: bool,
) -> Result<(), CliError> {
    let corpus_path = require(a.corpus, &cfg.paths.corpus, "corpus")?;
    let phrases_path = require(a.phrases, &cfg.paths.phrases, "phrases")?;
    let vocab_path = require(a.vocabulary, &cfg.paths.vocabulary, "vocabulary")?;
    let out = require(a.out, &cfg.paths.labels, "out")?;
    let instances = a.instances.or_else(|| cfg.paths.instances.clone());
    let mut plan = Plan::new("link-labels")
        .input(&corpus_path)
        .input(&phrases_path)
        .input(&vocab_path)
        .output(&out)
        .output(&summary_path(&out));
    if let Some(i) = &instances {
        plan = plan.input(i);
    }
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let corpus = load_corpus(&corpus_path)?;
    let phrases = load_phrases(&phrases_path)?;
    let vocabulary: ConditionVocabulary = read_json(&vocab_path)?;
    let index = match &instances {
        Some(p) => Some(read_json::<SegmentationSet>(p)?.tooth_index()),
        None => None,
    };
    let matrix =
        build_label_matrix(&corpus, &phrases, &vocabulary, index.as_ref()).map_err(validation)?;
    let summary = matrix.summary();
    write_atomic(&out, matrix.to_jsonl().as_bytes())?;
    write_json(&summary_path(&out), &summary)?;
    emit(&json!({"records": summary.records, "positive_counts": summary.positive_counts}));
    Ok(())
}

fn ingest(a: crate::IngestArgs, cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    let manifest = require(a.manifest, &cfg.paths.segmentation, "manifest")?;
    let out = require(a.out, &cfg.paths.instances, "out")?;
    let threshold = a.threshold.unwrap_or(cfg.crops.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(validation(format!(
            "--threshold {threshold} outside [0, 1]"
        )));
    }
    let plan = Plan::new("ingest-segmentation")
        .input(&manifest)
        .output(&out)
        .params(json!({ "threshold": threshold }));
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let set = parse_segmentation_manifest(&read_text(&manifest)?, threshold).map_err(crop_error)?;
    write_json(&out, &set)?;
    emit(&json!({"images": set.images.len(), "teeth": set.instances.len()}));
    Ok(())
}

fn make_crops(
    a: crate::MakeCropsArgs,
    cfg: &PipelineConfig,
    dry_run: bool,
) -> Result<(), CliError> {
    let instances = require(a.instances, &cfg.paths.instances, "instances")?;
    let images = require(a.images_dir, &cfg.paths.images_dir, "images-dir")?;
    let out_dir = require(a.out_dir, &cfg.paths.crops_dir, "out-dir")?;
    let plan = Plan::new("make-crops")
        .input(&instances)
        .input(&images)
        .output(&out_dir)
        .params(json!({ "sides": cfg.crops.sides }));
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let set: SegmentationSet = read_json(&instances)?;
    let specs = write_dir_atomic(&out_dir, |staging| {
        let specs = generate_crops(&set, &images, staging, &cfg.crops.sides).map_err(crop_error)?;
        let manifest: String = specs
            .iter()
            .map(|s| serde_json::to_string(s).expect("crop spec serializes") + "\n")
            .collect();
        write_atomic(&staging.join("crops.jsonl"), manifest.as_bytes())?;
        Ok(specs)
    })?;
    let clamped = specs
        .iter()
        .filter(|s| s.window.deviation != (0.0, 0.0))
        .count();
    emit(&json!({"crops": specs.len(), "clamped": clamped}));
    Ok(())
}

fn split(a: crate::SplitArgs, cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    let instances = require(a.instances, &cfg.paths.instances, "instances")?;
    let out = require(a.out, &cfg.paths.split, "out")?;
    let ratios = match &a.ratios {
        Some(s) => parse_ratios(s)?,
        None => cfg.crops.ratios,
    };
    let seed = a.seed.unwrap_or(cfg.crops.seed);
    let plan = Plan::new("split")
        .input(&instances)
        .output(&out)
        .params(json!({"ratios": ratios, "seed": seed}));
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let set: SegmentationSet = read_json(&instances)?;
    let crops: Vec<CropRef> = set.instances.iter().map(|i| i.crop_ref()).collect();
    let manifest = split_dataset(&crops, ratios, seed).map_err(crop_error)?;
    write_json(&out, &manifest)?;
    emit(&json!({
        "train_images": manifest.images(Split::Train).len(),
        "val_images": manifest.images(Split::Val).len(),
        "test_images": manifest.images(Split::Test).len(),
    }));
    Ok(())
}

fn oversample(
    a: crate::OversampleArgs,
    cfg: &PipelineConfig,
    dry_run: bool,
) -> Result<(), CliError> {
    let split_path = require(a.split, &cfg.paths.split, "split")?;
    let labels_path = require(a.labels, &cfg.paths.labels, "labels")?;
    let out = a.out.ok_or_else(|| validation("missing --out"))?;
    let factor = a.factor.unwrap_or(cfg.crops.factor);
    let plan = Plan::new("oversample")
        .input(&split_path)
        .input(&labels_path)
        .output(&out)
        .params(json!({"condition": a.condition, "factor": factor}));
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let manifest: SplitManifest = read_json(&split_path)?;
    let labels = load_labels(&labels_path)?;
    let result =
        oversample_positives(&manifest, &labels, a.condition, factor).map_err(crop_error)?;
    write_json(&out, &result)?;
    let repeated = result.entries.iter().filter(|e| e.repetition > 1).count();
    emit(
        &json!({"oversampled_crops": repeated, "expanded_train": result.expanded().filter(|e| e.split == Split::Train).count()}),
    );
    Ok(())
}

fn evaluate_cmd(
    a: crate::EvaluateArgs,
    cfg: &PipelineConfig,
    dry_run: bool,
) -> Result<(), CliError> {
    let predictions = require(a.predictions, &cfg.paths.predictions, "predictions")?;
    let labels_path = require(a.labels, &cfg.paths.labels, "labels")?;
    let out = require(a.out, &cfg.paths.evaluation, "out")?;
    let which: Split = parse_enum("subset", &a.subset)?;
    let mut plan = Plan::new("evaluate")
        .input(&predictions)
        .input(&labels_path)
        .output(&out)
        .params(json!({"subset": a.split.as_ref().map(|_| which), "loss": cfg.loss}));
    if let Some(s) = &a.split {
        plan = plan.input(s);
    }
    if let Some(c) = &a.csv {
        plan = plan.output(c);
    }
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let labels = load_labels(&labels_path)?;
    let preds = PredictionSet::from_jsonl(&read_text(&predictions)?, labels.vocabulary.len())
        .map_err(|e| validation(format!("{}: {e}", predictions.display())))?;
    let subset = match &a.split {
        Some(p) => Some(subset_of(&read_json(p)?, which)),
        None => None,
    };
    let report = evaluate(&preds, &labels, subset.as_ref(), &cfg.loss).map_err(runtime)?;
    write_json(&out, &report)?;
    if let Some(c) = &a.csv {
        write_atomic(c, report.to_csv().map_err(runtime)?.as_bytes())?;
    }
    emit(&json!({"crops": report.n_crops, "mean_mcc": report.mean_mcc}));
    Ok(())
}

fn load_annotations(path: &Path, k: Option<usize>) -> Result<AnnotationSet, CliError> {
    let text = read_text(path)?;
    let records: Vec<AnnotationRecord> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| validation(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<_, _>>()?;
    let k = match (k, records.first()) {
        (Some(k), _) => k,
        (None, Some(r)) => r.labels.len(),
        (None, None) => return Err(validation(format!("{} has no annotations", path.display()))),
    };
    AnnotationSet::from_records(records, k)
        .map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn kappa(a: crate::KappaArgs, cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    let annotations = require(a.annotations, &cfg.paths.annotations, "annotations")?;
    let expert_set = require(a.expert_set, &cfg.paths.expert_set, "expert-set")?;
    let out = a.out.ok_or_else(|| validation("missing --out"))?;
    let group: Option<RaterGroup> = a
        .group
        .as_deref()
        .map(|g| parse_enum("group", g))
        .transpose()?;
    let plan = Plan::new("kappa")
        .input(&annotations)
        .input(&expert_set)
        .output(&out)
        .params(json!({ "group": group }));
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let set = load_annotations(&annotations, None)?;
    let dataset: ExpertImageDataset = read_json(&expert_set)?;
    let items = dataset.crops();
    let raters = set.complete_raters(&items, group);
    if raters.len() < 2 {
        return Err(validation(format!(
            "kappa needs 2 raters who labeled every item, found {}",
            raters.len()
        )));
    }
    let kappas = kappa_per_condition(&set, &raters, &items).map_err(runtime)?;
    write_json(
        &out,
        &json!({"raters": raters, "items": items.len(), "conditions": kappas}),
    )?;
    emit(
        &json!({"raters": raters.len(), "degenerate": kappas.iter().filter(|k| k.degenerate).count()}),
    );
    Ok(())
}

fn fit_trend(a: crate::FitTrendArgs, dry_run: bool) -> Result<(), CliError> {
    let mut plan = Plan::new("fit-trend")
        .input(&a.input)
        .params(json!({"x": a.x, "y": a.y, "intercept": !a.no_intercept}));
    if let Some(o) = &a.out {
        plan = plan.output(o);
    }
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let mut reader = csv::Reader::from_path(&a.input)
        .map_err(|e| validation(format!("{}: {e}", a.input.display())))?;
    let headers = reader.headers().map_err(validation)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| validation(format!("column {name:?} not in {}", a.input.display())))
    };
    let xi: Vec<usize> = a.x.iter().map(|n| column(n)).collect::<Result<_, _>>()?;
    let yi = column(&a.y)?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut skipped = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(validation)?;
        let cell = |i: usize| record.get(i).unwrap_or("").trim();
        if xi
            .iter()
            .chain([&yi])
            .any(|&i| matches!(cell(i), "" | "n/a"))
        {
            skipped += 1;
            continue;
        }
        let num = |i: usize| {
            cell(i)
                .parse::<f64>()
                .map_err(|e| validation(format!("row {}: column {}: {e}", row + 2, &headers[i])))
        };
        x.push(
            xi.iter()
                .map(|&i| num(i))
                .collect::<Result<Vec<f64>, _>>()?,
        );
        y.push(num(yi)?);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} row(s) with missing values");
    }
    let fit = ols_fit(&x, &y, !a.no_intercept).map_err(runtime)?;
    let result = json!({
        "x": a.x,
        "y": a.y,
        "n": y.len(),
        "skipped_rows": skipped,
        "with_intercept": fit.with_intercept,
        "coefficients": fit.coefficients,
        "r_squared": fit.r_squared,
    });
    if let Some(o) = &a.out {
        write_json(o, &result)?;
    }
    emit(&json!({"r_squared": fit.r_squared, "coefficients": fit.coefficients}));
    Ok(())
}

fn sample_expert(
    a: crate::SampleExpertArgs,
    cfg: &PipelineConfig,
    dry_run: bool,
) -> Result<(), CliError> {
    let predictions = require(a.predictions, &cfg.paths.predictions, "predictions")?;
    let labels_path = require(a.labels, &cfg.paths.labels, "labels")?;
    let out = require(a.out, &cfg.paths.expert_set, "out")?;
    let counts = match &a.per_condition {
        Some(s) => parse_counts(s)?,
        None => cfg.study.per_condition,
    };
    let seed = a.seed.unwrap_or(cfg.study.seed);
    let mut plan = Plan::new("sample-expert-set")
        .input(&predictions)
        .input(&labels_path)
        .output(&out)
        .params(json!({"per_condition": counts, "seed": seed}));
    if let Some(s) = &a.split {
        plan = plan.input(s);
    }
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let labels = load_labels(&labels_path)?;
    let preds = PredictionSet::from_jsonl(&read_text(&predictions)?, labels.vocabulary.len())
        .map_err(|e| validation(format!("{}: {e}", predictions.display())))?;
    let candidates = match &a.split {
        Some(p) => Some(subset_of(&read_json(p)?, Split::Test)),
        None => None,
    };
    let dataset =
        sample_expert_set(&preds, &labels, candidates.as_ref(), counts, seed).map_err(runtime)?;
    write_json(&out, &dataset)?;
    emit(&json!({"items": dataset.items.len()}));
    Ok(())
}

fn consensus_eval(
    a: crate::ConsensusArgs,
    cfg: &PipelineConfig,
    dry_run: bool,
) -> Result<(), CliError> {
    let annotations = require(a.annotations, &cfg.paths.annotations, "annotations")?;
    let expert_set = require(a.expert_set, &cfg.paths.expert_set, "expert-set")?;
    let out_dir = require(a.out_dir, &cfg.paths.study_dir, "out-dir")?;
    let vocab_path = a.vocabulary.or_else(|| cfg.paths.vocabulary.clone());
    let policy: TiePolicy = match &a.tie_policy {
        Some(p) => parse_enum("tie-policy", p)?,
        None => cfg.study.tie_policy,
    };
    let outputs = [
        "consensus.jsonl",
        "leave_one_out.json",
        "leave_one_out.csv",
        "per_condition.json",
        "per_condition.csv",
        "trend.json",
    ];
    let mut plan = Plan::new("consensus-eval")
        .input(&annotations)
        .input(&expert_set)
        .params(json!({ "tie_policy": policy }));
    for o in outputs {
        plan = plan.output(&out_dir.join(o));
    }
    for p in a.predictions.iter().chain(vocab_path.iter()) {
        plan = plan.input(p);
    }
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let vocabulary: ConditionVocabulary = match &vocab_path {
        Some(p) => read_json(p)?,
        None => ConditionVocabulary::dental_default(),
    };
    let names: Vec<String> = vocabulary.names().map(str::to_string).collect();
    let mut set = load_annotations(&annotations, Some(vocabulary.len()))?;
    let dataset: ExpertImageDataset = read_json(&expert_set)?;
    let items = dataset.crops();
    if let Some(p) = &a.predictions {
        let preds = PredictionSet::from_jsonl(&read_text(p)?, vocabulary.len())
            .map_err(|e| validation(format!("{}: {e}", p.display())))?;
        set.add_predictions(&a.model_id, &preds, &items)
            .map_err(validation)?;
    }
    let experts = set.raters(Some(RaterGroup::Expert));
    let truth = consensus(&set, &experts, &items, policy).map_err(validation)?;
    let loo = leave_one_out_eval(&set, &items, policy).map_err(validation)?;
    let analysis = per_condition_analysis(&set, &truth).map_err(runtime)?;
    let trend_group = if set.raters(Some(RaterGroup::Model)).is_empty() {
        RaterGroup::Student
    } else {
        RaterGroup::Model
    };
    let points: Vec<_> = analysis
        .iter()
        .filter_map(|r| r.trend_point(trend_group))
        .collect();
    let trend = match trend_fits(&points) {
        Ok(f) => json!({"group": trend_group, "points": points, "fits": f}),
        Err(e) => json!({"group": trend_group, "points": points, "error": e.to_string()}),
    };
    let group_means: BTreeMap<String, f64> = loo
        .group_means()
        .into_iter()
        .map(|(g, m)| (g.to_string(), m))
        .collect();
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;
    write_atomic(
        &out_dir.join("consensus.jsonl"),
        truth.to_jsonl().as_bytes(),
    )?;
    write_json(
        &out_dir.join("leave_one_out.json"),
        &json!({"report": loo, "group_means": group_means}),
    )?;
    write_atomic(
        &out_dir.join("leave_one_out.csv"),
        loo.to_csv(&names).map_err(runtime)?.as_bytes(),
    )?;
    write_json(&out_dir.join("per_condition.json"), &analysis)?;
    write_atomic(
        &out_dir.join("per_condition.csv"),
        analysis_to_csv(&analysis, &names)
            .map_err(runtime)?
            .as_bytes(),
    )?;
    write_json(&out_dir.join("trend.json"), &trend)?;
    emit(&json!({"items": items.len(), "experts": experts.len(), "group_means": group_means}));
    Ok(())
}

fn serve(a: crate::ServeArgs, cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    let mut config: ServiceConfig = match &a.service_config {
        Some(p) => {
            let mut c: ServiceConfig = read_json(p)?;
            let base = p.parent().unwrap_or(Path::new("."));
            for path in [&mut c.dataset, &mut c.crops_dir, &mut c.log] {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
            for path in [&mut c.vocabulary, &mut c.static_dir].into_iter().flatten() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
            c
        }
        None => cfg.service.clone().ok_or_else(|| {
            validation("no --service-config and no `service` section in --config")
        })?,
    };
    if let Some(bind) = a.bind {
        config.bind = bind;
    }
    let mut plan = Plan::new("serve")
        .input(&config.dataset)
        .input(&config.crops_dir)
        .output(&config.log)
        .params(json!({"bind": config.bind, "raters": config.raters.len()}));
    if let Some(v) = &config.vocabulary {
        plan = plan.input(v);
    }
    if !plan.check(dry_run)? {
        return Ok(());
    }
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(toothlabel_service::serve(config))
        .map_err(|e| match e {
            ServiceError::Config(_)
            | ServiceError::EmptyVocabulary
            | ServiceError::EmptyDataset => validation(e),
            _ => runtime(e),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_parsers() {
        assert_eq!(parse_ratios("0.7,0.15,0.15").unwrap(), [0.7, 0.15, 0.15]);
        assert!(parse_ratios("0.7,0.3").is_err());
        assert!(parse_ratios("a,b,c").is_err());
        assert_eq!(parse_counts("2,2,2").unwrap(), StratumCounts::default());
        assert!(parse_counts("2,2").is_err());
        assert_eq!(parse_enum::<Split>("subset", "val").unwrap(), Split::Val);
        assert!(parse_enum::<Split>("subset", "dev").is_err());
    }

    #[test]
    fn version_lists_asset_hashes() {
        let v = version_text();
        assert!(v.starts_with("toothlabel 0.1.0\n"));
        assert!(v.contains(&sha256_hex(DEFAULT_PROMPT.as_bytes())));
        assert!(v.contains("rules/v1#"));
    }
}
