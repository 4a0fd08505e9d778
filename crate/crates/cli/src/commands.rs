use std::collections::BTreeMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use jointstory::eval::{cohens_kappa, evaluate, AbsentClasses};
use jointstory::model::{format_attention, load_checkpoint, save_checkpoint, Model, ModelConfig, Variant};
use jointstory::patterns::{emit_report, standard_analyses, with_predictions, Analysis, LabelSource};
use jointstory::schema::ElementTag;
use jointstory::synth;
use jointstory::tensor::DEFAULT_EPS;
use jointstory::text::{
    load_corpus, load_word_vectors, read_corpus, split_counts, story_from_text, Split, Story, Vocabulary,
};
use jointstory::train::{train as run_training, write_metric_log};
use jointstory::{Error, Result};
use log::{info, warn};

use crate::config::{input, optional_input, output_dir, RunConfig, DATA_ENV};
use crate::DataArgs;

/// Gradient-check tolerance reported as pass/fail.
const GRAD_TOLERANCE: f64 = 1e-4;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(io_err(path))
}

/// Config file, then data directory defaults, then flags.
fn run_config(data: &DataArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::load(data.config.as_deref())?;
    if let Some(p) = &data.input {
        rc.paths.corpus = Some(p.clone());
    }
    if let Some(p) = &data.splits {
        rc.paths.splits = Some(p.clone());
    }
    if let Some(p) = &data.out {
        rc.paths.out_dir = Some(p.clone());
    }
    let env = std::env::var_os(DATA_ENV).map(PathBuf::from);
    rc.apply_data_dir(env.as_deref());
    Ok(rc)
}

/// Corpus with splits when a split file is configured, otherwise unsplit.
fn stories(rc: &RunConfig, max_len: usize, need_splits: bool) -> Result<Vec<Story>> {
    let corpus = input("paths.corpus", rc.paths.corpus.as_ref())?;
    let splits = if need_splits {
        Some(input("paths.splits", rc.paths.splits.as_ref())?)
    } else {
        rc.paths.splits.as_ref().filter(|p| p.is_file()).cloned()
    };
    match splits {
        Some(s) => load_corpus(&corpus, &s, max_len),
        None => read_corpus(&corpus, max_len),
    }
}

fn of_split(stories: &[Story], split: Split) -> Vec<Story> {
    stories.iter().filter(|s| s.split == Some(split)).cloned().collect()
}

pub fn preprocess(data: &DataArgs, min_count: usize) -> Result<()> {
    let rc = run_config(data)?;
    let out = rc.out_dir();
    output_dir(&out)?;
    let all = stories(&rc, rc.model.max_len, false)?;
    let train: Vec<&Story> = all.iter().filter(|s| s.split.is_none_or(|x| x == Split::Train)).collect();
    let vocab = Vocabulary::from_stories(train.iter().copied(), min_count);

    let mut lines = String::new();
    for s in &all {
        lines.push_str(&serde_json::to_string(s).expect("story serializes"));
        lines.push('\n');
    }
    write_file(&out.join("stories.jsonl"), lines)?;
    let tokens: Vec<String> = vocab.clone().into();
    write_file(&out.join("vocab.txt"), tokens.join("\n") + "\n")?;

    let (tr, dv, te) = split_counts(&all);
    let mut tags = BTreeMap::new();
    for t in all.iter().flat_map(|s| &s.element_tags) {
        *tags.entry(t.name()).or_insert(0usize) += 1;
    }
    let summary = serde_json::json!({
        "stories": all.len(),
        "tokens": all.iter().map(Story::len).sum::<usize>(),
        "splits": {"train": tr, "dev": dv, "test": te},
        "vocabulary": vocab.len(),
        "element_tags": tags,
    });
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap() + "\n")?;
    println!("{}", serde_json::to_string(&summary).unwrap());
    Ok(())
}

pub fn train(
    data: &DataArgs,
    variant: Option<Variant>,
    seed: Option<u64>,
    epochs: Option<usize>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let mut rc = run_config(data)?;
    if let Some(v) = variant {
        rc.model.variant = v;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    if let Some(e) = epochs {
        rc.train.epochs = e;
    }
    if let Some(c) = checkpoint {
        rc.paths.checkpoint = Some(c);
    }
    rc.model = rc.model.clone().validated()?;
    rc.train.validate()?;
    input("paths.corpus", rc.paths.corpus.as_ref())?;
    input("paths.splits", rc.paths.splits.as_ref())?;
    let vectors = optional_input("paths.vectors", rc.paths.vectors.as_ref())?;
    let out = rc.out_dir();
    let ckpt = rc.checkpoint();
    output_dir(&out)?;
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        output_dir(parent)?;
    }

    let all = stories(&rc, rc.model.max_len, true)?;
    let train_set = of_split(&all, Split::Train);
    let dev = of_split(&all, Split::Dev);
    let (vocab, table) = match &vectors {
        Some(p) => {
            let (t, v) = load_word_vectors(p, rc.model.word_dim)?;
            (v, Some(t))
        }
        None => (Vocabulary::from_stories(&train_set, 1), None),
    };
    let model = Model::new(rc.model.clone(), vocab, table.as_ref(), rc.train.seed)?;
    info!(
        "{}: {} parameters, {} train / {} dev stories",
        rc.model.variant,
        model.params().numel(),
        train_set.len(),
        dev.len()
    );
    let outcome = run_training(model, &train_set, &dev, &rc.train, |r| {
        println!("{}", serde_json::to_string(r).expect("record serializes"));
    })?;

    save_checkpoint(&outcome.model, &ckpt)?;
    write_metric_log(&outcome.log, &out.join("metrics.jsonl"))?;
    write_file(&out.join("run.json"), serde_json::to_string_pretty(&rc).unwrap() + "\n")?;
    info!(
        "selected epoch {:?}; checkpoint {}",
        outcome.best_epoch,
        ckpt.display()
    );
    match outcome.aborted {
        Some(msg) => Err(Error::Numeric(format!("training aborted, last good model saved: {msg}"))),
        None => Ok(()),
    }
}

pub fn eval(data: &DataArgs, checkpoint: Option<PathBuf>, split: Split, include_absent: bool) -> Result<()> {
    let mut rc = run_config(data)?;
    if let Some(c) = checkpoint {
        rc.paths.checkpoint = Some(c);
    }
    let ckpt = input("paths.checkpoint", Some(&rc.checkpoint()))?;
    let out = rc.out_dir();
    output_dir(&out)?;
    let model = load_checkpoint(&ckpt, None)?;
    let all = stories(&rc, model.config().max_len, true)?;
    let selected = of_split(&all, split);
    if selected.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let policy = if include_absent { AbsentClasses::Include } else { AbsentClasses::Exclude };
    let report = evaluate(&model, &selected, policy)?;
    let label = format!("{}:{split}", model.config().variant);
    write_file(&out.join(format!("eval_{split}.jsonl")), report.to_jsonl(&label))?;
    let table = report.to_table();
    write_file(&out.join(format!("eval_{split}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

/// Consecutive tokens sharing a key-element type, as `(type, text)`.
fn spans(tokens: &[String], tags: &[ElementTag]) -> Vec<(ElementTag, String)> {
    let mut out: Vec<(ElementTag, String)> = Vec::new();
    let mut prev = ElementTag::None;
    for (tok, tag) in tokens.iter().zip(tags) {
        if *tag != ElementTag::None {
            match out.last_mut() {
                Some((t, text)) if *t == *tag && prev == *tag => {
                    text.push(' ');
                    text.push_str(tok);
                }
                _ => out.push((*tag, tok.clone())),
            }
        }
        prev = *tag;
    }
    out
}

pub fn predict(checkpoint: &Path, input_path: Option<&Path>) -> Result<()> {
    let ckpt = input("checkpoint", Some(&checkpoint.to_path_buf()))?;
    let text = match input_path.filter(|p| p.as_os_str() != "-") {
        Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(io_err(Path::new("<stdin>")))?;
            s
        }
    };
    let model = load_checkpoint(&ckpt, None)?;
    let story = story_from_text("input", &text, model.config().max_len)?;
    if story.is_empty() {
        return Err(Error::Data("input story has no tokens".into()));
    }
    let inf = model.infer(&story)?;
    let n = story.len().min(model.config().max_len);
    let tokens = &story.tokens[..n];
    let mut o = String::new();
    if let Some(tags) = &inf.prediction.tags {
        o.push_str("# elements\n");
        for (t, text) in spans(tokens, tags) {
            o.push_str(&format!("{t}\t{text}\n"));
        }
        o.push_str("# tags\n");
        for (tok, t) in tokens.iter().zip(tags) {
            o.push_str(&format!("{tok}\t{t}\n"));
        }
    }
    if !inf.prediction.classes.is_empty() {
        o.push_str("# labels\n");
        for (task, c) in &inf.prediction.classes {
            o.push_str(&format!("{task}\t{}\n", task.class_name(*c)));
        }
    }
    if let Some(w) = &inf.attention {
        o.push_str("# attention\n");
        o.push_str(&format_attention(w, tokens));
    }
    std::io::stdout()
        .write_all(o.as_bytes())
        .map_err(io_err(Path::new("<stdout>")))
}

pub fn analyze(
    data: &DataArgs,
    checkpoint: Option<PathBuf>,
    split: Option<Split>,
    exclude_unspecified: Option<bool>,
    yates: bool,
) -> Result<()> {
    let rc = run_config(data)?;
    let ckpt = optional_input("checkpoint", checkpoint.as_ref())?;
    let out = rc.out_dir();
    output_dir(&out)?;
    let model = ckpt.as_deref().map(|p| load_checkpoint(p, None)).transpose()?;
    let max_len = model.as_ref().map_or(rc.model.max_len, |m| m.config().max_len);
    let mut pool = stories(&rc, max_len, split.is_some())?;
    if let Some(s) = split {
        pool = of_split(&pool, s);
    }
    if pool.is_empty() {
        return Err(Error::Data("no stories to analyze".into()));
    }
    let source = match &model {
        Some(m) => {
            pool = pool
                .iter()
                .map(|s| Ok(with_predictions(s, &m.infer(s)?.prediction)))
                .collect::<Result<_>>()?;
            LabelSource::Predicted
        }
        None => LabelSource::Gold,
    };
    let modes = match exclude_unspecified {
        Some(x) => vec![x],
        None => vec![true, false],
    };
    let mut analyses = Vec::new();
    for m in modes {
        analyses.extend(standard_analyses(&pool, source, m, yates));
    }
    let manifest = emit_report(&analyses, &out)?;
    for a in &analyses {
        if let Analysis::Independence { test, skipped, .. } = a {
            match (test, skipped) {
                (Some(t), _) => println!(
                    "{}\tchi2={:.4}\tdf={}\tp={:.4e}\t{}{}",
                    a.name(),
                    t.statistic,
                    t.df,
                    t.p_value,
                    if t.significant { "significant" } else { "-" },
                    if t.low_count_cells > 0 { "\tlow-count" } else { "" }
                ),
                (None, Some(why)) => println!("{}\tuntested\t{why}", a.name()),
                _ => {}
            }
        }
    }
    info!("{} analyses written to {}", manifest.analyses.len(), out.display());
    Ok(())
}

/// Draws tried per requested run before giving up on finding points away
/// from pooling ties.
const TIE_RETRIES: usize = 10;

pub fn gradcheck(variant: Option<Variant>, runs: usize, seed: u64) -> Result<()> {
    let story = synth::probe_story();
    let vocab = Vocabulary::from_stories([&story], 1);
    let variants = variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for v in variants {
        let mut accepted = 0;
        let mut draw = 0u64;
        while accepted < runs {
            if draw as usize >= runs * TIE_RETRIES {
                return Err(Error::Numeric(format!(
                    "{v}: fewer than {runs} draws away from pooling ties"
                )));
            }
            let at = seed + draw;
            draw += 1;
            let model = Model::new(ModelConfig::small(v), vocab.clone(), None, at)?;
            let margin = model.pool_margin(&story, at)?;
            if margin < DEFAULT_EPS {
                println!("{v}\tseed {at}\tpool_margin {margin:.3e}\ttie");
                continue;
            }
            accepted += 1;
            let report = model.check_gradients(&story, at, DEFAULT_EPS)?;
            let ok = report.max_error < GRAD_TOLERANCE;
            if !ok {
                failures += 1;
                let (name, err) = report
                    .per_param
                    .iter()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .cloned()
                    .unwrap_or_default();
                warn!("{v} seed {at}: worst parameter {name} ({err:.3e})");
            }
            println!(
                "{v}\tseed {at}\tmax_rel_error {:.3e}\t{}",
                report.max_error,
                if ok { "ok" } else { "FAIL" }
            );
            worst = worst.max(report.max_error);
        }
    }
    println!("max\t{worst:.3e}");
    if failures > 0 {
        return Err(Error::Numeric(format!(
            "{failures} gradient check(s) at or above {GRAD_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `<story-id> <label>`".into(),
            });
        };
        if out.insert(id.to_string(), label.to_string()).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("story {id:?} labelled twice"),
            });
        }
    }
    Ok(out)
}

pub fn kappa(first: &Path, second: &Path) -> Result<()> {
    let a = read_labels(&input("first", Some(&first.to_path_buf()))?)?;
    let b = read_labels(&input("second", Some(&second.to_path_buf()))?)?;
    if let Some(id) = a.keys().find(|k| !b.contains_key(*k)).or_else(|| b.keys().find(|k| !a.contains_key(*k))) {
        return Err(Error::Data(format!("story {id:?} is labelled in only one file")));
    }
    let la: Vec<&String> = a.values().collect();
    let lb: Vec<&String> = b.values().collect();
    let k = cohens_kappa(&la, &lb)?;
    let agree = la.iter().zip(&lb).filter(|(x, y)| x == y).count();
    println!("kappa\t{k:.6}\nstories\t{}\nagreement\t{:.6}", la.len(), agree as f64 / la.len() as f64);
    Ok(())
}
