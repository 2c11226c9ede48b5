use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use descry_core::ablation::{comparison_table, dedup_in_order, predict_studies, run_ablation};
use descry_core::catalog::prompt_plan;
use descry_core::embedding::{Embedding, ImageRef, StoreWriter};
use descry_core::eval::evaluate;
use descry_core::fixture::{generate_fixture, FixtureSpec};
use descry_core::inference::{Diagnoser, StudyPrediction};
use descry_core::nb::{FeatureSet, NbModel};
use descry_core::{load_label_table, AggregationMode, LabelTable, PromptStyle};
use serde::Serialize;

use crate::config::{read_input, Resolved, RunArgs, RunConfig};
use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "descry", version, about = "Zero-shot chest X-ray diagnosis from descriptor prompts")]
pub struct Cli {
    #[command(flatten)]
    pub run: RunArgs,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Diagnose one study from its images and explain the result.
    Diagnose {
        /// Image paths of a single study.
        #[arg(required = true)]
        images: Vec<String>,
        /// Probability above which a pathology is listed in the summary.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Number of descriptors shown per listed pathology.
        #[arg(long, default_value_t = 3)]
        top: usize,
        /// Write the full explanation report (JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-pathology and macro AUROC against a label table.
    Evaluate {
        /// Label CSV (Path or Study column plus one column per pathology).
        #[arg(long)]
        labels: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare prompt styles and aggregation modes.
    Ablate {
        /// Label CSV (Path or Study column plus one column per pathology).
        #[arg(long)]
        labels: PathBuf,
        /// Styles to compare. Defaults to all five.
        #[arg(long, value_delimiter = ',')]
        styles: Vec<PromptStyle>,
        /// Aggregation modes to compare. Defaults to mean.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<AggregationMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a naive Bayes head on descriptor probabilities.
    NbTrain {
        /// Label CSV (Path or Study column plus one column per pathology).
        #[arg(long)]
        labels: PathBuf,
        /// Descriptors used per pathology: its own (own) or every one in the catalog (all).
        #[arg(long, default_value = "own", value_parser = parse_feature_set)]
        feature_set: FeatureSet,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained naive Bayes head.
    NbEval {
        /// Model file written by nb-train.
        #[arg(long)]
        model: PathBuf,
        /// Label CSV (Path or Study column plus one column per pathology).
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precompute embeddings into a store file.
    Cache {
        /// File with one prompt per line.
        #[arg(long, conflicts_with_all = ["images", "plan"])]
        texts: Option<PathBuf>,
        /// File with one image path per line.
        #[arg(long, conflicts_with = "plan")]
        images: Option<PathBuf>,
        /// Cache every prompt of the catalog in the chosen style, or in all
        /// styles with `--all-styles`.
        #[arg(long)]
        plan: bool,
        #[arg(long, requires = "plan")]
        all_styles: bool,
        /// Store dimension when the backend cannot report it and the input is empty.
        #[arg(long)]
        dimension: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a planted synthetic dataset (labels, plants, catalog).
    Fixture {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        studies: usize,
        #[arg(long, default_value_t = 512)]
        dimension: usize,
        /// Weight of planted prompts in image vectors.
        #[arg(long)]
        alpha: Option<f64>,
        /// Weight of the direction shared by all prompt vectors.
        #[arg(long)]
        shared_text_weight: Option<f64>,
        /// Spread of per-image offsets along the shared direction.
        #[arg(long)]
        affinity_spread: Option<f64>,
    },
}

fn parse_feature_set(s: &str) -> Result<FeatureSet, String> {
    match s {
        "own" => Ok(FeatureSet::Own),
        "all" => Ok(FeatureSet::All),
        _ => Err(format!("unknown feature set {s:?} (expected own or all)")),
    }
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    run_config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, run: &RunConfig, body: T) -> Result<(), CliError> {
    let doc = Document { run_config: run, body };
    let mut text = serde_json::to_string_pretty(&doc).expect("output serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn load_labels(resolved: &Resolved, path: &Path) -> Result<LabelTable, CliError> {
    let table = load_label_table(&read_input(path, "labels")?, &resolved.catalog)?;
    if table.studies.is_empty() {
        return Err(CliError::input(format!("label table {} has no studies", path.display())));
    }
    Ok(table)
}

fn predictions(resolved: &Resolved, table: &LabelTable) -> Result<Vec<StudyPrediction>, CliError> {
    let run = &resolved.run;
    let backend = run.backend()?;
    Ok(run.in_pool(|| predict_studies(table, &resolved.catalog, run.inference(), &backend))??)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let args = cli.run;
    match cli.command {
        Command::Diagnose {
            images,
            threshold,
            top,
            out,
        } => {
            let resolved = args.resolve(None, out.clone())?;
            diagnose(&resolved, &images, threshold, top)
        }
        Command::Evaluate { labels, out } => {
            let resolved = args.resolve(Some(labels.clone()), out.clone())?;
            let table = load_labels(&resolved, &labels)?;
            let predictions = predictions(&resolved, &table)?;
            let report = evaluate(&table, &predictions, &resolved.catalog.name, resolved.run.temperature)?;
            print!("{}", report.to_table());
            if let Some(out) = &out {
                write_json(out, &resolved.run, serde_json::json!({ "report": report }))?;
            }
            Ok(())
        }
        Command::Ablate {
            labels,
            mut styles,
            mut modes,
            out,
        } => {
            let resolved = args.resolve(Some(labels.clone()), out.clone())?;
            let table = load_labels(&resolved, &labels)?;
            if styles.is_empty() {
                styles = PromptStyle::ALL.to_vec();
            }
            if modes.is_empty() {
                modes = vec![AggregationMode::Mean];
            }
            for dup in dedup_in_order(&mut styles) {
                log::warn!("style {dup} listed more than once; running it once");
            }
            for dup in dedup_in_order(&mut modes) {
                log::warn!("mode {dup} listed more than once; running it once");
            }
            let run = &resolved.run;
            let backend = run.backend()?;
            let reports = run.in_pool(|| {
                run_ablation(&table, &resolved.catalog, &backend, &styles, &modes, run.inference())
            })??;
            print!("{}", comparison_table(&reports));
            if let Some(out) = &out {
                write_json(out, run, serde_json::json!({ "reports": reports }))?;
            }
            Ok(())
        }
        Command::NbTrain {
            labels,
            feature_set,
            out,
        } => {
            let resolved = args.resolve(Some(labels.clone()), Some(out.clone()))?;
            let table = load_labels(&resolved, &labels)?;
            check_descriptor_style(&resolved)?;
            let predictions = predictions(&resolved, &table)?;
            let mut model = NbModel::train(&resolved.catalog, &table, &predictions, feature_set)?;
            if model.pathologies.is_empty() {
                return Err(CliError::consistency("no pathology has both positive and negative labels"));
            }
            model.run_config = Some(serde_json::to_value(&resolved.run).expect("config serializes"));
            model.save(&out)?;
            for p in &model.pathologies {
                println!("trained {} ({} features)", p.name, p.model.features.len());
            }
            Ok(())
        }
        Command::NbEval { model, labels, out } => {
            let resolved = args.resolve(Some(labels.clone()), out.clone())?;
            let model = NbModel::load(&model, &resolved.catalog)?;
            check_descriptor_style(&resolved)?;
            let table = load_labels(&resolved, &labels)?;
            let predictions = predictions(&resolved, &table)?;
            let report = model.evaluate(&resolved.catalog, &table, &predictions)?;
            print!("{}", report.to_table());
            if let Some(out) = &out {
                write_json(out, &resolved.run, serde_json::json!({ "report": report }))?;
            }
            Ok(())
        }
        Command::Cache {
            texts,
            images,
            plan,
            all_styles,
            dimension,
            out,
        } => {
            let resolved = args.resolve(None, Some(out.clone()))?;
            cache(&resolved, texts, images, plan, all_styles, dimension, &out)
        }
        Command::Fixture {
            out,
            seed,
            studies,
            dimension,
            alpha,
            shared_text_weight,
            affinity_spread,
        } => {
            let resolved = args.resolve(None, Some(out.clone()))?;
            if studies == 0 || dimension == 0 {
                return Err(CliError::input("--studies and --dimension must be positive"));
            }
            let defaults = FixtureSpec::default();
            let spec = FixtureSpec {
                seed,
                studies,
                dimension,
                alpha: alpha.unwrap_or(defaults.alpha),
                shared_text_weight: shared_text_weight.unwrap_or(defaults.shared_text_weight),
                affinity_spread: affinity_spread.unwrap_or(defaults.affinity_spread),
                ..defaults
            };
            if !(0.0..=1.0).contains(&spec.alpha)
                || !(0.0..1.0).contains(&spec.shared_text_weight)
                || !(spec.affinity_spread.is_finite() && spec.affinity_spread >= 0.0)
            {
                return Err(CliError::input(
                    "need alpha in [0, 1], shared text weight in [0, 1) and a non-negative spread",
                ));
            }
            let fixture = generate_fixture(&resolved.catalog, spec)?;
            fs::create_dir_all(&out)
                .map_err(|e| CliError::input(format!("cannot create {}: {e}", out.display())))?;
            let write = |name: &str, text: String| {
                let path = out.join(name);
                fs::write(&path, text).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
            };
            write("labels.csv", fixture.table.to_csv())?;
            write("plants.json", fixture.plants_json())?;
            write("catalog.toml", fixture.catalog.to_document()?)?;
            println!(
                "wrote {} studies; use --catalog {} --backend synthetic:{seed}:{dimension} --plants {}",
                studies,
                out.join("catalog.toml").display(),
                out.join("plants.json").display()
            );
            Ok(())
        }
    }
}

fn check_descriptor_style(resolved: &Resolved) -> Result<(), CliError> {
    if !resolved.run.style.uses_descriptors() {
        return Err(CliError::input(format!(
            "naive Bayes needs descriptor probabilities; style {} has none",
            resolved.run.style
        )));
    }
    Ok(())
}

fn diagnose(resolved: &Resolved, paths: &[String], threshold: f64, top: usize) -> Result<(), CliError> {
    let images: Vec<ImageRef> = paths.iter().map(|p| ImageRef::from_path(p)).collect();
    if images.iter().any(|i| i.study_id != images[0].study_id) {
        log::warn!("images come from different directories; treating them as one study");
    }
    let run = &resolved.run;
    let backend = run.backend()?;
    let diagnoser = Diagnoser::new(&resolved.catalog, run.inference(), &backend)?;
    let prediction = diagnoser.diagnose(&images)?;

    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "study {} ({}, {} prompts)",
        prediction.study_id,
        prediction.aggregation_label(),
        prediction.style
    );
    let mut listed: Vec<_> = prediction
        .pathologies
        .iter()
        .filter(|p| p.probability > threshold)
        .collect();
    listed.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    if listed.is_empty() {
        let _ = writeln!(out, "no pathology above {threshold}");
    }
    for p in listed {
        let _ = writeln!(out, "{:<36} {:.4}", p.name, p.probability);
        for d in p.descriptors.iter().take(top) {
            let _ = writeln!(out, "    {:<60} {:.4}", d.descriptor, d.probability);
        }
    }
    if let Some(path) = &run.out {
        write_json(path, run, serde_json::json!({ "prediction": prediction }))?;
    }
    Ok(())
}

fn cache(
    resolved: &Resolved,
    texts: Option<PathBuf>,
    images: Option<PathBuf>,
    plan: bool,
    all_styles: bool,
    dimension: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let lines = |path: &Path, what: &str| -> Result<Vec<String>, CliError> {
        Ok(read_input(path, what)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect())
    };
    let backend = resolved.run.backend()?;
    let (keys, embeddings): (Vec<String>, Vec<Embedding>) = if let Some(path) = images {
        let refs: Vec<ImageRef> = lines(&path, "image list")?.iter().map(|p| ImageRef::from_path(p)).collect();
        let mut seen = std::collections::HashSet::new();
        let refs: Vec<&ImageRef> = refs.iter().filter(|r| seen.insert(r.key())).collect();
        let embedded = backend.embed_images(&refs)?;
        (refs.iter().map(|r| r.key()).collect(), embedded)
    } else {
        let mut prompts = match (texts, plan) {
            (Some(path), _) => lines(&path, "prompt list")?,
            (None, true) => {
                let styles = if all_styles { PromptStyle::ALL.to_vec() } else { vec![resolved.run.style] };
                styles
                    .into_iter()
                    .flat_map(|s| prompt_plan(&resolved.catalog, s))
                    .flat_map(|p| std::iter::once(p.positive).chain(p.negative))
                    .collect()
            }
            (None, false) => return Err(CliError::input("cache needs --texts, --images or --plan")),
        };
        let mut seen = std::collections::HashSet::new();
        prompts.retain(|p| seen.insert(p.clone()));
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let embedded = backend.embed_texts(&refs)?;
        (prompts, embedded)
    };
    let dimension = embeddings
        .first()
        .map(Embedding::dimension)
        .or(backend.dimension())
        .or(dimension)
        .ok_or_else(|| CliError::input("empty input and unknown dimension; pass --dimension"))?;
    let mut writer = StoreWriter::new(dimension)?;
    for (key, e) in keys.iter().zip(&embeddings) {
        writer.push(key.clone(), e.as_slice())?;
    }
    fs::write(out, writer.to_bytes()).map_err(|e| CliError::input(format!("cannot write {}: {e}", out.display())))?;
    println!("cached {} embeddings of dimension {dimension} in {}", keys.len(), out.display());
    Ok(())
}
