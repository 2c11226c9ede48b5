use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use descry_core::embedding::{FileBackend, HttpBackend, PlantSet, SyntheticBackend};
use descry_core::{AggregationMode, Catalog, EmbeddingBackend, InferenceConfig, NoFindingRule, PromptStyle};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SYNTHETIC_DIMENSION: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(into = "String")]
pub enum BackendSpec {
    /// One store holding both prompts and images, or a text store and an
    /// image store.
    File { text: PathBuf, images: Option<PathBuf> },
    Http(String),
    Synthetic { seed: u64, dimension: usize },
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scheme, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("backend {s:?} must look like file:PATH, http:URL or synthetic:SEED[:DIM]"))?;
        match scheme {
            "file" => {
                let mut parts = rest.splitn(2, ',');
                let text = parts.next().filter(|p| !p.is_empty()).ok_or("file backend needs a path")?;
                Ok(BackendSpec::File {
                    text: text.into(),
                    images: parts.next().map(PathBuf::from),
                })
            }
            "http" | "https" => {
                let url = if rest.starts_with("//") { s.to_string() } else { rest.to_string() };
                if url.is_empty() {
                    return Err("http backend needs a URL".into());
                }
                Ok(BackendSpec::Http(url))
            }
            "synthetic" => {
                let (seed, dim) = match rest.split_once(':') {
                    Some((seed, dim)) => (seed, Some(dim)),
                    None => (rest, None),
                };
                let seed = seed.parse().map_err(|_| format!("bad synthetic seed {seed:?}"))?;
                let dimension = match dim {
                    Some(d) => d.parse().ok().filter(|&d| d > 0).ok_or_else(|| format!("bad synthetic dimension {d:?}"))?,
                    None => DEFAULT_SYNTHETIC_DIMENSION,
                };
                Ok(BackendSpec::Synthetic { seed, dimension })
            }
            other => Err(format!("unknown backend scheme {other:?}")),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::File { text, images: None } => write!(f, "file:{}", text.display()),
            BackendSpec::File { text, images: Some(i) } => write!(f, "file:{},{}", text.display(), i.display()),
            BackendSpec::Http(url) => write!(f, "http:{url}"),
            BackendSpec::Synthetic { seed, dimension } => write!(f, "synthetic:{seed}:{dimension}"),
        }
    }
}

impl From<BackendSpec> for String {
    fn from(spec: BackendSpec) -> String {
        spec.to_string()
    }
}

/// Flags shared by every command. All are optional so that a config file can
/// fill the gaps.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// Config file (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Catalog file, or a built-in name: refined, chatgpt-raw, chestxray14-refined.
    #[arg(long, global = true)]
    pub catalog: Option<String>,
    /// file:PATH[,IMAGES] | http:URL | synthetic:SEED[:DIM]
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Plant file for the synthetic backend.
    #[arg(long, global = true)]
    pub plants: Option<PathBuf>,
    /// pathology-based | basic | contrastive | pathology-indication | report-style
    #[arg(long, global = true)]
    pub style: Option<PromptStyle>,
    /// How views of a study combine: single-frontal | mean | max
    #[arg(long, global = true)]
    pub mode: Option<AggregationMode>,
    /// Softmax temperature for positive/negative prompt pairs.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// How No Finding is derived from the other pathologies: max | product
    #[arg(long = "no-finding", global = true)]
    pub no_finding: Option<NoFindingRule>,
    /// Worker threads for study processing. Defaults to available processors.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    catalog: Option<String>,
    backend: Option<String>,
    plants: Option<PathBuf>,
    style: Option<PromptStyle>,
    mode: Option<AggregationMode>,
    temperature: Option<f64>,
    no_finding: Option<NoFindingRule>,
    jobs: Option<usize>,
}

/// Fully resolved settings of one run, echoed into every output.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub catalog: String,
    pub catalog_fingerprint: String,
    pub backend: Option<BackendSpec>,
    pub plants: Option<PathBuf>,
    pub style: PromptStyle,
    pub mode: AggregationMode,
    pub temperature: f64,
    pub no_finding: NoFindingRule,
    pub jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

pub struct Resolved {
    pub run: RunConfig,
    pub catalog: Catalog,
}

fn load_named_catalog(name: &str) -> Result<Catalog, CliError> {
    match name {
        "refined" => Ok(Catalog::refined()),
        "chatgpt-raw" => Ok(Catalog::chatgpt_raw()),
        "chestxray14-refined" => Ok(Catalog::chestxray14_refined()),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("cannot read catalog {path}: {e}")))?;
            Ok(descry_core::load_catalog(&text)?)
        }
    }
}

pub fn read_input(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {what} {}: {e}", path.display())))
}

impl RunArgs {
    /// Merge flags over the config file over defaults.
    pub fn resolve(&self, labels: Option<PathBuf>, out: Option<PathBuf>) -> Result<Resolved, CliError> {
        let file: FileConfig = match &self.config {
            Some(path) => toml::from_str(&read_input(path, "config")?)
                .map_err(|e| CliError::input(format!("invalid config {}: {e}", path.display())))?,
            None => FileConfig::default(),
        };
        let defaults = InferenceConfig::default();
        let catalog_name = self.catalog.clone().or(file.catalog).unwrap_or_else(|| "refined".into());
        let catalog = load_named_catalog(&catalog_name)?;
        let backend = self
            .backend
            .clone()
            .or(file.backend)
            .map(|s| s.parse::<BackendSpec>().map_err(CliError::input))
            .transpose()?;
        let temperature = self.temperature.or(file.temperature).unwrap_or(defaults.temperature);
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(CliError::input(format!("temperature must be positive, got {temperature}")));
        }
        let jobs = self.jobs.or(file.jobs);
        if jobs == Some(0) {
            return Err(CliError::input("--jobs must be at least 1"));
        }
        let run = RunConfig {
            catalog: catalog_name,
            catalog_fingerprint: catalog.fingerprint(),
            backend,
            plants: self.plants.clone().or(file.plants),
            style: self.style.or(file.style).unwrap_or(defaults.style),
            mode: self.mode.or(file.mode).unwrap_or(defaults.mode),
            temperature,
            no_finding: self.no_finding.or(file.no_finding).unwrap_or(defaults.no_finding),
            jobs,
            labels,
            out,
        };
        Ok(Resolved { run, catalog })
    }
}

impl RunConfig {
    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            style: self.style,
            temperature: self.temperature,
            mode: self.mode,
            no_finding: self.no_finding,
        }
    }

    pub fn backend(&self) -> Result<Box<dyn EmbeddingBackend>, CliError> {
        let spec = self
            .backend
            .as_ref()
            .ok_or_else(|| CliError::input("no backend given; pass --backend or set it in the config file"))?;
        if self.plants.is_some() && !matches!(spec, BackendSpec::Synthetic { .. }) {
            return Err(CliError::input("--plants only applies to the synthetic backend"));
        }
        Ok(match spec {
            BackendSpec::File { text, images: None } => Box::new(FileBackend::open(text)?),
            BackendSpec::File { text, images: Some(images) } => Box::new(FileBackend::open_pair(text, images)?),
            BackendSpec::Http(url) => Box::new(HttpBackend::new(url)),
            BackendSpec::Synthetic { seed, dimension } => {
                let mut backend = SyntheticBackend::new(*seed, *dimension);
                if let Some(path) = &self.plants {
                    let plants: PlantSet = serde_json::from_str(&read_input(path, "plant file")?)
                        .map_err(|e| CliError::input(format!("invalid plant file {}: {e}", path.display())))?;
                    backend = backend.with_plants(plants);
                }
                Box::new(backend)
            }
        })
    }

    /// Run `f` on a thread pool sized by `jobs`.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(jobs) = self.jobs {
            builder = builder.num_threads(jobs);
        }
        let pool = builder
            .build()
            .map_err(|e| CliError::input(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}
