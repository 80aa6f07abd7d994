use std::fs;
use std::path::{Path, PathBuf};

use keytoken_core::ensemble::EnsembleError;
use keytoken_core::model::ModelError;
use keytoken_core::simulator::SimError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Cli, CliError, Command, Format};

pub const TOOL: &str = "keytoken-lab";
pub const DEFAULT_OUT: &str = "out";

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

/// Global fields plus the command's parameters.
///
/// The output directory is accepted in the file but never written to a
/// manifest, so replays into another directory produce identical manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig<P> {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    pub params: P,
}

impl<P> RunConfig<P> {
    pub fn wants(&self, format: Format) -> bool {
        self.formats.contains(&format)
    }
}

pub struct Loaded<P> {
    pub config: RunConfig<P>,
    /// Directory of the config file; relative input paths resolve against it.
    pub base_dir: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, P> {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: &'static str,
    pub config: &'a RunConfig<P>,
    pub artifacts: Vec<String>,
}

impl<'a, P> Manifest<'a, P> {
    pub fn new(command: Command, config: &'a RunConfig<P>, artifacts: Vec<String>) -> Self {
        Manifest {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            core_version: keytoken_core::VERSION,
            command: command.name(),
            config,
            artifacts,
        }
    }
}

fn is_manifest(value: &Value) -> bool {
    value.get("tool").and_then(Value::as_str) == Some(TOOL) && value.get("config").is_some()
}

/// Reads a config file or manifest and applies the global flag overrides.
pub fn load<P: DeserializeOwned>(cli: &Cli) -> Result<Loaded<P>, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::config("--config", "a config file is required"))?;
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input { path: path.clone(), message: format!("invalid JSON: {e}") })?;

    let (value, prefix) = if is_manifest(&value) {
        let command = value.get("command").and_then(Value::as_str).unwrap_or_default();
        if command != cli.command.name() {
            return Err(CliError::config(
                "command",
                format!("manifest was written by `{command}`, not `{}`", cli.command.name()),
            ));
        }
        (value["config"].clone(), "config")
    } else {
        (value, "")
    };

    let mut config: RunConfig<P> = serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        CliError::config(join(prefix, if inner == "." { "" } else { &inner }), e.into_inner())
    })?;

    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    if !cli.formats.is_empty() {
        config.formats = cli.formats.clone();
    }
    config.formats.sort_unstable();
    config.formats.dedup();
    if config.formats.is_empty() {
        return Err(CliError::config("formats", "at least one output format is required"));
    }

    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base_dir })
}

pub fn out_dir<P>(config: &RunConfig<P>) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Makes `path` absolute relative to `base`.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    let joined = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    joined.canonicalize().unwrap_or(joined)
}

pub fn join(prefix: &str, field: &str) -> String {
    match (prefix.is_empty(), field.is_empty()) {
        (true, _) => field.to_string(),
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{field}"),
    }
}

fn model_field(e: &ModelError) -> Option<&'static str> {
    match e {
        ModelError::OutOfRange { field, .. } => Some(field),
        _ => None,
    }
}

/// Config error for a core validation failure under `prefix`.
pub fn model_error(prefix: &str, e: ModelError) -> CliError {
    CliError::config(join(prefix, model_field(&e).unwrap_or("")), e)
}

pub fn ensemble_error(prefix: &str, e: EnsembleError) -> CliError {
    let field = match &e {
        EnsembleError::OutOfRange { field, .. } => *field,
        _ => "",
    };
    CliError::config(join(prefix, field), e)
}

pub fn sim_error(prefix: &str, e: SimError) -> CliError {
    match e {
        SimError::Model(ModelError::ZeroLength) => CliError::config(join(prefix, "n"), ModelError::ZeroLength),
        SimError::Model(inner) => model_error(&join(prefix, "model"), inner),
        SimError::Ensemble(inner) => ensemble_error(prefix, inner),
        SimError::InvalidConfig { field, .. } => CliError::config(join(prefix, field), e),
        SimError::BudgetExceedsJunctions { .. } => CliError::config(join(prefix, "budget"), e),
        other => CliError::Runtime(other.to_string()),
    }
}
