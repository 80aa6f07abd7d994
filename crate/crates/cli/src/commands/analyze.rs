use std::path::PathBuf;

use keytoken_core::corpus::{
    classify_key, document_attention, key_fraction_report, perplexity_report, read_corpus_file, write_token_table,
    CorpusError, CorpusMeta, DocAttention, KeyFractionComparison, PerplexityReport, DEFAULT_LSD_THRESHOLD,
};
use serde::{Deserialize, Serialize};

use super::{finish, ignore_trials};
use crate::config::{load, resolve};
use crate::output::Artifacts;
use crate::{Cli, CliError, Command, Format, RunSummary};

fn default_threshold() -> f64 {
    DEFAULT_LSD_THRESHOLD
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeParams {
    /// JSONL corpus; relative paths resolve against the config file.
    pub corpus: PathBuf,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Top-k for attention concentration; defaults to 1% of each document.
    #[serde(default)]
    pub attention_top_k: Option<usize>,
}

#[derive(Debug, Serialize)]
struct DocRow {
    doc_id: String,
    tokens: u64,
    key_tokens: u64,
    key_fraction: f64,
    attention_top_k: Option<u64>,
    attention_concentration: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    meta: &'a CorpusMeta,
    threshold: f64,
    total_tokens: u64,
    key_tokens: u64,
    key_fraction: KeyFractionComparison,
    perplexity: PerplexityReport,
    documents: &'a [DocRow],
}

pub fn run(cli: &Cli) -> Result<RunSummary, CliError> {
    ignore_trials(cli);
    let loaded = load::<AnalyzeParams>(cli)?;
    let mut config = loaded.config;
    let p = &mut config.params;
    if !p.threshold.is_finite() {
        return Err(CliError::config("params.threshold", "must be finite"));
    }
    if p.attention_top_k == Some(0) {
        return Err(CliError::config("params.attention_top_k", "must be at least 1"));
    }
    p.corpus = resolve(&loaded.base_dir, &p.corpus);
    let p = &config.params;

    let input = |e: CorpusError| CliError::Input { path: p.corpus.clone(), message: e.to_string() };
    let corpus = read_corpus_file(&p.corpus).map_err(|e| match e {
        CorpusError::Io(source) => CliError::Io { path: p.corpus.clone(), source },
        other => input(other),
    })?;
    let report = classify_key(&corpus.records, p.threshold).map_err(input)?;
    let keys = report.key_set();
    let perplexity = perplexity_report(&corpus.records, &keys).map_err(input)?;
    let attention = document_attention(&corpus.records, p.attention_top_k).map_err(input)?;

    let docs: Vec<DocRow> = report
        .docs
        .iter()
        .map(|d| {
            let att: Option<&DocAttention> = attention.iter().find(|a| a.doc_id == d.doc_id);
            DocRow {
                doc_id: d.doc_id.clone(),
                tokens: d.tokens,
                key_tokens: d.key_indices.len() as u64,
                key_fraction: d.key_fraction,
                attention_top_k: att.map(|a| a.top_k),
                attention_concentration: att.map(|a| a.concentration),
            }
        })
        .collect();

    let mut artifacts = Artifacts::default();
    if config.wants(Format::Csv) {
        let mut table = Vec::new();
        write_token_table(&mut table, &corpus.records, &keys).map_err(|e| CliError::Runtime(e.to_string()))?;
        artifacts.add("tokens.csv", table);
        artifacts.csv("documents.csv", &docs)?;
    }
    if config.wants(Format::Json) {
        let summary = Report {
            meta: &corpus.meta,
            threshold: p.threshold,
            total_tokens: report.total_tokens,
            key_tokens: report.key_tokens,
            key_fraction: key_fraction_report(&report),
            perplexity,
            documents: &docs,
        };
        artifacts.json("analyze.json", &summary)?;
    }
    finish(Command::Analyze, &config, artifacts)
}
