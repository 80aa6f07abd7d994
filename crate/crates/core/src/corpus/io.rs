use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{lsd, Corpus, CorpusError, CorpusMeta, KeySet, TokenRecord};

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: CorpusMeta,
}

fn malformed(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Malformed { line, message: message.into() }
}

fn check_record(r: &TokenRecord, line: usize, last_index: &mut HashMap<String, u64>) -> Result<(), CorpusError> {
    for (name, v) in [("logprob_long", r.logprob_long), ("logprob_short", r.logprob_short)] {
        if !v.is_finite() || v > 0.0 {
            return Err(malformed(line, format!("{name} = {v} must be finite and <= 0")));
        }
    }
    if let Some(m) = r.attention_mass {
        if !m.is_finite() || m < 0.0 {
            return Err(malformed(line, format!("attention_mass = {m} must be finite and >= 0")));
        }
    }
    if let Some(&prev) = last_index.get(&r.doc_id) {
        if r.index <= prev {
            return Err(malformed(
                line,
                format!("index {} in doc {:?} does not follow {prev}", r.index, r.doc_id),
            ));
        }
    }
    last_index.insert(r.doc_id.clone(), r.index);
    Ok(())
}

/// Reads a JSONL corpus: a `{"meta": {...}}` header line, then one token record
/// per line. Blank lines are ignored; anything else that fails to parse or
/// validate aborts with its 1-based line number.
pub fn read_corpus(reader: impl Read) -> Result<Corpus, CorpusError> {
    let mut meta = None;
    let mut records = Vec::new();
    let mut last_index = HashMap::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if meta.is_none() {
            let header: MetaLine =
                serde_json::from_str(&line).map_err(|_| CorpusError::MissingMeta { line: line_no })?;
            if header.meta.log_base != "e" {
                return Err(CorpusError::UnsupportedLogBase { found: header.meta.log_base });
            }
            meta = Some(header.meta);
            continue;
        }
        let record: TokenRecord = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        check_record(&record, line_no, &mut last_index)?;
        records.push(record);
    }
    let meta = meta.ok_or(CorpusError::MissingMeta { line: 1 })?;
    Ok(Corpus { meta, records })
}

pub fn read_corpus_file(path: &Path) -> Result<Corpus, CorpusError> {
    read_corpus(File::open(path)?)
}

pub fn write_corpus(mut writer: impl Write, corpus: &Corpus) -> Result<(), CorpusError> {
    let header = MetaLine { meta: corpus.meta.clone() };
    writeln!(writer, "{}", serde_json::to_string(&header).map_err(std::io::Error::other)?)?;
    for r in &corpus.records {
        writeln!(writer, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TokenRow<'a> {
    doc_id: &'a str,
    index: u64,
    lsd: f64,
    is_key: bool,
}

/// Per-token CSV table with columns `doc_id,index,lsd,is_key`.
pub fn write_token_table(writer: impl Write, records: &[TokenRecord], keys: &KeySet) -> Result<(), CorpusError> {
    let mut csv = csv::Writer::from_writer(writer);
    for r in records {
        csv.serialize(TokenRow { doc_id: &r.doc_id, index: r.index, lsd: lsd(r), is_key: keys.contains(r) })?;
    }
    csv.flush()?;
    Ok(())
}
