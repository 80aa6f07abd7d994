//! Key-token metrics over per-token log-probability records.
//!
//! Each record carries the natural-log probability of a token under a long
//! context and under a truncated one. Their difference (LSD, in nats) marks
//! tokens that need distant context; those above a threshold are key tokens.
//! LongPPL is perplexity restricted to key tokens.

mod io;

pub use io::{read_corpus, read_corpus_file, write_corpus, write_token_table};

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Key-token share reported for natural documents at LSD > 2.
pub const REFERENCE_KEY_FRACTION: f64 = 0.09;

pub const DEFAULT_LSD_THRESHOLD: f64 = 2.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: expected a {{\"meta\": ...}} header line")]
    MissingMeta { line: usize },
    #[error("unsupported log base {found:?}; only \"e\" is accepted")]
    UnsupportedLogBase { found: String },
    #[error("no token records")]
    EmptyInput,
    #[error("key-token set is empty; LongPPL is undefined")]
    EmptyKeySet,
    #[error("attention masses: {0}")]
    Attention(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub doc_id: String,
    pub index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    pub logprob_long: f64,
    pub logprob_short: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub log_base: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_context_len: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub records: Vec<TokenRecord>,
}

/// Long-short difference in nats: how much the long context helps this token.
pub fn lsd(record: &TokenRecord) -> f64 {
    record.logprob_long - record.logprob_short
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocKeyTokens {
    pub doc_id: String,
    pub tokens: u64,
    pub key_indices: Vec<u64>,
    pub key_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyTokenReport {
    pub threshold: f64,
    pub docs: Vec<DocKeyTokens>,
    pub total_tokens: u64,
    pub key_tokens: u64,
    pub key_fraction: f64,
}

impl KeyTokenReport {
    pub fn key_set(&self) -> KeySet {
        KeySet(
            self.docs
                .iter()
                .flat_map(|d| d.key_indices.iter().map(move |&i| (d.doc_id.clone(), i)))
                .collect(),
        )
    }
}

/// Set of `(doc_id, index)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeySet(HashSet<(String, u64)>);

impl KeySet {
    pub fn all(records: &[TokenRecord]) -> KeySet {
        KeySet(records.iter().map(|r| (r.doc_id.clone(), r.index)).collect())
    }

    pub fn contains(&self, record: &TokenRecord) -> bool {
        self.0.contains(&(record.doc_id.clone(), record.index))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Groups records by document, in order of first appearance.
fn by_doc(records: &[TokenRecord]) -> Vec<(&str, Vec<&TokenRecord>)> {
    let mut order: Vec<(&str, Vec<&TokenRecord>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let i = *slot.entry(r.doc_id.as_str()).or_insert_with(|| {
            order.push((r.doc_id.as_str(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(r);
    }
    order
}

/// Marks tokens with `lsd > threshold` (strict) as key tokens.
pub fn classify_key(records: &[TokenRecord], threshold: f64) -> Result<KeyTokenReport, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let docs: Vec<DocKeyTokens> = by_doc(records)
        .into_iter()
        .map(|(doc_id, recs)| {
            let key_indices: Vec<u64> = recs.iter().filter(|r| lsd(r) > threshold).map(|r| r.index).collect();
            DocKeyTokens {
                doc_id: doc_id.to_string(),
                tokens: recs.len() as u64,
                key_fraction: key_indices.len() as f64 / recs.len() as f64,
                key_indices,
            }
        })
        .collect();
    let key_tokens: u64 = docs.iter().map(|d| d.key_indices.len() as u64).sum();
    let total_tokens = records.len() as u64;
    Ok(KeyTokenReport {
        threshold,
        docs,
        total_tokens,
        key_tokens,
        key_fraction: key_tokens as f64 / total_tokens as f64,
    })
}

fn perplexity<'a>(logprobs: impl Iterator<Item = &'a TokenRecord>) -> Option<(f64, u64)> {
    let (sum, count) = logprobs.fold((0.0f64, 0u64), |(s, c), r| (s + r.logprob_long, c + 1));
    (count > 0).then(|| ((-sum / count as f64).exp(), count))
}

/// Perplexity under the long context over the key tokens only.
pub fn long_ppl(records: &[TokenRecord], key_set: &KeySet) -> Result<f64, CorpusError> {
    if key_set.is_empty() {
        return Err(CorpusError::EmptyKeySet);
    }
    perplexity(records.iter().filter(|r| key_set.contains(r)))
        .map(|(ppl, _)| ppl)
        .ok_or(CorpusError::EmptyKeySet)
}

pub fn standard_ppl(records: &[TokenRecord]) -> Result<f64, CorpusError> {
    perplexity(records.iter()).map(|(ppl, _)| ppl).ok_or(CorpusError::EmptyInput)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub standard_ppl: f64,
    pub standard_tokens: u64,
    /// `None` when no token is key.
    pub long_ppl: Option<f64>,
    pub long_tokens: u64,
}

pub fn perplexity_report(records: &[TokenRecord], key_set: &KeySet) -> Result<PerplexityReport, CorpusError> {
    let (standard, standard_tokens) = perplexity(records.iter()).ok_or(CorpusError::EmptyInput)?;
    let long = perplexity(records.iter().filter(|r| key_set.contains(r)));
    Ok(PerplexityReport {
        standard_ppl: standard,
        standard_tokens,
        long_ppl: long.map(|(p, _)| p),
        long_tokens: long.map_or(0, |(_, c)| c),
    })
}

/// Share of total attention mass held by the `top_k` largest entries.
pub fn attention_concentration(masses: &[f64], top_k: usize) -> Result<f64, CorpusError> {
    if masses.is_empty() {
        return Err(CorpusError::Attention("no masses".into()));
    }
    if top_k == 0 {
        return Err(CorpusError::Attention("top_k must be at least 1".into()));
    }
    if let Some(bad) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(CorpusError::Attention(format!("mass {bad} is not a finite non-negative number")));
    }
    let total: f64 = masses.iter().sum();
    if total <= 0.0 {
        return Err(CorpusError::Attention("total mass is zero".into()));
    }
    let mut sorted = masses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top: f64 = sorted.iter().take(top_k).sum();
    Ok((top / total).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyFractionComparison {
    pub key_fraction: f64,
    pub reference: f64,
    pub deviation: f64,
}

/// Compares the corpus key fraction with the 9% natural-text reference. No verdict.
pub fn key_fraction_report(report: &KeyTokenReport) -> KeyFractionComparison {
    KeyFractionComparison {
        key_fraction: report.key_fraction,
        reference: REFERENCE_KEY_FRACTION,
        deviation: report.key_fraction - REFERENCE_KEY_FRACTION,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocAttention {
    pub doc_id: String,
    pub tokens: u64,
    pub top_k: u64,
    pub concentration: f64,
}

/// Attention concentration per document that carries masses on every token.
///
/// `top_k = None` uses the top 1% of the document's tokens (at least one).
pub fn document_attention(records: &[TokenRecord], top_k: Option<usize>) -> Result<Vec<DocAttention>, CorpusError> {
    let mut out = Vec::new();
    for (doc_id, recs) in by_doc(records) {
        let masses: Option<Vec<f64>> = recs.iter().map(|r| r.attention_mass).collect();
        let Some(masses) = masses else { continue };
        let k = top_k.unwrap_or_else(|| (masses.len() as f64 * 0.01).ceil().max(1.0) as usize);
        out.push(DocAttention {
            doc_id: doc_id.to_string(),
            tokens: masses.len() as u64,
            top_k: k as u64,
            concentration: attention_concentration(&masses, k)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(doc: &str, index: u64, long: f64, short: f64) -> TokenRecord {
        TokenRecord {
            doc_id: doc.into(),
            index,
            token: None,
            logprob_long: long,
            logprob_short: short,
            attention_mass: None,
        }
    }

    #[test]
    fn lsd_examples() {
        assert_eq!(lsd(&rec("d", 0, -0.5, -3.0)), 2.5);
        assert_eq!(lsd(&rec("d", 0, -1.25, -1.25)), 0.0);
        assert_eq!(lsd(&rec("d", 0, -2.0, -1.0)), -1.0);
    }

    #[test]
    fn classify_nine_percent_doc() {
        let records: Vec<_> = (0..100)
            .map(|i| if i % 11 == 5 && i < 99 { rec("a", i, -0.5, -3.0) } else { rec("a", i, -1.0, -1.0) })
            .collect();
        let report = classify_key(&records, DEFAULT_LSD_THRESHOLD).unwrap();
        assert_eq!(report.key_tokens, 9);
        assert_eq!(report.key_fraction, 0.09);
        assert_eq!(key_fraction_report(&report).deviation, 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        let records: Vec<_> = (0..10).map(|i| rec("a", i, -1.0, -3.0)).collect();
        assert_eq!(classify_key(&records, 2.0).unwrap().key_tokens, 0);
        assert_eq!(classify_key(&records, f64::NEG_INFINITY).unwrap().key_fraction, 1.0);
        assert!(matches!(classify_key(&[], 2.0), Err(CorpusError::EmptyInput)));
    }

    #[test]
    fn per_doc_fractions() {
        let records = vec![rec("a", 0, 0.0, -5.0), rec("b", 0, 0.0, 0.0), rec("a", 1, 0.0, 0.0), rec("b", 1, 0.0, 0.0)];
        let report = classify_key(&records, 2.0).unwrap();
        assert_eq!(report.docs.len(), 2);
        assert_eq!(report.docs[0].doc_id, "a");
        assert_eq!(report.docs[0].key_indices, vec![0]);
        assert_eq!(report.docs[0].key_fraction, 0.5);
        assert_eq!(report.docs[1].key_fraction, 0.0);
        assert_eq!(report.key_fraction, 0.25);
    }

    #[test]
    fn long_ppl_examples() {
        let one = vec![rec("a", 0, -1.0, -5.0), rec("a", 1, -0.1, -0.1)];
        let keys = classify_key(&one, 2.0).unwrap().key_set();
        assert!((long_ppl(&one, &keys).unwrap() - std::f64::consts::E).abs() < 1e-12);

        let two = vec![rec("a", 0, -1.0, -5.0), rec("a", 1, -3.0, -7.0)];
        let keys = classify_key(&two, 2.0).unwrap().key_set();
        assert!((long_ppl(&two, &keys).unwrap() - 2f64.exp()).abs() < 1e-12);
        assert!((long_ppl(&two, &KeySet::all(&two)).unwrap() - standard_ppl(&two).unwrap()).abs() < 1e-12);

        assert!(matches!(long_ppl(&two, &KeySet::default()), Err(CorpusError::EmptyKeySet)));
        assert!(matches!(standard_ppl(&[]), Err(CorpusError::EmptyInput)));
    }

    #[test]
    fn perplexity_report_without_keys() {
        let recs = vec![rec("a", 0, -1.0, -1.0)];
        let report = perplexity_report(&recs, &KeySet::default()).unwrap();
        assert_eq!(report.long_ppl, None);
        assert_eq!(report.long_tokens, 0);
        assert!((report.standard_ppl - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn attention_examples() {
        assert!((attention_concentration(&[1.0; 100], 10).unwrap() - 0.1).abs() < 1e-12);
        let mut one_hot = vec![0.0; 50];
        one_hot[7] = 3.0;
        assert_eq!(attention_concentration(&one_hot, 1).unwrap(), 1.0);
        assert!((attention_concentration(&[8.0, 1.0, 1.0], 1).unwrap() - 0.8).abs() < 1e-12);
        assert!(attention_concentration(&[0.0, 0.0], 1).is_err());
        assert!(attention_concentration(&[], 1).is_err());
        assert!(attention_concentration(&[1.0, -1.0], 1).is_err());
        assert!(attention_concentration(&[1.0], 0).is_err());
    }

    #[test]
    fn document_attention_default_top_k() {
        let mut records: Vec<_> = (0..200).map(|i| rec("a", i, -1.0, -1.0)).collect();
        for (i, r) in records.iter_mut().enumerate() {
            r.attention_mass = Some(if i < 2 { 49.0 } else { 2.0 / 198.0 });
        }
        records.push(rec("b", 0, -1.0, -1.0));
        let att = document_attention(&records, None).unwrap();
        assert_eq!(att.len(), 1);
        assert_eq!(att[0].top_k, 2);
        assert!((att[0].concentration - 0.98).abs() < 1e-12);
    }

    #[test]
    fn fraction_deviation() {
        let report = KeyTokenReport { threshold: 2.0, docs: vec![], total_tokens: 100, key_tokens: 15, key_fraction: 0.15 };
        let cmp = key_fraction_report(&report);
        assert_eq!(cmp.reference, 0.09);
        assert!((cmp.deviation - 0.06).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn lsd_antisymmetric(a in -50.0f64..0.0, b in -50.0f64..0.0) {
            prop_assert_eq!(lsd(&rec("d", 0, a, b)), -lsd(&rec("d", 0, b, a)));
        }

        #[test]
        fn raising_threshold_never_adds_keys(diffs in prop::collection::vec(-5.0f64..5.0, 1..200), t in -5.0f64..5.0, dt in 0.0f64..5.0) {
            let records: Vec<_> = diffs.iter().enumerate().map(|(i, d)| rec("d", i as u64, -10.0 + d.max(0.0), -10.0 - d.min(0.0))).collect();
            let lo = classify_key(&records, t).unwrap().key_fraction;
            let hi = classify_key(&records, t + dt).unwrap().key_fraction;
            prop_assert!(hi <= lo);
        }

        #[test]
        fn long_ppl_over_everything_is_standard(lps in prop::collection::vec(-20.0f64..0.0, 1..300)) {
            let records: Vec<_> = lps.iter().enumerate().map(|(i, &l)| rec("d", i as u64, l, l)).collect();
            let diff = (long_ppl(&records, &KeySet::all(&records)).unwrap() - standard_ppl(&records).unwrap()).abs();
            prop_assert!(diff <= 1e-12 * standard_ppl(&records).unwrap());
            prop_assert!(standard_ppl(&records).unwrap() >= 1.0);
        }

        #[test]
        fn concentration_monotone_in_top_k(masses in prop::collection::vec(0.0f64..10.0, 1..100), k in 1usize..100) {
            prop_assume!(masses.iter().sum::<f64>() > 0.0);
            let a = attention_concentration(&masses, k).unwrap();
            let b = attention_concentration(&masses, k + 1).unwrap();
            prop_assert!(b >= a);
            prop_assert!((attention_concentration(&masses, masses.len()).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
