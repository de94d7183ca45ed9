//! Build the JSON pipeline report (codebook, bitrate, leakage sweep, purity)
//! and validate it against the published schema.
//!
//! ```text
//! cargo run --release --example pipeline_report > report.json
//! ```

use vectok::bpe::{train_bpe, BpeTrainParams};
use vectok::eval::{pipeline_report, validate_report, ReportConfig, REPORT_SCHEMA};
use vectok::featureio::generate_synthetic_corpus;
use vectok::normalizer::normalize;
use vectok::quantizer::{tokenize, train_kmeans, KMeansParams};
use vectok::{FeatureMatrix, SyntheticCorpusSpec, TokenSequence};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default())?;
    let normalized: Vec<FeatureMatrix> = corpus.records.iter().map(|r| normalize(&r.features).map(|(m, _)| m)).collect::<Result<_, _>>()?;
    let codebook = train_kmeans(&normalized, &KMeansParams { k: 300, ..KMeansParams::default() })?;
    let tokens: Vec<TokenSequence> = normalized.iter().map(|m| tokenize(m, &codebook)).collect::<Result<_, _>>()?;
    let bpe = train_bpe(&tokens, &BpeTrainParams::default())?;

    let report = pipeline_report(&corpus.records, &codebook, &bpe, Some(&corpus.content_units), &ReportConfig::default())?;
    let doc = serde_json::to_value(&report)?;
    validate_report(&doc)?;
    eprintln!("report validates against a {}-byte schema", REPORT_SCHEMA.len());
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}
