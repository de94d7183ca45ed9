//! Generate a synthetic corpus, normalize every utterance, train a k-means
//! codebook and tokenize.
//!
//! ```text
//! cargo run --example quantize_corpus -- [k]
//! ```

use vectok::eval::content_purity;
use vectok::featureio::generate_synthetic_corpus;
use vectok::normalizer::normalize;
use vectok::quantizer::{quantization_error, tokenize, train_kmeans_traced, KMeansParams};
use vectok::{FeatureMatrix, SyntheticCorpusSpec, TokenSequence};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(40);
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default())?;
    println!(
        "{} utterances, {} speakers, {} frames of dim {}",
        corpus.records.len(),
        corpus.speaker_offsets.len(),
        corpus.records.iter().map(|r| r.features.frames()).sum::<usize>(),
        corpus.records[0].features.dim()
    );

    let normalized: Vec<FeatureMatrix> = corpus.records.iter().map(|r| normalize(&r.features).map(|(m, _)| m)).collect::<Result<_, _>>()?;
    let run = train_kmeans_traced(&normalized, &KMeansParams { k, seed: 7, ..KMeansParams::default() })?;
    println!("k-means: {} iterations, inertia {:.1} -> {:.1}", run.inertia_history.len() - 1, run.inertia_history[0], run.inertia_history.last().unwrap());

    let tokens: Vec<TokenSequence> = normalized.iter().map(|m| tokenize(m, &run.codebook)).collect::<Result<_, _>>()?;
    let err: f64 = normalized.iter().map(|m| quantization_error(m, &run.codebook)).sum::<Result<f64, _>>()?;
    let frames: usize = normalized.iter().map(FeatureMatrix::frames).sum();
    println!("mean squared quantization error per frame: {:.4}", err / frames as f64);
    println!("cluster purity against the generator's content units: {:.3}", content_purity(&tokens, &corpus.content_units)?);
    println!("first utterance, first 20 tokens: {:?}", &tokens[0].tokens()[..20]);
    Ok(())
}
