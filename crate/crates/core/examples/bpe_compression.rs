//! Learn BPE merges over token streams and measure the bitrate saving.
//!
//! ```text
//! cargo run --example bpe_compression -- [vocab]
//! ```

use vectok::bpe::{bitrate_report, train_bpe, BpeTrainParams};
use vectok::eval::reference_operating_point;
use vectok::featureio::generate_synthetic_corpus;
use vectok::normalizer::normalize;
use vectok::quantizer::{tokenize, train_kmeans, KMeansParams};
use vectok::seqlm::context_seconds;
use vectok::{FeatureMatrix, SyntheticCorpusSpec, TokenSequence};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let vocab: u32 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1024);
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default())?;
    let normalized: Vec<FeatureMatrix> = corpus.records.iter().map(|r| normalize(&r.features).map(|(m, _)| m)).collect::<Result<_, _>>()?;
    let codebook = train_kmeans(&normalized, &KMeansParams { k: 300, ..KMeansParams::default() })?;
    let tokens: Vec<TokenSequence> = normalized.iter().map(|m| tokenize(m, &codebook)).collect::<Result<_, _>>()?;

    let bpe = train_bpe(&tokens, &BpeTrainParams { target_vocab_size: vocab, ..BpeTrainParams::default() })?;
    println!("learned {} merges (vocabulary {})", bpe.merges().len(), bpe.vocab_size());
    for m in bpe.merges().iter().take(5) {
        println!("  {} + {} -> {}  expands to {:?}", m.left, m.right, m.new_id, bpe.expansion(m.new_id).unwrap_or_default());
    }

    let stats = bitrate_report(&tokens, &bpe, 50.0)?;
    println!(
        "this corpus: {:.1} tok/s ({:.0} bit/s) -> {:.2} tok/s ({:.1} bit/s), ratio {:.3}",
        stats.tokens_per_sec_base, stats.bits_per_sec_base, stats.tokens_per_sec_bpe, stats.bits_per_sec_bpe, stats.compression_ratio
    );
    let op = reference_operating_point();
    println!(
        "reference operating point: {} bit/s -> {} bit/s, ratio {}",
        op.bits_per_sec_base, op.bits_per_sec_bpe, op.compression_ratio
    );
    println!(
        "a 2048-position context covers {:.1} s of base tokens and {:.1} s after BPE",
        context_seconds(2048, stats.tokens_per_sec_base),
        context_seconds(2048, stats.tokens_per_sec_bpe)
    );

    let encoded = bpe.encode(&tokens[0])?;
    assert_eq!(bpe.decode(&encoded)?, tokens[0]);
    println!("utterance 0: {} tokens -> {} BPE tokens, decodes back exactly", tokens[0].len(), encoded.len());
    Ok(())
}
