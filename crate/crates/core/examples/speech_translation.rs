//! Token-to-token translation on a synthetic corpus whose target units are a
//! fixed permutation of the source units, rendered in a prompt's voice.
//!
//! ```text
//! cargo run --release --example speech_translation
//! ```

use vectok::bpe::BpeModel;
use vectok::featureio::{generate_translation_corpus, TranslationCorpusSpec, UnitMapping};
use vectok::neural::TrainConfig;
use vectok::seqlm::{s2st_pipeline, train_lm, ConditioningLayout, SampleConfig, SeqLm, SeqLmConfig};
use vectok::{Codebook, FeatureMatrix, SplitMix64, TokenSequence};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let units = 8;
    let spec = TranslationCorpusSpec { num_pairs: 450, num_units: units, min_len: 4, max_len: 10, mapping: UnitMapping::Permutation, seed: 5 };
    let corpus = generate_translation_corpus(&spec)?;
    println!("generator mapping: {:?}", corpus.mapping);
    let (train, test) = corpus.pairs.split_at(400);

    let layouts: Vec<ConditioningLayout> = train.iter().map(|(s, t)| ConditioningLayout::s2st(s.clone(), t.clone())).collect();
    let mut lm = SeqLm::new(SeqLmConfig { d_model: 32, heads: 2, layers: 2, ff: 64, ..SeqLmConfig::new(units, 0) })?;
    let cfg = TrainConfig { steps: 1500, learning_rate: 3e-3, cosine: true, warmup_steps: 50, batch_size: 16, ..TrainConfig::default() };
    let curve = train_lm(&mut lm, &layouts, &cfg)?;
    println!("training NLL {:.3} -> {:.5}", curve[0], curve.last().unwrap());

    // Codebook and prompt only shape the rendered vectors, not the tokens.
    let mut rng = SplitMix64::new(1);
    let centers: Vec<Vec<f64>> = (0..units).map(|_| (0..4).map(|_| rng.next_f64() * 2.0 - 1.0).collect()).collect();
    let codebook = Codebook::from_centers(&centers)?;
    let prompt = FeatureMatrix::from_rows(&[[3.0, 0.0, -1.0, 0.5]; 10])?;
    let bpe = BpeModel::identity(units);

    let mut exact = 0;
    for (i, (s, t)) in test.iter().enumerate() {
        let source = TokenSequence::new(s.clone(), units)?;
        let out = s2st_pipeline(&lm, &source, &bpe, &codebook, &prompt, &SampleConfig { seed: i as u64, n_candidates: 64, ..SampleConfig::default() })?;
        exact += usize::from(out.tokens.tokens() == t.as_slice());
        if i < 3 {
            println!("{s:?} -> {:?} (expected {t:?}); {} frames rendered", out.tokens.tokens(), out.features.frames());
        }
    }
    println!("held-out exact match: {exact}/{}", test.len());
    Ok(())
}
