//! Train the causal token LM on a few conditioned sequences, then draw 256
//! candidates and pick one with the likelihood re-scorer or a custom hook.
//!
//! ```text
//! cargo run --release --example token_lm_sampling
//! ```

use vectok::neural::TrainConfig;
use vectok::seqlm::{
    rescore_select, sample_candidates, train_lm, Candidate, Conditioning, ConditioningLayout, LikelihoodScorer, SampleConfig, SeqLm,
    SeqLmConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // TTS layout: content units, a prompt in token space, then the target.
    let corpus = vec![
        ConditioningLayout::tts(vec![0, 1, 2], vec![5], vec![3, 7, 7, 1, 4, 9]),
        ConditioningLayout::tts(vec![2, 1], vec![5], vec![8, 2, 2, 6]),
        ConditioningLayout::tts(vec![3, 3, 0], vec![6], vec![1, 1, 5, 0, 9, 9, 2]),
    ];
    let mut lm = SeqLm::new(SeqLmConfig { d_model: 32, heads: 2, layers: 2, ff: 64, ..SeqLmConfig::new(10, 4) })?;
    let cfg = TrainConfig { steps: 400, learning_rate: 3e-3, cosine: true, warmup_steps: 30, ..TrainConfig::default() };
    let curve = train_lm(&mut lm, &corpus, &cfg)?;
    println!("{} parameters; NLL {:.3} -> {:.4} nats/token", lm.num_parameters(), curve[0], curve.last().unwrap());

    // A hot temperature spreads the candidates out so the choice matters.
    let cond = corpus[0].condition.clone();
    let candidates = sample_candidates(&lm, &cond, &SampleConfig { seed: 11, temperature: 3.0, ..SampleConfig::default() })?;
    let distinct: std::collections::BTreeSet<&Vec<u32>> = candidates.iter().map(|c| &c.tokens).collect();
    println!("{} candidates, {} distinct", candidates.len(), distinct.len());

    let (i, best) = rescore_select(&candidates, &cond, &LikelihoodScorer { model: &lm })?;
    println!("likelihood re-scorer picks #{i}: {:?} (target {:?})", best.tokens, corpus[0].target);

    // Any pure function can stand in for an external quality model.
    let prefers_short = |_: &Conditioning, c: &Candidate| -(c.tokens.len() as f64);
    let (j, short) = rescore_select(&candidates, &cond, &prefers_short)?;
    println!("length hook picks #{j}: {:?}", short.tokens);

    let greedy = sample_candidates(&lm, &cond, &SampleConfig { n_candidates: 1, temperature: 0.0, ..SampleConfig::default() })?;
    println!("greedy decode: {:?}", greedy[0].tokens);
    Ok(())
}
