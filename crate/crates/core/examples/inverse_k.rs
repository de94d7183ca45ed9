//! Tokens back to vectors: the deterministic center lookup plus prompt mean,
//! then the trainable prompt-conditioned inverse model.
//!
//! ```text
//! cargo run --release --example inverse_k -- [steps]
//! ```

use vectok::featureio::generate_synthetic_corpus;
use vectok::neural::{ssim, Tensor, train_invk, AugmentationPolicy, Dtype, InvKConfig, InvKExample, InvKModel, TrainConfig};
use vectok::normalizer::normalize;
use vectok::quantizer::{tokenize, train_kmeans, KMeansParams};
use vectok::reconstructor::{lookup_reconstruct, reconstruct_with_prompt};
use vectok::{FeatureMatrix, SyntheticCorpusSpec};

fn tensor(m: &FeatureMatrix) -> Tensor {
    Tensor::new(m.frames(), m.dim(), m.data().to_vec())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let spec = SyntheticCorpusSpec { num_speakers: 4, num_content_units: 12, dim: 8, frames_per_utterance: 40, utterances_per_speaker: 6, ..SyntheticCorpusSpec::default() };
    let corpus = generate_synthetic_corpus(&spec)?;
    let normalized: Vec<FeatureMatrix> = corpus.records.iter().map(|r| normalize(&r.features).map(|(m, _)| m)).collect::<Result<_, _>>()?;
    let codebook = train_kmeans(&normalized, &KMeansParams { k: 12, ..KMeansParams::default() })?;

    let per = spec.utterances_per_speaker;
    let examples: Vec<InvKExample> = (0..corpus.records.len())
        .map(|i| {
            let partner = &corpus.records[(i / per) * per + (i % per + 1) % per].features;
            Ok(InvKExample { tokens: tokenize(&normalized[i], &codebook)?, target: corpus.records[i].features.clone(), prompt: partner.slice_frames(0, 20)? })
        })
        .collect::<Result<_, Box<dyn std::error::Error>>>()?;

    let ex = &examples[0];
    let lookup = lookup_reconstruct(&ex.tokens, &codebook)?;
    let prompted = reconstruct_with_prompt(&ex.tokens, &codebook, &ex.prompt)?;
    println!("lookup only:      max error {:.3}, SSIM {:.3}", lookup.max_abs_diff(&ex.target), ssim(&tensor(&lookup), &tensor(&ex.target)));
    println!("lookup + prompt:  max error {:.3}, SSIM {:.3}", prompted.max_abs_diff(&ex.target), ssim(&tensor(&prompted), &tensor(&ex.target)));

    let mut model = InvKModel::new(&codebook, InvKConfig { d_model: 32, heads: 2, layers: 2, ff: 64, seed: 1 })?;
    println!("inverse model: {} parameters", model.num_parameters());
    let cfg = TrainConfig { steps, learning_rate: 2e-3, cosine: true, warmup_steps: 25, batch_size: 8, ..TrainConfig::default() };
    let curve = train_invk(&mut model, &examples, AugmentationPolicy::default(), &cfg)?;
    for (i, chunk) in curve.chunks((steps / 6).max(1)).enumerate() {
        println!("  steps {:>4}..: mean loss {:.4}", i * (steps / 6).max(1), chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    let parts = model.loss(ex)?;
    println!("utterance 0 after training: MSE {:.4}, SSIM {:.4}, total {:.4}", parts.mse, parts.ssim, parts.total);

    let mut blob = Vec::new();
    model.save(&mut blob, Dtype::F64)?;
    let reloaded = InvKModel::load(blob.as_slice())?;
    assert_eq!(reloaded.forward(&ex.tokens, &ex.prompt)?, model.forward(&ex.tokens, &ex.prompt)?);
    println!("checkpoint: {} bytes, reload reproduces the forward pass exactly", blob.len());
    Ok(())
}
