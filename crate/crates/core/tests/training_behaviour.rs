//! Statistical behaviour of the two trainable models on synthetic data.

use rand::Rng;
use vectok::featureio::{generate_synthetic_corpus, generate_translation_corpus, TranslationCorpusSpec, UnitMapping};
use vectok::neural::{train_invk, AugmentationPolicy, InvKConfig, InvKExample, InvKModel, TrainConfig};
use vectok::normalizer::normalize;
use vectok::quantizer::{tokenize, train_kmeans, KMeansParams};
use vectok::seqlm::{train_lm, ConditioningLayout, SeqLm, SeqLmConfig};
use vectok::{FeatureMatrix, SplitMix64, SyntheticCorpusSpec};

fn lm(units: u32, seed: u64) -> SeqLm {
    SeqLm::new(SeqLmConfig { d_model: 32, heads: 2, layers: 2, ff: 64, seed, ..SeqLmConfig::new(units, 0) }).unwrap()
}

fn mean_loss(model: &SeqLm, layouts: &[ConditioningLayout]) -> f64 {
    layouts.iter().map(|l| model.lm_loss(l).unwrap()).sum::<f64>() / layouts.len() as f64
}

#[test]
fn shuffled_targets_plateau_at_the_entropy_bound() {
    let (units, len) = (8u32, 10usize);
    let spec = TranslationCorpusSpec { num_pairs: 500, num_units: units, min_len: len, max_len: len, mapping: UnitMapping::Identity, seed: 4 };
    let pairs = generate_translation_corpus(&spec).unwrap().pairs;
    // Rotating targets by one pair breaks every source/target link.
    let layouts: Vec<ConditioningLayout> =
        (0..pairs.len()).map(|i| ConditioningLayout::s2st(pairs[i].0.clone(), pairs[(i + 1) % pairs.len()].1.clone())).collect();
    let (train, held_out) = layouts.split_at(400);
    let cfg = TrainConfig { steps: 400, learning_rate: 3e-3, cosine: true, warmup_steps: 50, batch_size: 16, seed: 1, ..TrainConfig::default() };

    // Uniform i.i.d. targets of fixed length: ln V per token, EOS is free.
    let bound = len as f64 * (units as f64).ln() / (len + 1) as f64;
    let mut broken = lm(units, 2);
    let curve = train_lm(&mut broken, train, &cfg).unwrap();
    let tail = curve[300..].iter().sum::<f64>() / 100.0;
    let held = mean_loss(&broken, held_out);
    assert!((tail - bound).abs() < 0.1 * bound, "train tail {tail} vs bound {bound}");
    assert!(held > 0.97 * bound && held < 1.1 * bound, "held-out {held} vs bound {bound}");

    let intact: Vec<ConditioningLayout> = pairs.iter().map(|(s, t)| ConditioningLayout::s2st(s.clone(), t.clone())).collect();
    let mut fine = lm(units, 2);
    train_lm(&mut fine, &intact[..400], &cfg).unwrap();
    assert!(mean_loss(&fine, &intact[400..]) < 0.5 * bound);
}

struct Split {
    train: Vec<InvKExample>,
    held_out: Vec<InvKExample>,
}

/// Prompts come from another utterance of the same speaker; the last two
/// utterances of every speaker are held out, leaving two per speaker to train
/// on, so an unregularized model overfits.
fn invk_data(seed: u64) -> (Split, vectok::Codebook) {
    let spec = SyntheticCorpusSpec {
        num_speakers: 4,
        num_content_units: 10,
        dim: 8,
        frames_per_utterance: 24,
        utterances_per_speaker: 4,
        noise_scale: 0.3,
        seed,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let normalized: Vec<FeatureMatrix> = corpus.records.iter().map(|r| normalize(&r.features).unwrap().0).collect();
    let cb = train_kmeans(&normalized, &KMeansParams { k: 10, seed, ..KMeansParams::default() }).unwrap();
    let per = spec.utterances_per_speaker;
    let mut split = Split { train: Vec::new(), held_out: Vec::new() };
    for (i, r) in corpus.records.iter().enumerate() {
        let (s, u) = (i / per, i % per);
        let partner = &corpus.records[s * per + (u + 1) % per].features;
        let ex = InvKExample { tokens: tokenize(&normalized[i], &cb).unwrap(), target: r.features.clone(), prompt: partner.slice_frames(0, 12).unwrap() };
        if u + 2 >= per {
            split.held_out.push(ex);
        } else {
            split.train.push(ex);
        }
    }
    (split, cb)
}

#[test]
fn augmentation_does_not_hurt_held_out_loss() {
    let cfg = |seed| TrainConfig { steps: 800, learning_rate: 2e-3, cosine: true, warmup_steps: 25, batch_size: 8, seed, ..TrainConfig::default() };
    let mut diffs = Vec::new();
    for seed in 0..5u64 {
        let (data, cb) = invk_data(100 + seed);
        let held_out = |policy| {
            let mut m = InvKModel::new(&cb, InvKConfig { d_model: 32, heads: 2, layers: 1, ff: 64, seed }).unwrap();
            train_invk(&mut m, &data.train, policy, &cfg(seed)).unwrap();
            data.held_out.iter().map(|ex| m.loss(ex).unwrap().total).sum::<f64>() / data.held_out.len() as f64
        };
        let plain = held_out(AugmentationPolicy::NONE);
        let augmented = held_out(AugmentationPolicy { mask_prob: 0.1, replace_prob: 0.1 });
        diffs.push(augmented - plain);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let wins = diffs.iter().filter(|&&d| d <= 0.0).count();
    assert!(mean <= 0.0 && wins >= 3, "augmented minus plain held-out loss per seed: {diffs:?}");
}

#[test]
fn jittered_tokens_are_what_augmentation_sees() {
    // Sanity on the corruption rates the comparison above relies on.
    let mut rng = SplitMix64::new(3);
    let tokens = vectok::TokenSequence::new((0..20_000).map(|_| rng.random_range(0..10)).collect(), 10).unwrap();
    let out = vectok::neural::augment(&tokens, AugmentationPolicy { mask_prob: 0.1, replace_prob: 0.1 }, 8);
    let changed = tokens.tokens().iter().zip(out.tokens()).filter(|(a, b)| a != b).count() as f64 / 20_000.0;
    assert!((changed - 0.2).abs() < 0.01, "{changed}");
}
