//! Measure how much speaker identity survives each representation, sweep the
//! anonymization strength and dump a 2-D scatter of utterance means.
//!
//! ```text
//! cargo run --example speaker_anonymization -- [scatter.tsv]
//! ```

use std::fs::File;

use vectok::eval::{pca_scatter, speaker_leakage_probe, write_scatter, ProbeConfig, Representation, DEFAULT_LAMBDAS};
use vectok::featureio::generate_synthetic_corpus;
use vectok::normalizer::normalize;
use vectok::quantizer::{train_kmeans, KMeansParams};
use vectok::reconstructor::SpeakerVectors;
use vectok::{FeatureMatrix, SyntheticCorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A small speaker offset makes the interpolation sweep visible.
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec { speaker_offset_scale: 0.3, ..SyntheticCorpusSpec::default() })?;
    let normalized: Vec<FeatureMatrix> = corpus.records.iter().map(|r| normalize(&r.features).map(|(m, _)| m)).collect::<Result<_, _>>()?;
    let codebook = train_kmeans(&normalized, &KMeansParams { k: 100, ..KMeansParams::default() })?;

    let cfg = ProbeConfig::default();
    let mut reps = vec![Representation::Raw, Representation::Normalized, Representation::Deidentified];
    reps.extend(DEFAULT_LAMBDAS.iter().map(|&l| Representation::Anonymized(l)));
    println!("{:<18} {:>9} {:>7}", "representation", "accuracy", "chance");
    for rep in reps {
        let r = speaker_leakage_probe(&corpus.records, rep, Some(&codebook), &cfg)?;
        println!("{:<18} {:>9.3} {:>7.3}", r.probe, r.accuracy, r.chance_level);
    }

    let sv = SpeakerVectors::extract(&corpus.records[0].features, &codebook)?;
    let half = sv.anonymized(0.5)?;
    println!(
        "utterance 0: max |V_spe - V_ano(0.5)| = {:.3}, max |V_agn - V_ano(0.5)| = {:.3}",
        sv.v_spe.max_abs_diff(&half),
        sv.v_agn.max_abs_diff(&half)
    );

    if let Some(path) = std::env::args().nth(1) {
        let points = pca_scatter(&corpus.records, Representation::Raw, None)?;
        write_scatter(File::create(&path)?, &points)?;
        println!("wrote {} points to {path}", points.len());
    }
    Ok(())
}
