//! Round-trip the binary feature, token and codebook files and a manifest.
//!
//! ```text
//! cargo run --example file_formats -- [dir]
//! ```

use std::path::PathBuf;

use vectok::featureio::{load_features, load_manifest, load_tokens, save_features, save_tokens, write_manifest, ManifestEntry};
use vectok::quantizer::{load_codebook, save_codebook, tokenize};
use vectok::{Codebook, FeatureMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("vectok-formats"));
    std::fs::create_dir_all(&dir)?;

    let features = FeatureMatrix::from_rows(&[[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]])?;
    let codebook = Codebook::from_centers(&[[0.0, 1.0], [1.0, 0.0]])?;
    let tokens = tokenize(&features, &codebook)?;

    let sizes = [
        save_features(&dir.join("utt.vtkf"), &features)?,
        save_tokens(&dir.join("utt.vtkt"), &tokens)?,
        save_codebook(&dir.join("codebook.vtkc"), &codebook)?,
    ];
    println!("wrote {:?} bytes (features, tokens, codebook) under {}", sizes, dir.display());

    let back = load_features(&dir.join("utt.vtkf"))?;
    println!("features: {} frames x {} dims, max round-trip error {:e}", back.frames(), back.dim(), back.max_abs_diff(&features));
    println!("tokens: {:?} (vocabulary {})", load_tokens(&dir.join("utt.vtkt"))?.tokens(), tokens.vocab_size());
    println!("codebook: k = {}", load_codebook(&dir.join("codebook.vtkc"))?.k());

    let entries = vec![ManifestEntry { utterance_id: "utt".into(), speaker_id: "spk000".into(), path: "utt.vtkf".into() }];
    let mut file = std::fs::File::create(dir.join("manifest.tsv"))?;
    write_manifest(&entries, &mut file)?;
    let listed = load_manifest(&dir.join("manifest.tsv"))?;
    println!("manifest resolves {} to {}", listed[0].utterance_id, listed[0].path.display());

    std::fs::write(dir.join("broken.vtkf"), b"RIFF")?;
    println!("corrupt file: {}", load_features(&dir.join("broken.vtkf")).unwrap_err());
    Ok(())
}
