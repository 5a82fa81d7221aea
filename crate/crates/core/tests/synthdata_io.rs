use std::fs;
use std::path::Path;

use wabert::synthdata::{generate_corpus, generate_utterances, load_corpus, prototypes, SynthConfig, MANIFEST};
use wabert::Error;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "frames", "boundaries"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn round_trip_and_byte_identical_regeneration() {
    let cfg = SynthConfig { seed: 7, ..SynthConfig::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let written = generate_corpus(&cfg, 100, a.path()).unwrap();
    generate_corpus(&cfg, 100, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(load_corpus(a.path()).unwrap(), written);

    let other = tempfile::tempdir().unwrap();
    generate_corpus(&SynthConfig { seed: 8, ..cfg }, 100, other.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(other.path()));
}

#[test]
fn truncation_is_corrupt_file() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&SynthConfig::default(), 5, dir.path()).unwrap();
    let frames = dir.path().join("frames/utt00003.tnsr");
    let bytes = fs::read(&frames).unwrap();
    fs::write(&frames, &bytes[..bytes.len() - 7]).unwrap();
    match load_corpus(dir.path()) {
        Err(Error::CorruptFile { index, .. }) => assert_eq!(index, 3),
        other => panic!("expected CorruptFile, got {other:?}"),
    }

    let manifest = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(Error::CorruptFile { .. })));
}

#[test]
fn empty_manifest_is_empty_stream() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(MANIFEST), "").unwrap();
    assert!(load_corpus(dir.path()).unwrap().is_empty());
}

#[test]
fn prototypes_are_separated() {
    let cfg = SynthConfig::default();
    let p = prototypes(&cfg).unwrap();
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let d: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d > 4.0 * cfg.noise_sigma);
        }
    }
}

#[test]
fn all_three_labels_occur() {
    let utts = generate_utterances(&SynthConfig::default(), 1000).unwrap();
    let mut counts = [0usize; 3];
    for u in &utts {
        counts[u.label] += 1;
    }
    eprintln!("label counts {counts:?}");
    assert!(counts.iter().all(|&c| c > 200), "{counts:?}");
}
