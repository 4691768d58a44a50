use std::collections::HashSet;

use lesion_core::seed;
use lesion_core::synthdata::{
    build_corpus, gen_from_seed, gen_image, split_assignment, test_count, CorpusStyle, DatasetManifest, Split,
    StyleId,
};

#[test]
fn generation_is_deterministic() {
    for id in StyleId::ALL {
        let style = CorpusStyle::preset(id);
        let a = gen_from_seed(&style, 42, 32).unwrap();
        let b = gen_from_seed(&style, 42, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, gen_from_seed(&style, 43, 32).unwrap().0);
    }
}

#[test]
fn benign_style_has_empty_masks() {
    let style = CorpusStyle::preset(StyleId::Tiger).benign();
    for s in 0..10 {
        let (img, mask) = gen_from_seed(&style, s, 32).unwrap();
        assert_eq!(mask.sum(), 0.0);
        assert!(img.min() >= 0.0 && img.max() <= 1.0);
    }
}

#[test]
fn mask_fractions_stay_near_configured_range() {
    let style = CorpusStyle {
        area_frac: (0.05, 0.20),
        ..CorpusStyle::preset(StyleId::Kpi)
    };
    let mut rng = seed::rng(11, "test", 0);
    for _ in 0..100 {
        let (_, mask) = gen_image(&mut rng, &style, 32, 32).unwrap();
        let frac = mask.mean();
        assert!((0.04..=0.22).contains(&frac), "fraction {frac}");
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn lesions_are_distinguishable_from_background() {
    for id in StyleId::ALL {
        let style = CorpusStyle::preset(id);
        for s in 0..10 {
            let (img, mask) = gen_from_seed(&style, s, 32).unwrap();
            let hw = 32 * 32;
            let mean = |inside: bool| -> [f32; 3] {
                [0, 1, 2].map(|c| {
                    let v: Vec<f32> = (0..hw)
                        .filter(|&i| (mask.data()[i] == 1.0) == inside)
                        .map(|i| img.data()[c * hw + i])
                        .collect();
                    v.iter().sum::<f32>() / v.len() as f32
                })
            };
            let (l, b) = (mean(true), mean(false));
            let d = (0..3).map(|c| (l[c] - b[c]).powi(2)).sum::<f32>().sqrt();
            assert!(d >= 0.1, "{id} seed {s}: distance {d}");
        }
    }
}

#[test]
fn small_images_are_rejected() {
    let style = CorpusStyle::preset(StyleId::Kpi);
    assert!(gen_from_seed(&style, 0, 16).is_err());
}

#[test]
fn split_sizes_and_membership() {
    assert_eq!(test_count(100), 20);
    assert_eq!(test_count(10), 2);
    let s = split_assignment(7, 100);
    assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 20);
    let s10 = split_assignment(7, 10);
    assert_eq!(s10.iter().filter(|&&x| x == Split::Test).count(), 2);
    // membership depends on (seed, index), not on corpus order or length
    assert_eq!(split_assignment(7, 100), split_assignment(7, 100));
    assert_ne!(split_assignment(7, 100), split_assignment(8, 100));
}

#[test]
fn corpus_round_trip_and_no_leakage() {
    let dir = tempfile::tempdir().unwrap();
    let style = CorpusStyle::preset(StyleId::Ring);
    let m = build_corpus(&style, 20, 3, 32, dir.path()).unwrap();
    assert_eq!(m.split(Split::Train).count(), 16);
    assert_eq!(m.split(Split::Test).count(), 4);
    let train: HashSet<u64> = m.split(Split::Train).map(|r| r.seed).collect();
    assert!(m.split(Split::Test).all(|r| !train.contains(&r.seed)));

    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded, m);
    let pairs = loaded.load_split(Split::Test).unwrap();
    let rec = loaded.split(Split::Test).next().unwrap();
    let (img, mask) = gen_from_seed(&style, rec.seed, 32).unwrap();
    assert_eq!(pairs[0].1, mask);
    let max_err = pairs[0].0.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(max_err <= 0.5 / 255.0 + 1e-6);

    let again = tempfile::tempdir().unwrap();
    let m2 = build_corpus(&style, 20, 3, 32, again.path()).unwrap();
    assert_eq!(m.to_tsv(), m2.to_tsv());
}

#[test]
fn corpus_errors() {
    let dir = tempfile::tempdir().unwrap();
    let style = CorpusStyle::preset(StyleId::Puma);
    assert!(build_corpus(&style, 5, 0, 32, dir.path()).is_err());
    let missing = DatasetManifest::load(&dir.path().join("nope")).unwrap_err();
    assert!(missing.to_string().contains("nope"));
    std::fs::write(dir.path().join("manifest.tsv"), "a\tb\ttrain\tkpi-like\n").unwrap();
    assert!(DatasetManifest::load(dir.path()).is_err());
    let file = dir.path().join("blocker");
    std::fs::write(&file, "").unwrap();
    let err = build_corpus(&style, 10, 0, 32, &file.join("sub")).unwrap_err();
    assert!(err.to_string().contains("blocker"), "{err}");
}
