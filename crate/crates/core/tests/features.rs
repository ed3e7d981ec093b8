use docspot::features::{
    extract_baseline, load_external_features, write_feature_file, ExtractorProfile, BASELINE_DIMS,
};
use docspot::imgproc::Image;
use docspot::synth::{generate, SynthSpec};
use docspot::BoundingBox;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn one_pixel_shift_is_closer_than_an_unrelated_crop() {
    let corpus = generate(&SynthSpec { page_count: 4, ..SynthSpec::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in &corpus.plants {
        let page = &corpus.pages.iter().find(|(id, _)| *id == p.page).unwrap().1;
        let b = p.bbox;
        let base = extract_baseline(&page.crop(&b).unwrap()).unwrap();
        let shifted =
            extract_baseline(&page.crop(&BoundingBox::new(b.x + 1, b.y, b.w, b.h).unwrap()).unwrap()).unwrap();
        let other_page = &corpus.pages[rng.gen_range(0..corpus.pages.len())].1;
        let (x, y) = (rng.gen_range(0..300), rng.gen_range(0..250));
        let random = extract_baseline(&other_page.crop(&BoundingBox::new(x, y, 60, 60).unwrap()).unwrap()).unwrap();
        assert!(base.euclidean(&shifted) < base.euclidean(&random), "{} on {}", p.class, p.page);
    }
}

#[test]
fn external_file_examples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.psfeat");
    let rows = [vec![0.5f32; 1024], vec![-0.25f32; 1024]];
    write_feature_file(&path, 1024, &[(3, &rows[0]), (9, &rows[1])]).unwrap();
    let loaded = load_external_features(&path, &ExtractorProfile::by_name("vgg19-block4-5").unwrap()).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[1].0, 9);
    assert!(load_external_features(&path, &ExtractorProfile::by_name("resnet-gapool").unwrap()).is_err());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    let err = load_external_features(&path, &ExtractorProfile::external("x", 1024)).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn baseline_is_always_640_dims(w in 1usize..80, h in 1usize..80, gray in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = if gray { 1 } else { 3 };
        let img = Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen()).collect()).unwrap();
        prop_assert_eq!(extract_baseline(&img).unwrap().dims(), BASELINE_DIMS);
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact(
        rows in prop::collection::vec((any::<u64>(), prop::collection::vec(-1e30f32..1e30, 7)), 0..20),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.psfeat");
        let view: Vec<(u64, &[f32])> = rows.iter().map(|(id, v)| (*id, v.as_slice())).collect();
        write_feature_file(&path, 7, &view).unwrap();
        let back = load_external_features(&path, &ExtractorProfile::external("t", 7)).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for ((id, v), (bid, bv)) in rows.iter().zip(&back) {
            prop_assert_eq!(id, bid);
            let bits: Vec<u32> = v.iter().map(|f| f.to_bits()).collect();
            let back_bits: Vec<u32> = bv.values().iter().map(|f| f.to_bits()).collect();
            prop_assert_eq!(bits, back_bits);
        }
    }
}
