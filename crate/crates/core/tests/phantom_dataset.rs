use fedseg_core::metrics::dsc;
use fedseg_core::phantom::{self, BurdenBand, PhantomConfig, DEFAULT_BAND_MIX};

#[test]
fn dataset_bands_and_smoothness() {
    let cfg = PhantomConfig::default();
    let cases = phantom::generate_cases(42, 45, DEFAULT_BAND_MIX, &cfg).unwrap();
    let count = |b| cases.iter().filter(|c| c.band == b).count();
    assert_eq!([count(BurdenBand::Low), count(BurdenBand::Moderate), count(BurdenBand::High)], [10, 29, 6]);
    for c in &cases {
        assert!((8..=16).contains(&c.frame_count()));
        assert!(c.band.contains(c.mean_burden_index()), "{} {}", c.case_id, c.mean_burden_index());
        if c.band == BurdenBand::Moderate {
            assert!((0.5..=0.7).contains(&c.mean_burden_index()));
        }
        for i in 1..c.frame_count() {
            assert!(dsc(&c.eem_masks[i - 1], &c.eem_masks[i]).unwrap() >= 0.85);
        }
    }
}

#[test]
fn write_then_load_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig::default();
    let cases = phantom::generate_cases(3, 4, DEFAULT_BAND_MIX, &cfg).unwrap();
    phantom::write_dataset(&cases, 3, &cfg, dir.path()).unwrap();
    let (manifest, loaded) = phantom::load_dataset(dir.path()).unwrap();
    assert_eq!(manifest.seed, 3);
    assert_eq!(loaded, cases);
}

#[test]
fn same_seed_same_bytes() {
    let cfg = PhantomConfig::default();
    let a = phantom::generate_cases(11, 5, DEFAULT_BAND_MIX, &cfg).unwrap();
    let b = phantom::generate_cases(11, 5, DEFAULT_BAND_MIX, &cfg).unwrap();
    assert_eq!(a, b);
}
