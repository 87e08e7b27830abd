use chunkspeech::synthdata::{make_dataset, DatasetConfig, LengthDist, OracleSpec};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn short_lengths_follow_the_configured_uniform_distribution() {
    let config = DatasetConfig { heldout_short: 0, heldout_long: 0, ..DatasetConfig::default() };
    let LengthDist::Uniform { min, max } = config.short_lengths else { panic!("uniform default") };
    let data = make_dataset(&config, &OracleSpec::default(), 5).unwrap();
    let bins = max - min + 1;
    let mut counts = vec![0usize; bins];
    for s in &data.train {
        counts[s.text.len() - min] += 1;
    }
    let expected = data.train.len() as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}

#[test]
fn weighted_choice_matches_its_weights() {
    let weights = vec![(8usize, 1.0), (16, 2.0), (24, 5.0)];
    let config = DatasetConfig {
        train: 4000,
        heldout_short: 0,
        heldout_long: 0,
        short_lengths: LengthDist::Choice(weights.clone()),
        ..DatasetConfig::default()
    };
    let data = make_dataset(&config, &OracleSpec::default(), 6).unwrap();
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let chi2: f64 = weights
        .iter()
        .map(|&(len, w)| {
            let observed = data.train.iter().filter(|s| s.text.len() == len).count() as f64;
            let expected = 4000.0 * w / total;
            (observed - expected).powi(2) / expected
        })
        .sum();
    let critical = ChiSquared::new(2.0).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}
