//! CorrNet against the closed-form CCA optimum on shared-latent data.

mod oracles;

use corrsig::corrnet::{correlation, train_corrnet_matrices, CorrNetTrainConfig};

#[test]
fn reaches_the_cca_optimum_on_a_small_sample() {
    let (r, p) = oracles::shared_latent(2_000, 5, 0.01, 7);
    let cc = oracles::canonical_correlations(&r, &p);
    assert!(cc[4] > 0.99 && cc[5] < 0.5, "{cc:?}");
    let cfg = CorrNetTrainConfig {
        k: 5,
        lambda: 2.0,
        lr: 1e-3,
        epochs: 60,
        batch_size: 256,
        seed: 3,
    };
    let fit = train_corrnet_matrices(&r, &p, &cfg).unwrap();
    let hr = fit.params.hidden(Some(&r), None).unwrap();
    let hp = fit.params.hidden(None, Some(&p)).unwrap();
    let got = correlation(&hr, &hp).unwrap();
    assert!(got >= 0.9 * 5.0 * cc[0], "{got} vs optimum {}", 5.0 * cc[0]);
}

#[test]
fn loss_decreases_early_in_most_seeds() {
    let mut good = 0;
    for seed in 0..10 {
        let (r, p) = oracles::shared_latent(8_192, 5, 0.01, 100 + seed);
        let cfg = CorrNetTrainConfig {
            epochs: 10,
            seed,
            ..Default::default()
        };
        let t = train_corrnet_matrices(&r, &p, &cfg).unwrap().loss_trace;
        if t.windows(2).all(|w| w[1] <= w[0]) {
            good += 1;
        }
    }
    assert!(good >= 9, "{good}/10 seeds monotone");
}
