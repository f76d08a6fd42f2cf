use avmil::data::{Dataset, Modality};
use avmil::synth::{generate, SynthConfig};
use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Per-class centroid of the planted rows of `modality` over a training split.
fn planted_centroids(train: &Dataset, modality: Modality) -> Array2<f64> {
    let (c, d) = (train.num_classes(), train.bags()[0].features(modality).cols());
    let mut sums = Array2::<f64>::zeros((c, d));
    let mut counts = vec![0usize; c];
    for bag in train.bags() {
        let gt = bag.ground_truth.as_ref().unwrap().for_modality(modality);
        let x = bag.features(modality).as_array();
        for (class, rows) in gt.iter().enumerate() {
            for &r in rows {
                sums.row_mut(class).zip_mut_with(&x.row(r as usize), |s, &v| *s += v as f64);
                counts[class] += 1;
            }
        }
    }
    for (mut row, n) in sums.rows_mut().into_iter().zip(counts) {
        row /= n as f64;
    }
    sums
}

/// Score of `class`: the top-1 proposal's projection onto the unit centroid.
fn top1_score(x: &Array2<f32>, centroid: &Array1<f64>) -> f64 {
    let u = centroid / centroid.dot(centroid).sqrt();
    x.rows()
        .into_iter()
        .map(|r| r.mapv(f64::from).dot(&u))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn nearest_centroid_oracle_separates_default_classes() {
    let data = generate(&SynthConfig::default()).unwrap();
    let centroids: Vec<_> = [Modality::Visual, Modality::Audio]
        .into_iter()
        .map(|m| (m, planted_centroids(&data.train, m)))
        .collect();
    let correct = data
        .test
        .bags()
        .iter()
        .filter(|bag| {
            let best = (0..data.test.num_classes())
                .map(|c| {
                    let s: f64 = centroids
                        .iter()
                        .map(|(m, mu)| top1_score(bag.features(*m).as_array(), &mu.row(c).to_owned()))
                        .sum();
                    (c, s)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            bag.labels.is_positive(best)
        })
        .count();
    let accuracy = correct as f64 / data.test.len() as f64;
    assert!(accuracy > 0.95, "oracle accuracy {accuracy}");
}

#[test]
fn planted_positions_are_independent_across_modalities() {
    let config = SynthConfig {
        train_bags: 3000,
        val_bags: 1,
        test_bags: 1,
        seed: 21,
        ..SynthConfig::default()
    };
    let data = generate(&config).unwrap();
    // 5 x 5 bins: visual positions 0..20 in fours, audio 0..10 in twos. One
    // pair per positive class keeps samples iid; a uniformly chosen element of
    // each planted set has a uniform marginal.
    let mut pick = ChaCha8Rng::seed_from_u64(5);
    let mut table = [[0f64; 5]; 5];
    for bag in data.train.bags() {
        let gt = bag.ground_truth.as_ref().unwrap();
        for c in bag.labels.positives() {
            let v = *gt.visual[c].choose(&mut pick).unwrap() as usize;
            let a = *gt.audio[c].choose(&mut pick).unwrap() as usize;
            table[v * 5 / config.visual_proposals][a * 5 / config.audio_segments] += 1.0;
        }
    }
    let n: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..5).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let expected = rows[i] * cols[j] / n;
            assert!(expected >= 5.0, "cell expectation {expected} too small");
            stat += (table[i][j] - expected).powi(2) / expected;
        }
    }
    let p = ChiSquared::new(16.0).unwrap().sf(stat);
    assert!(p > 0.01, "independence rejected: chi2 {stat}, p {p}");
}
