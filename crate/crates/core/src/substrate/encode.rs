//! Rate coding of images into Poisson input spike trains.

use rand::Rng as _;

use crate::seed;

/// Total input rate shared among all pixels, Hz.
pub const NU_TOT: f64 = 2500.0;

/// Spike times per input source, ms, sorted.
pub type SpikeTrains = Vec<Vec<f64>>;

/// `ν_p = c_p / Σc · nu_tot`. A blank image yields all-zero rates.
pub fn encode_rates(pixels: &[f64], nu_tot: f64) -> Vec<f64> {
    let total: f64 = pixels.iter().sum();
    if total <= 0.0 {
        return vec![0.0; pixels.len()];
    }
    pixels.iter().map(|c| c / total * nu_tot).collect()
}

/// Homogeneous Poisson trains during `[0, t_on)`, silent afterwards. Each
/// input draws from its own substream so trains do not depend on the rates
/// of other inputs.
pub fn make_spike_trains(rates: &[f64], t_on: f64, seed: u64) -> SpikeTrains {
    rates
        .iter()
        .enumerate()
        .map(|(p, &rate)| {
            let mut train = Vec::new();
            if rate <= 0.0 || t_on <= 0.0 {
                return train;
            }
            let mut rng = seed::rng(seed::derive_index(seed, p as u64));
            let mean_isi = 1000.0 / rate;
            let mut t = 0.0;
            loop {
                // 1 - U lies in (0, 1], so the log is finite
                let u: f64 = rng.random();
                t += -(1.0 - u).ln() * mean_isi;
                if t >= t_on {
                    break;
                }
                train.push(t);
            }
            train
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_takes_everything() {
        let mut px = vec![0.0; 100];
        px[17] = 0.3;
        let r = encode_rates(&px, NU_TOT);
        assert_eq!(r[17], 2500.0);
        assert_eq!(r.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn uniform_image_splits_evenly() {
        let r = encode_rates(&[0.5; 100], NU_TOT);
        assert!(r.iter().all(|v| (v - 25.0).abs() < 1e-12));
    }

    #[test]
    fn blank_image_is_silent() {
        assert!(encode_rates(&[0.0; 100], NU_TOT).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn trains_respect_window_and_rate_zero() {
        let trains = make_spike_trains(&[0.0, 400.0, 3000.0], 900.0, 4);
        assert!(trains[0].is_empty());
        for t in &trains[1..] {
            assert!(t.windows(2).all(|w| w[0] < w[1]));
            assert!(t.iter().all(|x| (0.0..900.0).contains(x)));
        }
        assert_eq!(trains, make_spike_trains(&[0.0, 400.0, 3000.0], 900.0, 4));
    }

    #[test]
    fn poisson_count_statistics() {
        // oracle: a Poisson count over 900 ms at 1 kHz has mean and variance 900
        let n = 2000;
        let counts: Vec<f64> = (0..n)
            .map(|s| make_spike_trains(&[1000.0], 900.0, s)[0].len() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(
            (mean - 900.0).abs() < 4.0 * (900.0 / n as f64).sqrt(),
            "mean {mean}"
        );
        assert!((var / 900.0 - 1.0).abs() < 0.15, "variance {var}");
    }

    proptest::proptest! {
        #[test]
        fn rates_sum_to_total(px in proptest::collection::vec(0.0f64..=1.0, 100)) {
            let total: f64 = px.iter().sum();
            proptest::prop_assume!(total > 0.0);
            let s: f64 = encode_rates(&px, NU_TOT).iter().sum();
            proptest::prop_assert!((s - NU_TOT).abs() <= 1e-9 * NU_TOT);
        }
    }
}
