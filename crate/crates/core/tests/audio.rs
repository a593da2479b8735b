mod common;

use omni_core::audio::{self, AudioClip, SAMPLE_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_clip(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

#[test]
fn mel_energies_match_naive_dft() {
    for seed in 0..3 {
        let samples = random_clip(seed, SAMPLE_RATE as usize);
        let clip = AudioClip {
            samples: samples.clone(),
            sample_rate: SAMPLE_RATE,
        };
        let got = audio::mel_energies(&clip).unwrap();
        let want = common::mel_energies_oracle(&samples);
        assert_eq!(got.rows(), want.len());
        let mut worst: f64 = 0.0;
        for (t, row) in want.iter().enumerate() {
            for (m, w) in row.iter().enumerate() {
                worst = worst.max((got.get(t, m) - w).abs() / w.abs().max(1e-10));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");

        let log_got = audio::mel_spectrogram(&clip).unwrap();
        let log_want = common::log_mel_oracle(&want);
        for (t, row) in log_want.iter().enumerate() {
            for (m, w) in row.iter().enumerate() {
                assert!((log_got.get(t, m) - w).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn tone_energy_peaks_at_its_mel_band() {
    let f0 = 1000.0;
    let samples: Vec<f32> = (0..SAMPLE_RATE as usize)
        .map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 / SAMPLE_RATE as f64).sin() as f32)
        .collect();
    let clip = AudioClip {
        samples,
        sample_rate: SAMPLE_RATE,
    };
    let e = audio::mel_energies(&clip).unwrap();
    let row = e.row(50);
    let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    let centres = audio::mel_centers(audio::N_MELS, 8000.0);
    let nearest = (0..centres.len())
        .min_by(|&a, &b| (centres[a] - f0).abs().total_cmp(&(centres[b] - f0).abs()))
        .unwrap();
    assert!(peak.abs_diff(nearest) <= 1, "peak band {peak}, nearest centre {nearest}");
}

#[test]
fn wav_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.wav");
    let samples = random_clip(7, 8000);
    audio::write_wav(&path, &samples, 16000).unwrap();
    let (back, rate) = audio::load_wav(&path).unwrap();
    assert_eq!(rate, 16000);
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert!((a - b).abs() < 1.0 / 16384.0);
    }
}
