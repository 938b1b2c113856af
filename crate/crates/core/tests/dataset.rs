use fhn_core::dataset::*;
use fhn_core::fhn::{integrate, SimConstants, ThetaPair};
use fhn_core::stochastic::{sample_theta, PriorSpec, RngStream};
use proptest::prelude::*;

/// O(N^2) one-sided DFT magnitudes by direct summation.
fn naive_dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (j, &xj) in x.iter().enumerate() {
                // Reduce j*k mod n first so the angle stays small and exact.
                let phase = -2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                re += xj * phase.cos();
                im += xj * phase.sin();
            }
            re.hypot(im)
        })
        .collect()
}

fn two_sided_energy(one_sided: &[f64], n: usize) -> f64 {
    // Bins 1..ceil(n/2)-1 appear twice; DC and (for even n) Nyquist once.
    let mut e = 0.0;
    for (k, m) in one_sided.iter().enumerate() {
        let twice = k != 0 && !(n.is_multiple_of(2) && k == n / 2);
        e += m * m * if twice { 2.0 } else { 1.0 };
    }
    e
}

#[test]
fn fourier_matches_naive_dft_on_simulated_series() {
    let consts = SimConstants::default();
    let mut rng = RngStream::new(77, 0).rng();
    for _ in 0..3 {
        let theta = sample_theta(&mut rng, &PriorSpec::default()).unwrap();
        let series = integrate(theta, &consts, &Default::default()).unwrap();
        let fast = fourier_features(&series);
        let slow = naive_dft_magnitudes(&series.values);
        assert_eq!(fast.len(), 501);
        let scale = slow.iter().cloned().fold(0.0, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
        }
        let energy: f64 = series.values.iter().map(|x| x * x).sum();
        let parseval = two_sided_energy(&fast, series.len());
        assert!((parseval - 1000.0 * energy).abs() <= 1e-10 * parseval);
    }
}

proptest! {
    #[test]
    fn fourier_parseval_random(x in prop::collection::vec(-3.0f64..3.0, 2..200)) {
        let mags = fourier_magnitudes(&x);
        prop_assert_eq!(mags.len(), x.len() / 2 + 1);
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let two_sided = two_sided_energy(&mags, x.len());
        prop_assert!((two_sided - x.len() as f64 * energy).abs() <= 1e-10 * two_sided.max(1e-300));
        let slow = naive_dft_magnitudes(&x);
        let scale = slow.iter().cloned().fold(1e-300, f64::max);
        for (a, b) in mags.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn scaler_inverts(rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 6), 2..30)) {
        let spec = DataSpec { consts: SimConstants { t_end: 1.0, dt_out: 0.25, ..Default::default() }, ..Default::default() };
        let mut ds = spec.build_dataset(1, rows.len(), FeatureKind::Time, false, false).unwrap();
        for (s, r) in ds.samples.iter_mut().zip(&rows) {
            s.features = r[..4].to_vec();
            s.target = r[4..].to_vec();
        }
        let sc = Scaler::fit(&ds).unwrap();
        let back = sc.invert(&sc.apply(&ds).unwrap()).unwrap();
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            for (x, y) in a.features.iter().chain(&a.target).zip(b.features.iter().chain(&b.target)) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
        prop_assert!(sc.feature_sd.iter().chain(&sc.target_sd).all(|&s| s > 0.0));
    }
}

#[test]
fn full_size_dataset_is_deterministic() {
    let spec = DataSpec::default();
    let a = spec.build_dataset(2024, 1000, FeatureKind::Time, false, false).unwrap();
    assert_eq!(a.len(), 1000);
    assert_eq!(a.feature_len(), 1000);
    assert_eq!(a.target_len(), 2);
    let b = spec.build_dataset(2024, 1000, FeatureKind::Time, false, false).unwrap();
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    write_dataset(&mut ba, &a).unwrap();
    write_dataset(&mut bb, &b).unwrap();
    assert!(ba == bb);
}

#[test]
fn window_and_half_sizes() {
    let spec = DataSpec::default();
    let ds = spec.build_dataset(5, 4, FeatureKind::Time, false, false).unwrap();
    let halves = split_halves(&ds).unwrap();
    assert_eq!((halves.len(), halves.feature_len()), (8, 500));
    let windows = extract_windows(&ds, &DEFAULT_WINDOWS).unwrap();
    assert_eq!((windows.len(), windows.feature_len()), (20, 500));
    let first = extract_windows(&ds, &[(0, 500)]).unwrap();
    for i in 0..ds.len() {
        assert_eq!(first.samples[i].features, halves.samples[2 * i].features);
    }
}

#[test]
fn save_and_load_file() {
    let spec = DataSpec::default();
    let ds = spec.dataset_for_thetas(&[ThetaPair::new(0.7, 0.8), ThetaPair::new(0.1, 0.2)], FeatureKind::Fourier).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.fhnds");
    save_dataset(&path, &ds).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_dataset(&path).is_err());
}
