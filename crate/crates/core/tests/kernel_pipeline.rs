use desk_core::classify::{ovo_fit, SmoConfig};
use desk_core::kernel::{self, eigh, GramMatrix, GramState, PostProcess};
use desk_core::Rng;
use proptest::prelude::*;

fn square(values: Vec<f64>, n: usize, state: GramState) -> GramMatrix<f64> {
    let ids: Vec<u64> = (0..n as u64).collect();
    GramMatrix::new(values, ids.clone(), ids, state).unwrap()
}

fn min_eigenvalue(g: &GramMatrix<f64>) -> f64 {
    eigh(g).unwrap().values.iter().copied().fold(f64::INFINITY, f64::min)
}

fn scale(g: &GramMatrix<f64>) -> f64 {
    g.values().iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn projection_is_psd_and_idempotent(n in 2usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let raw = square((0..n * n).map(|_| rng.uniform()).collect(), n, GramState::Raw);
        let k = kernel::psd_project(&kernel::symmetrize(&raw).unwrap()).unwrap();
        prop_assert!(min_eigenvalue(&k) >= -1e-9 * scale(&k));
        let again = kernel::psd_project(&k).unwrap();
        for (a, b) in k.values().iter().zip(again.values()) {
            prop_assert!((a - b).abs() <= 1e-9 * scale(&k));
        }
    }

    #[test]
    fn coincidence_kernel_is_psd(n in 2usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let raw = square((0..n * n).map(|_| rng.uniform() - 0.5).collect(), n, GramState::Raw);
        let k = kernel::coincidence(&kernel::symmetrize(&raw).unwrap()).unwrap();
        prop_assert!(min_eigenvalue(&k) >= -1e-9 * scale(&k));
    }

    #[test]
    fn auc_survives_monotone_maps(scores in prop::collection::vec(-5.0f64..5.0, 4..40), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut targets: Vec<u8> = scores.iter().map(|_| u8::from(rng.uniform() < 0.5)).collect();
        targets[0] = 0;
        targets[1] = 1;
        let a = kernel::auc_roc(&scores, &targets).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
        prop_assert!((a - kernel::auc_roc(&mapped, &targets).unwrap()).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((a + kernel::auc_roc(&flipped, &targets).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gram_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = GramMatrix::new(vec![0.25, -1.5, 3.0, 1e-300, 0.1, 7.0], vec![9, 4], vec![1, 2, 3], GramState::CrossSymmetrized)
        .unwrap();
    let path = dir.path().join("g.bin");
    kernel::write_gram(&path, &g).unwrap();
    let back: GramMatrix<f64> = kernel::read_gram(&path).unwrap();
    assert_eq!(back, g);
    assert!(std::fs::read(&path).unwrap().starts_with(kernel::MAGIC));
}

#[test]
fn corrupted_gram_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.bin");
    kernel::write_gram(&path, &square(vec![1.0; 4], 2, GramState::Raw)).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(20);
    std::fs::write(&path, &bytes).unwrap();
    assert!(kernel::read_gram::<f64>(&path).is_err());
}

/// Class-indicator similarities with noise: the full post-processing and
/// one-vs-one chain must recover the classes of held-out rows.
#[test]
fn noisy_class_kernel_classifies_held_out_rows() {
    let mut rng = Rng::new(7);
    let classes = 3u32;
    let labels: Vec<u32> = (0..60).map(|i| i % classes).collect();
    let score = |a: u32, b: u32, rng: &mut Rng| if a == b { 0.8 } else { 0.2 } + 0.3 * (rng.uniform() - 0.5);
    let all: Vec<u64> = (0..labels.len() as u64).collect();
    let mut values = Vec::new();
    for &a in &labels {
        for &b in &labels {
            values.push(score(a, b, &mut rng));
        }
    }
    let raw = GramMatrix::new(values, all.clone(), all, GramState::Raw).unwrap();
    let fit: Vec<usize> = (0..45).collect();
    let held: Vec<usize> = (45..60).collect();
    let (train, forward, reverse) = kernel::holdout_blocks(&raw, &fit, &held).unwrap();
    for method in [PostProcess::Psd, PostProcess::Coincidence] {
        let (k, test) = kernel::postprocess(method, &train, Some((&forward, &reverse))).unwrap();
        let model = ovo_fit(&k, &labels[..45], 1.0, &SmoConfig::default()).unwrap();
        let predicted = model.predict(&test.unwrap()).unwrap();
        assert_eq!(predicted, labels[45..].to_vec(), "{method}");
    }
}
