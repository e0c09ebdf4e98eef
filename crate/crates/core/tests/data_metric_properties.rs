use proptest::prelude::*;

use umc::data::{add_gaussian_noise, class_to_category, LabelMap, NoiseSpec};
use umc::metrics::{confusion, miou, pixel_accuracy, psnr};
use umc::{gen_synthetic, DataConfig, Tensor};

fn image(values: Vec<u8>) -> Tensor<f32> {
    let n = values.len() / 3;
    Tensor::new(vec![3, 1, n], values.into_iter().map(f32::from).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_label_permutations(k in 2usize..7, pixels in prop::collection::vec((0u8..6, 0u8..6), 1..200),
                                         perm_seed in any::<u64>()) {
        let pred: Vec<u8> = pixels.iter().map(|&(p, _)| p % k as u8).collect();
        let gt: Vec<u8> = pixels.iter().map(|&(_, g)| g % k as u8).collect();
        let mut perm: Vec<u8> = (0..k as u8).collect();
        umc::Rng::new(perm_seed).shuffle(&mut perm);
        let pp: Vec<u8> = pred.iter().map(|&p| perm[p as usize]).collect();
        let pg: Vec<u8> = gt.iter().map(|&g| perm[g as usize]).collect();
        let a = confusion(&pred, &gt, k, 255).unwrap();
        let b = confusion(&pp, &pg, k, 255).unwrap();
        prop_assert!((miou(&a).unwrap().0 - miou(&b).unwrap().0).abs() < 1e-12);
        prop_assert_eq!(pixel_accuracy(&a).unwrap(), pixel_accuracy(&b).unwrap());
        let (m, per) = miou(&a).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!(per.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(m == 1.0, pred == gt);
    }

    #[test]
    fn confusion_adds_over_tiles(k in 2usize..5, pixels in prop::collection::vec((0u8..5, 0u8..6), 2..200), cut in any::<prop::sample::Index>()) {
        let pred: Vec<u8> = pixels.iter().map(|&(p, _)| p % k as u8).collect();
        let gt: Vec<u8> = pixels.iter().map(|&(_, g)| if g == 5 { 255 } else { g % k as u8 }).collect();
        let c = cut.index(pixels.len());
        let mut parts = confusion(&pred[..c], &gt[..c], k, 255).unwrap();
        parts.merge(&confusion(&pred[c..], &gt[c..], k, 255).unwrap()).unwrap();
        let whole = confusion(&pred, &gt, k, 255).unwrap();
        prop_assert_eq!(whole.total() as usize, gt.iter().filter(|&&g| g != 255).count());
        prop_assert_eq!(parts, whole);
    }

    #[test]
    fn psnr_symmetric_and_decreasing(values in prop::collection::vec(0u8..=255, 3..60), d in 1.0f32..20.0) {
        let n = values.len() - values.len() % 3;
        let a = image(values[..n].to_vec());
        let shift = |delta: f32| Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v + delta).collect()).unwrap();
        let (b, c) = (shift(d), shift(d + 1.0));
        prop_assert_eq!(psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
        prop_assert!(psnr(&a, &c, 255.0).unwrap() < psnr(&a, &b, 255.0).unwrap());
    }

    #[test]
    fn clamped_noise_stays_in_range(values in prop::collection::vec(0u8..=255, 3..90), sigma in 0.0f64..80.0, seed in any::<u64>()) {
        let n = values.len() - values.len() % 3;
        let noisy = add_gaussian_noise(&image(values[..n].to_vec()), &NoiseSpec { sigma, seed }).unwrap();
        prop_assert!(noisy.data().iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn category_table_is_total(classes in 2usize..40, cats in 1usize..8) {
        prop_assume!(cats <= classes);
        let table = class_to_category(classes, cats);
        prop_assert_eq!(table.len(), classes);
        prop_assert!(table.iter().all(|&c| (c as usize) < cats));
        prop_assert_eq!(table[0], 0);
    }

    #[test]
    fn coarsen_is_idempotent(h in 1usize..4, w in 1usize..4, labels in prop::collection::vec(0u8..4, 256)) {
        let (h, w) = (8 * h, 8 * w);
        let m = LabelMap::new(h, w, labels.iter().cycle().take(h * w).copied().collect()).unwrap();
        let c = m.coarsen(8);
        prop_assert_eq!(c.coarsen(8), c);
    }
}

#[test]
fn psnr_never_increases_with_sigma() {
    let data = gen_synthetic(&DataConfig::new(4, 32, 5, 3, 2, 0.0)).unwrap();
    let sigmas = [0.0, 5.0, 15.0, 30.0, 45.0, 60.0, 90.0];
    let mut means = vec![0.0; sigmas.len()];
    for seed in 0..32u64 {
        for s in &data.samples {
            let mut prev = f64::INFINITY;
            for (i, &sigma) in sigmas.iter().enumerate() {
                let noisy = add_gaussian_noise(&s.clean, &NoiseSpec { sigma, seed }).unwrap();
                let p = psnr(&noisy, &s.clean, 255.0).unwrap();
                assert!(p <= prev, "seed {seed}: sigma {sigma} gave {p} after {prev}");
                prev = p;
                if p.is_finite() {
                    means[i] += p;
                }
            }
        }
    }
    assert!(means[1..].windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn coarse_labels_mostly_agree_with_fine() {
    for seed in 0..6 {
        let data = gen_synthetic(&DataConfig::new(8, 64, 6, 3, seed, 0.0)).unwrap();
        let (mut same, mut total) = (0usize, 0usize);
        for s in &data.samples {
            same += s.fine.data.iter().zip(&s.coarse.data).filter(|(a, b)| a == b).count();
            total += s.fine.data.len();
            let mapped = s.fine.map(|c| data.class_to_category[c as usize]);
            assert_eq!(mapped, s.category);
        }
        let agreement = same as f64 / total as f64;
        assert!(agreement >= 0.6, "seed {seed}: {agreement}");
    }
}

#[test]
fn generator_replays_exactly() {
    let cfg = DataConfig::new(5, 32, 4, 2, 11, 30.0);
    let a = gen_synthetic(&cfg).unwrap();
    let b = gen_synthetic(&cfg).unwrap();
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.noisy.data(), y.noisy.data());
        assert_eq!(x.fine, y.fine);
    }
}
