//! Invariants checked over random inputs.

mod common;

use dualnorm::backbone::{build_model, BackboneConfig, FeatureTap};
use dualnorm::evalkit::{cmc_curve, extract_features, mean_ap};
use dualnorm::norm::{BatchNorm2d, InstanceNorm2d};
use dualnorm::synthdata::{augment_with, multi_source_batch_sampler, AugmentDraw, ImageSize, CROP_PADDING};
use dualnorm::tensor::{Mode, Shape, Tensor};
use proptest::prelude::*;

const SHAPE: Shape = Shape::new(2, 3, 4, 3);

fn plane_var(p: &[f64]) -> f64 {
    let m = p.iter().sum::<f64>() / p.len() as f64;
    p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / p.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Per-(instance, channel) `a·x + b` with `a > 0` leaves instance norm unchanged.
    /// The 1e-5 epsilon makes this exact only when the plane variance dwarfs it,
    /// so planes are kept at variance ≥ 1.
    #[test]
    fn instance_norm_removes_style(
        x in prop::collection::vec(-10.0f64..10.0, SHAPE.len()),
        a in prop::collection::vec(1.0f64..10.0, 6),
        b in prop::collection::vec(-50.0f64..50.0, 6),
    ) {
        let x = Tensor::from_vec(SHAPE, x).unwrap();
        prop_assume!((0..2).all(|n| (0..3).all(|c| plane_var(x.plane(n, c)) >= 1.0)));
        let mut styled = x.clone();
        for n in 0..2 {
            for c in 0..3 {
                for v in styled.plane_mut(n, c) {
                    *v = a[n * 3 + c] * *v + b[n * 3 + c];
                }
            }
        }
        let mut inorm = InstanceNorm2d::<f64>::new(3, false);
        let y0 = inorm.forward(&x).unwrap();
        let y1 = inorm.forward(&styled).unwrap();
        prop_assert!(y0.max_abs_diff(&y1) < 1e-5);
    }

    /// Train-mode batch norm standardizes every channel over B·H·W.
    #[test]
    fn batch_norm_moments(x in prop::collection::vec(-5.0f64..5.0, 8 * 4 * 2 * 2)) {
        let s = Shape::new(8, 4, 2, 2);
        let x = Tensor::from_vec(s, x).unwrap();
        let channel = |t: &Tensor<f64>, c: usize| -> Vec<f64> { (0..8).flat_map(|n| t.plane(n, c).to_vec()).collect() };
        prop_assume!((0..4).all(|c| plane_var(&channel(&x, c)) >= 1.0));
        let y = BatchNorm2d::<f64>::new(4).forward(&x, Mode::Train).unwrap();
        for c in 0..4 {
            let v = channel(&y, c);
            let m = v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((plane_var(&v) - 1.0).abs() < 1e-5);
        }
    }

    /// Cumulative match is non-decreasing in k and reaches 1 at the gallery size.
    #[test]
    fn cmc_is_monotone(
        d in prop::collection::vec(0.0f64..10.0, 5 * 12),
        probes in prop::collection::vec(0usize..4, 5),
    ) {
        let gallery: Vec<usize> = (0..12).map(|j| j % 4).collect();
        let ks: Vec<usize> = (1..=12).collect();
        let cmc = cmc_curve(&d, &probes, &gallery, &ks).unwrap();
        prop_assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(cmc[11], 1.0);
    }

    /// Reordering the gallery (columns and labels together) changes nothing
    /// when distances are distinct.
    #[test]
    fn retrieval_ignores_gallery_order(
        d in prop::collection::vec(0.0f64..10.0, 4 * 9),
        perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));
        let gallery: Vec<usize> = (0..9).map(|j| j % 3).collect();
        let probes = [0, 1, 2, 1];
        let permuted_d: Vec<f64> = (0..4).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| d[i * 9 + j]).collect();
        let permuted_g: Vec<usize> = perm.iter().map(|&j| gallery[j]).collect();
        let ks = [1, 3, 5, 9];
        prop_assert_eq!(cmc_curve(&d, &probes, &gallery, &ks).unwrap(), cmc_curve(&permuted_d, &probes, &permuted_g, &ks).unwrap());
        let (m0, m1) = (mean_ap(&d, &probes, &gallery).unwrap(), mean_ap(&permuted_d, &probes, &permuted_g).unwrap());
        prop_assert!((m0 - m1).abs() < 1e-12);
    }

    /// Every epoch visits each training index exactly once, in batches of at least two.
    #[test]
    fn sampler_epoch_is_a_permutation(n in 2usize..300, batch in 2usize..70, seed in any::<u64>(), epoch in 0u64..50) {
        let indices: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let batches = multi_source_batch_sampler(indices.clone(), batch, seed).epoch(epoch);
        prop_assert!(batches.iter().all(|b| b.len() >= 2));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, indices);
    }

    /// Flipping twice without a shift restores the image.
    #[test]
    fn flip_is_an_involution(px in prop::collection::vec(-1.0f32..1.0, 3 * 8 * 6)) {
        let size = ImageSize { height: 8, width: 6 };
        let flip = AugmentDraw { flip: true, ..AugmentDraw::IDENTITY };
        let once = augment_with(&px, size, flip);
        prop_assert_ne!(&once, &px);
        prop_assert_eq!(augment_with(&once, size, flip), px);
    }

    /// A shift moves pixels by exactly the offset and zero-fills the border.
    #[test]
    fn crop_shifts_content(px in prop::collection::vec(0.1f32..1.0, 8 * 6), dy in 0..=2 * CROP_PADDING, dx in 0..=2 * CROP_PADDING) {
        let size = ImageSize { height: 8, width: 6 };
        let mut img = px.clone();
        img.extend(px.iter().map(|v| -v));
        img.extend(px.iter().map(|v| 2.0 * v));
        let out = augment_with(&img, size, AugmentDraw { flip: false, dy, dx });
        let (oy, ox) = (dy as isize - CROP_PADDING as isize, dx as isize - CROP_PADDING as isize);
        for y in 0..8isize {
            for x in 0..6isize {
                let (sy, sx) = (y + oy, x + ox);
                let want = if (0..8).contains(&sy) && (0..6).contains(&sx) { px[(sy * 6 + sx) as usize] } else { 0.0 };
                prop_assert_eq!(out[(y * 6 + x) as usize], want);
            }
        }
    }
}

#[test]
fn extraction_does_not_depend_on_batch_size() {
    let corpus = common::small_corpus(3);
    let samples = corpus.manifest.test_indices();
    let config = BackboneConfig::desk(corpus.manifest.num_train_identities);
    let mut model = build_model::<f32>(&config, 5).unwrap();
    // Move running statistics off their initial values first.
    let train = corpus.manifest.train_indices();
    model.forward_logits(&corpus.batch(&train[..16]), Mode::Train).unwrap();
    for tap in [FeatureTap::PreFn, FeatureTap::PostFn] {
        let whole = extract_features(&mut model, &corpus, &samples, tap, samples.len()).unwrap();
        for b in [1, 5, 7] {
            let f = extract_features(&mut model, &corpus, &samples, tap, b).unwrap();
            assert_eq!(f.data, whole.data, "batch size {b}, {tap:?}");
        }
    }
}
