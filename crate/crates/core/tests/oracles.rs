//! Library kernels against deliberately naive reimplementations.

mod common;

use dualnorm::backbone::FeatureTap;
use dualnorm::evalkit::{cmc_curve, mean_ap, pairwise_euclidean, FeatureSet};
use dualnorm::tensor::{conv2d_forward, ConvKind, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracle::{brute_ap, brute_cmc, naive_conv, random_instance};

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in [ConvKind::Standard3x3, ConvKind::Pointwise1x1, ConvKind::Depthwise3x3] {
        for stride in [1, 2] {
            for (h, w) in [(7, 5), (8, 4), (1, 1), (2, 3)] {
                let (cin, cout) = if kind == ConvKind::Depthwise3x3 { (5, 5) } else { (5, 6) };
                let x = Tensor::<f64>::uniform(Shape::new(2, cin, h, w), -1.0, 1.0, &mut rng);
                let wt = Tensor::<f64>::uniform(kind.weight_shape(cin, cout), -1.0, 1.0, &mut rng);
                let got = conv2d_forward(&x, &wt, stride, kind).unwrap();
                let want = naive_conv(&x, &wt, stride, kind);
                assert_eq!(got.len(), want.len(), "{kind:?} s{stride} {h}x{w}");
                let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-12, "{kind:?} s{stride} {h}x{w}: {diff:e}");
            }
        }
    }
}

#[test]
fn conv_f32_matches_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::<f64>::uniform(Shape::new(3, 8, 16, 8), -1.0, 1.0, &mut rng);
    let w = Tensor::<f64>::uniform(ConvKind::Standard3x3.weight_shape(8, 12), -1.0, 1.0, &mut rng);
    let got = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), 2, ConvKind::Standard3x3).unwrap();
    let want = naive_conv(&x, &w, 2, ConvKind::Standard3x3);
    let diff = got.data().iter().zip(&want).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff:e}");
}

fn features(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> FeatureSet {
    let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureSet::new(dim, data, (0..rows).collect(), FeatureTap::PostFn).unwrap()
}

#[test]
fn euclidean_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (p, g) = (features(&mut rng, 10, 16), features(&mut rng, 20, 16));
    let d = pairwise_euclidean(&p, &g).unwrap();
    for i in 0..10 {
        for j in 0..20 {
            let mut s = 0.0f64;
            for k in 0..16 {
                let t = p.row(i)[k] as f64 - g.row(j)[k] as f64;
                s += t * t;
            }
            assert!((d[i * 20 + j] - s.sqrt()).abs() < 1e-5);
        }
    }
}

#[test]
fn cmc_and_map_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ks: Vec<usize> = (1..=50).collect();
    for trial in 0..200 {
        let q = rng.gen_range(1..=20);
        let g = rng.gen_range(2..=50);
        let ids = rng.gen_range(1..=g.min(12));
        let (d, p, gl) = random_instance(&mut rng, q, g, ids, trial % 2 == 0);
        assert_eq!(cmc_curve(&d, &p, &gl, &ks).unwrap(), brute_cmc(&d, &p, &gl, &ks), "trial {trial}");
        let (m, want) = (mean_ap(&d, &p, &gl).unwrap(), brute_ap(&d, &p, &gl));
        assert_eq!(m, want, "trial {trial}");
    }
}

#[test]
fn hand_worked_retrieval() {
    // Probe 0 (id 7): gallery ids [3, 7, 7] at distances [0.1, 0.5, 0.2].
    let d = [0.1, 0.5, 0.2];
    let (p, g) = ([7], [3, 7, 7]);
    assert_eq!(cmc_curve(&d, &p, &g, &[1, 2, 3]).unwrap(), vec![0.0, 1.0, 1.0]);
    let ap = mean_ap(&d, &p, &g).unwrap();
    assert!((ap - (1.0 / 2.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn missing_gallery_identity_is_a_protocol_error() {
    let e = cmc_curve(&[1.0, 2.0], &[5], &[1, 2], &[1]).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}
