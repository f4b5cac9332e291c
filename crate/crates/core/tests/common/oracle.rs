//! Deliberately naive reimplementations shared by the oracle tests.

use dualnorm::tensor::{ConvKind, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, kind: ConvKind) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (k, pad) = (kind.kernel(), kind.padding() as isize);
    let oh = (xs.h + 2 * pad as usize - k) / stride + 1;
    let ow = (xs.w + 2 * pad as usize - k) / stride + 1;
    let mut out = Vec::new();
    for n in 0..xs.n {
        for o in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    let inputs: Vec<usize> = if kind == ConvKind::Depthwise3x3 { vec![o] } else { (0..xs.c).collect() };
                    for (wi, &ci) in inputs.iter().enumerate() {
                        let wc = if kind == ConvKind::Depthwise3x3 { 0 } else { wi };
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad;
                                let xx = (ox * stride + kx) as isize - pad;
                                if y >= 0 && xx >= 0 && (y as usize) < xs.h && (xx as usize) < xs.w {
                                    acc += x.at(n, ci, y as usize, xx as usize) * w.at(o, wc, ky, kx);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Position of gallery item `j` in the ranking: strictly closer items, plus
/// equally close items with a smaller index.
pub fn position(row: &[f64], j: usize) -> usize {
    (0..row.len()).filter(|&l| row[l] < row[j] || (row[l] == row[j] && l < j)).count()
}

pub fn brute_cmc(d: &[f64], probes: &[usize], gallery: &[usize], ks: &[usize]) -> Vec<f64> {
    let g = gallery.len();
    let firsts: Vec<usize> = probes
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &d[i * g..(i + 1) * g];
            (0..g).filter(|&j| gallery[j] == y).map(|j| position(row, j)).min().unwrap()
        })
        .collect();
    ks.iter()
        .map(|&k| firsts.iter().filter(|&&p| p < k).count() as f64 / probes.len() as f64)
        .collect()
}

pub fn brute_ap(d: &[f64], probes: &[usize], gallery: &[usize]) -> f64 {
    let g = gallery.len();
    let mut total = 0.0;
    for (i, &y) in probes.iter().enumerate() {
        let row = &d[i * g..(i + 1) * g];
        let mut pos: Vec<usize> = (0..g).filter(|&j| gallery[j] == y).map(|j| position(row, j)).collect();
        pos.sort_unstable();
        let ap: f64 = pos.iter().enumerate().map(|(m, &p)| (m + 1) as f64 / (p + 1) as f64).sum();
        total += ap / pos.len() as f64;
    }
    total / probes.len() as f64
}

/// Labels in `0..ids` for the gallery (every id present) and probes.
pub fn random_instance(rng: &mut ChaCha8Rng, q: usize, g: usize, ids: usize, ties: bool) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let mut gallery: Vec<usize> = (0..g).map(|j| j % ids).collect();
    for j in (1..g).rev() {
        gallery.swap(j, rng.gen_range(0..=j));
    }
    let probes = (0..q).map(|_| rng.gen_range(0..ids)).collect();
    let d = (0..q * g)
        .map(|_| if ties { rng.gen_range(0..4) as f64 } else { rng.gen_range(0.0..10.0) })
        .collect();
    (d, probes, gallery)
}
