//! Fixed-order reductions. Sixteen interleaved accumulators combined as a
//! tree, so results do not depend on the target's vector width.

use super::Scalar;

const LANES: usize = 16;

#[inline]
fn combine<T: Scalar>(acc: [T; LANES], tail: T) -> T {
    let mut v = acc;
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for i in 0..width {
            v[i] = v[i] + v[i + width];
        }
    }
    v[0] + tail
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let tail = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
    combine(acc, tail)
}

pub(crate) fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let c = a.chunks_exact(LANES);
    let r = c.remainder();
    for x in c {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i];
        }
    }
    combine(acc, r.iter().fold(T::zero(), |s, &x| s + x))
}

/// Sum in f64 regardless of `T`.
pub(crate) fn sum_f64<T: Scalar>(a: &[T]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let c = a.chunks_exact(LANES);
    let r = c.remainder();
    for x in c {
        for i in 0..LANES {
            acc[i] += x[i].as_f64();
        }
    }
    combine(acc, r.iter().map(|v| v.as_f64()).fold(0.0, |s, x| s + x))
}

/// `Σ (a - mean)²` in f64.
pub(crate) fn sq_dev_f64<T: Scalar>(a: &[T], mean: f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let c = a.chunks_exact(LANES);
    let r = c.remainder();
    for x in c {
        for i in 0..LANES {
            let d = x[i].as_f64() - mean;
            acc[i] += d * d;
        }
    }
    let tail = r.iter().fold(0.0, |s, v| {
        let d = v.as_f64() - mean;
        s + d * d
    });
    combine(acc, tail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_plain_sums_on_integers() {
        let a: Vec<f64> = (0..37).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..37).map(|i| (i % 5) as f64).collect();
        assert_eq!(sum(&a), 666.0);
        assert_eq!(sum_f64(&a), 666.0);
        let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(dot(&a, &b), d);
        let m = 18.0;
        let s: f64 = a.iter().map(|x| (x - m) * (x - m)).sum();
        assert_eq!(sq_dev_f64(&a, m), s);
        assert_eq!(sum::<f32>(&[]), 0.0);
    }
}
