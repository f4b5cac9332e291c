use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::ImageSize;

/// Zero padding on each side before the random crop.
pub const CROP_PADDING: usize = 4;

/// Shuffled mini-batches over the union of all source-domain samples.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Batches for one epoch. A fresh permutation per epoch, a function of `(seed, epoch)` only.
    /// A trailing batch of one sample is merged into the previous batch, since batch
    /// statistics over a single item are degenerate.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order = self.indices.clone();
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("len > 1").extend(tail);
        }
        batches
    }
}

/// Domains are mixed rather than balanced per batch: labels of every source share one classifier.
pub fn multi_source_batch_sampler(indices: Vec<usize>, batch_size: usize, seed: u64) -> BatchSampler {
    assert!(batch_size > 0, "batch size must be positive");
    BatchSampler { indices, batch_size, seed }
}

/// One draw of the training augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Crop origin inside the padded image; `(CROP_PADDING, CROP_PADDING)` is no shift.
    pub dy: usize,
    pub dx: usize,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { flip: false, dy: CROP_PADDING, dx: CROP_PADDING };

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        AugmentDraw {
            flip: rng.gen_bool(0.5),
            dy: rng.gen_range(0..=2 * CROP_PADDING),
            dx: rng.gen_range(0..=2 * CROP_PADDING),
        }
    }
}

/// Horizontal flip, then zero-pad and crop back to the original size.
pub fn augment_with(image: &[f32], size: ImageSize, draw: AugmentDraw) -> Vec<f32> {
    let (h, w) = (size.height as isize, size.width as isize);
    let (oy, ox) = (draw.dy as isize - CROP_PADDING as isize, draw.dx as isize - CROP_PADDING as isize);
    let mut out = vec![0.0; image.len()];
    let plane = size.height * size.width;
    for (src, dst) in image.chunks(plane).zip(out.chunks_mut(plane)) {
        for y in 0..h {
            let sy = y + oy;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x + ox;
                if sx < 0 || sx >= w {
                    continue;
                }
                let fx = if draw.flip { w - 1 - sx } else { sx };
                dst[(y * w + x) as usize] = src[(sy * w + fx) as usize];
            }
        }
    }
    out
}

pub fn augment<R: Rng>(image: &[f32], size: ImageSize, rng: &mut R) -> Vec<f32> {
    augment_with(image, size, AugmentDraw::random(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_covers_every_index_once() {
        let s = multi_source_batch_sampler((0..129).collect(), 64, 9);
        let batches = s.epoch(0);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 65]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..129).collect::<Vec<_>>());
        assert_ne!(s.epoch(0), s.epoch(1));
        assert_eq!(s.epoch(3), s.epoch(3));
    }

    #[test]
    fn identity_draw_is_a_copy() {
        let size = ImageSize { height: 6, width: 4 };
        let img: Vec<f32> = (0..size.pixels()).map(|i| i as f32).collect();
        assert_eq!(augment_with(&img, size, AugmentDraw::IDENTITY), img);
    }

    #[test]
    fn shift_pads_with_zeros() {
        let size = ImageSize { height: 6, width: 4 };
        let img = vec![1.0f32; size.pixels()];
        let out = augment_with(&img, size, AugmentDraw { flip: false, dy: CROP_PADDING, dx: CROP_PADDING + 1 });
        for row in out.chunks(4) {
            assert_eq!(row, &[1.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn flip_reverses_rows() {
        let size = ImageSize { height: 2, width: 3 };
        let img: Vec<f32> = (0..size.pixels()).map(|i| i as f32).collect();
        let out = augment_with(&img, size, AugmentDraw { flip: true, ..AugmentDraw::IDENTITY });
        assert_eq!(&out[..6], &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }
}
