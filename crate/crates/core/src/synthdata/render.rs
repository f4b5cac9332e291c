use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::domain::{DomainSpec, SampleDraw, StyleSpec};
use crate::tensor::{Shape, Tensor};

/// Nominal image size; 2:1 pedestrian aspect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub const DESK: ImageSize = ImageSize { height: 64, width: 32 };

    pub fn pixels(self) -> usize {
        3 * self.height * self.width
    }

    pub fn shape(self, n: usize) -> Shape {
        Shape::new(n, 3, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stripe {
    pub color: [f64; 3],
    /// Centre as a fraction of the torso height.
    pub center: f64,
    pub thickness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub color: [f64; 3],
    pub right: bool,
    pub height: f64,
}

/// Appearance of one person, drawn once and shared by every domain it is rendered in.
/// Lengths are fractions of the figure box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: usize,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub top: [f64; 3],
    pub bottom: [f64; 3],
    pub shoes: [f64; 3],
    pub head_size: f64,
    pub torso_len: f64,
    pub shoulder_width: f64,
    pub leg_width: f64,
    pub stripe: Option<Stripe>,
    pub bag: Option<Bag>,
}

fn color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl IdentitySpec {
    pub fn random<R: Rng>(identity_id: usize, rng: &mut R) -> Self {
        let tone = rng.gen_range(0.0..1.0);
        let skin = [0.45 + 0.45 * tone, 0.32 + 0.4 * tone, 0.25 + 0.35 * tone];
        let stripe = rng.gen_bool(0.45).then(|| Stripe {
            color: color(rng, 0.05, 0.95),
            center: rng.gen_range(0.25..0.75),
            thickness: rng.gen_range(0.05..0.12),
        });
        let bag = rng.gen_bool(0.35).then(|| Bag {
            color: color(rng, 0.05, 0.9),
            right: rng.gen_bool(0.5),
            height: rng.gen_range(0.12..0.22),
        });
        IdentitySpec {
            identity_id,
            skin,
            hair: color(rng, 0.02, 0.45),
            top: color(rng, 0.03, 0.97),
            bottom: color(rng, 0.03, 0.8),
            shoes: color(rng, 0.02, 0.6),
            head_size: rng.gen_range(0.10..0.14),
            torso_len: rng.gen_range(0.30..0.40),
            shoulder_width: rng.gen_range(0.55..0.85),
            leg_width: rng.gen_range(0.16..0.26),
            stripe,
            bag,
        }
    }

    /// Colour at figure coordinates `(u, v)` (both 0..1 over the figure box), if any part covers it.
    fn paint(&self, u: f64, v: f64, aspect_ratio: f64) -> Option<[f64; 3]> {
        let du = u - 0.5;
        let hs = self.head_size;
        let torso_top = 2.0 * hs;
        let torso_end = torso_top + self.torso_len;
        let half_shoulder = 0.5 * self.shoulder_width;

        if let Some(bag) = &self.bag {
            let side = if bag.right { du } else { -du };
            let (v0, v1) = (torso_top + 0.12, torso_top + 0.12 + bag.height);
            if side > half_shoulder - 0.04 && side < half_shoulder + 0.2 && v > v0 && v < v1 {
                return Some(bag.color);
            }
        }
        // head: ellipse that is round in pixel space
        let rx = hs * aspect_ratio * 0.8;
        let (hx, hy) = (du / rx, (v - hs) / hs);
        if hx * hx + hy * hy <= 1.0 {
            return Some(if v < hs * 0.75 { self.hair } else { self.skin });
        }
        if v >= torso_top && v < torso_end {
            let t = (v - torso_top) / self.torso_len;
            let half = half_shoulder * (1.0 - 0.15 * t);
            if du.abs() <= half {
                if let Some(s) = &self.stripe {
                    if (t - s.center).abs() < 0.5 * s.thickness / self.torso_len {
                        return Some(s.color);
                    }
                }
                return Some(self.top);
            }
            // arms: sleeve, then skin
            if du.abs() <= half + 0.12 && t < 0.9 {
                return Some(if t < 0.45 { self.top } else { self.skin });
            }
            return None;
        }
        if v >= torso_end && v < 1.0 {
            let a = du.abs();
            if a >= 0.025 && a <= self.leg_width + 0.025 {
                return Some(if v >= 0.95 { self.shoes } else { self.bottom });
            }
        }
        None
    }
}

pub const BACKGROUND: [f64; 3] = [0.56, 0.55, 0.52];

/// Figure box height and width as fractions of the image height.
const FIGURE_HEIGHT: f64 = 0.86;
const FIGURE_WIDTH: f64 = 0.42;

/// Geometry only: the identity under the draw's scale, aspect and translation,
/// 2×2 supersampled, before any photometric change. Channel-major `3×H×W`.
pub fn render_content(identity: &IdentitySpec, draw: &SampleDraw, size: ImageSize) -> Vec<f64> {
    let (h, w) = (size.height, size.width);
    let fh = FIGURE_HEIGHT * h as f64 * draw.scale;
    let fw = FIGURE_WIDTH * h as f64 * draw.scale * draw.aspect;
    let cx = 0.5 * w as f64 + draw.translate_x;
    let cy = 0.5 * h as f64 + draw.translate_y;
    let aspect_ratio = fh / fw;
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..2 {
                for sx in 0..2 {
                    let px = x as f64 + 0.25 + 0.5 * sx as f64;
                    let py = y as f64 + 0.25 + 0.5 * sy as f64;
                    let u = (px - cx) / fw + 0.5;
                    let v = (py - cy) / fh + 0.5;
                    let c = if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                        identity.paint(u, v, aspect_ratio).unwrap_or(BACKGROUND)
                    } else {
                        BACKGROUND
                    };
                    for k in 0..3 {
                        acc[k] += 0.25 * c[k];
                    }
                }
            }
            for k in 0..3 {
                out[(k * h + y) * w + x] = acc[k];
            }
        }
    }
    out
}

/// Per-channel `gain·x^contrast + offset`, optional clamp, then additive Gaussian noise.
pub fn apply_style(pixels: &mut [f64], draw: &SampleDraw, style: &StyleSpec) {
    let plane = pixels.len() / 3;
    for (k, chan) in pixels.chunks_mut(plane).enumerate() {
        for p in chan.iter_mut() {
            let v = draw.gain[k] * p.max(0.0).powf(draw.contrast) + draw.offset[k];
            *p = if style.clamp { v.clamp(0.0, 1.0) } else { v };
        }
    }
    if style.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw.noise_seed);
        let normal = Normal::new(0.0, style.noise_sigma).expect("sigma checked by domain validation");
        for p in pixels.iter_mut() {
            let v = *p + normal.sample(&mut rng);
            *p = if style.clamp { v.clamp(0.0, 1.0) } else { v };
        }
    }
}

/// Identity → content transform → style transform → noise, as a `1×3×H×W` tensor.
pub fn render_sample(identity: &IdentitySpec, domain: &DomainSpec, draw: &SampleDraw, size: ImageSize) -> Tensor<f32> {
    let mut px = render_content(identity, draw, size);
    apply_style(&mut px, draw, &domain.style);
    let data = px.into_iter().map(|v| v as f32).collect();
    Tensor::from_vec(size.shape(1), data).expect("render size matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person() -> IdentitySpec {
        IdentitySpec::random(0, &mut ChaCha8Rng::seed_from_u64(5))
    }

    #[test]
    fn gain_doubles_gray_without_clamp() {
        let mut px = vec![0.3; 3 * 4];
        let draw = SampleDraw { gain: [2.0; 3], ..SampleDraw::neutral() };
        let style = StyleSpec { clamp: false, ..StyleSpec::identity() };
        apply_style(&mut px, &draw, &style);
        assert!(px.iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn neutral_draw_keeps_content() {
        let id = person();
        let draw = SampleDraw::neutral();
        let content = render_content(&id, &draw, ImageSize::DESK);
        let mut styled = content.clone();
        apply_style(&mut styled, &draw, &StyleSpec::identity());
        assert_eq!(content, styled);
    }

    #[test]
    fn integer_translation_shifts_the_image() {
        let id = person();
        let size = ImageSize::DESK;
        let a = render_content(&id, &SampleDraw::neutral(), size);
        let b = render_content(&id, &SampleDraw { translate_x: 2.0, ..SampleDraw::neutral() }, size);
        let (h, w) = (size.height, size.width);
        for k in 0..3 {
            for y in 0..h {
                for x in 2..w {
                    assert_eq!(b[(k * h + y) * w + x], a[(k * h + y) * w + x - 2]);
                }
            }
        }
    }

    #[test]
    fn figure_differs_from_background() {
        let px = render_content(&person(), &SampleDraw::neutral(), ImageSize::DESK);
        let off = px[..px.len() / 3].iter().filter(|&&v| v != BACKGROUND[0]).count();
        assert!(off > 200, "figure covers {off} pixels");
    }
}
