use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`, written as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Span(lo, hi)
    }

    pub const fn point(v: f64) -> Self {
        Span(v, v)
    }

    pub fn lo(self) -> f64 {
        self.0
    }

    pub fn hi(self) -> f64 {
        self.1
    }

    pub fn width(self) -> f64 {
        self.1 - self.0
    }

    pub fn mid(self) -> f64 {
        0.5 * (self.0 + self.1)
    }

    /// Uniform draw; a zero-width span returns its point without consuming randomness.
    pub fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        if self.width() == 0.0 {
            self.0
        } else {
            rng.gen_range(self.0..=self.1)
        }
    }

    /// Same midpoint, width multiplied by `k`.
    pub fn widened(self, k: f64) -> Span {
        let (m, h) = (self.mid(), 0.5 * self.width() * k);
        Span(m - h, m + h)
    }
}

/// Photometric part of a domain: what a per-channel first-order statistic shift can express,
/// plus sensor noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    /// Per-channel multiplicative gain ranges (R, G, B).
    pub gain: [Span; 3],
    /// Per-channel additive offset ranges.
    pub offset: [Span; 3],
    /// Exponent applied to intensities before the gain.
    pub contrast: Span,
    pub noise_sigma: f64,
    /// Clamp styled pixels to [0, 1].
    pub clamp: bool,
}

impl StyleSpec {
    pub fn identity() -> Self {
        StyleSpec {
            gain: [Span::point(1.0); 3],
            offset: [Span::point(0.0); 3],
            contrast: Span::point(1.0),
            noise_sigma: 0.0,
            clamp: true,
        }
    }

    fn spans(&self) -> impl Iterator<Item = Span> + '_ {
        self.gain.iter().chain(&self.offset).copied().chain(std::iter::once(self.contrast))
    }
}

/// Geometric part of a domain: camera distance, framing and viewpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentSpec {
    /// Figure size relative to nominal.
    pub scale: Span,
    /// Horizontal and vertical shift in pixels.
    pub translate_x: Span,
    pub translate_y: Span,
    /// Width multiplier (viewpoint / focal-length squash).
    pub aspect: Span,
}

impl ContentSpec {
    pub fn identity() -> Self {
        ContentSpec {
            scale: Span::point(1.0),
            translate_x: Span::point(0.0),
            translate_y: Span::point(0.0),
            aspect: Span::point(1.0),
        }
    }

    fn spans(&self) -> [Span; 4] {
        [self.scale, self.translate_x, self.translate_y, self.aspect]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub style: StyleSpec,
    pub content: ContentSpec,
    pub rng_seed: u64,
}

/// Per-sample transform parameters; together with the identity they determine the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDraw {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub contrast: f64,
    pub scale: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub aspect: f64,
    pub noise_seed: u64,
}

impl SampleDraw {
    /// No style, no geometric change, no noise.
    pub fn neutral() -> Self {
        SampleDraw {
            gain: [1.0; 3],
            offset: [0.0; 3],
            contrast: 1.0,
            scale: 1.0,
            translate_x: 0.0,
            translate_y: 0.0,
            aspect: 1.0,
            noise_seed: 0,
        }
    }
}

impl DomainSpec {
    /// Checks the value constraints. `train` additionally requires every range to have
    /// nonzero width unless `allow_degenerate` is set (the no-shift control corpus).
    pub fn validate(&self, train: bool, allow_degenerate: bool) -> Result<()> {
        let name = &self.name;
        if self.style.gain.iter().any(|g| g.lo() <= 0.0) {
            return Err(Error::Config(format!("domain {name}: gains must be > 0")));
        }
        let mut spans = self.style.spans().chain(self.content.spans());
        if spans.any(|s| !(s.lo() <= s.hi()) || !s.lo().is_finite() || !s.hi().is_finite()) {
            return Err(Error::Config(format!("domain {name}: every range needs lo <= hi")));
        }
        let sc = self.content.scale;
        if sc.lo() <= 0.5 || sc.hi() >= 1.5 {
            return Err(Error::Config(format!(
                "domain {name}: scale range [{}, {}] must lie inside (0.5, 1.5)",
                sc.lo(),
                sc.hi()
            )));
        }
        if self.content.aspect.lo() <= 0.0 || self.style.contrast.lo() <= 0.0 {
            return Err(Error::Config(format!("domain {name}: aspect and contrast must be > 0")));
        }
        if !(self.style.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("domain {name}: noise sigma must be >= 0")));
        }
        if train && !allow_degenerate && spans_degenerate(self) {
            return Err(Error::Config(format!(
                "training domain {name} has a zero-width range; only the no-shift control corpus may"
            )));
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> SampleDraw {
        let s = &self.style;
        let c = &self.content;
        SampleDraw {
            gain: [s.gain[0].sample(rng), s.gain[1].sample(rng), s.gain[2].sample(rng)],
            offset: [s.offset[0].sample(rng), s.offset[1].sample(rng), s.offset[2].sample(rng)],
            contrast: s.contrast.sample(rng),
            scale: c.scale.sample(rng),
            translate_x: c.translate_x.sample(rng),
            translate_y: c.translate_y.sample(rng),
            aspect: c.aspect.sample(rng),
            // 63 bits: TOML integers are signed
            noise_seed: rng.gen::<u64>() >> 1,
        }
    }

    /// Copy with every style and content range collapsed to its neutral point.
    pub fn degenerate(&self) -> DomainSpec {
        DomainSpec {
            style: StyleSpec { noise_sigma: self.style.noise_sigma, ..StyleSpec::identity() },
            content: ContentSpec::identity(),
            ..self.clone()
        }
    }

    /// Copy whose gain ranges are `k` times as wide about the same centres.
    pub fn with_gain_width(&self, k: f64) -> DomainSpec {
        let mut d = self.clone();
        for g in &mut d.style.gain {
            *g = g.widened(k);
        }
        d
    }
}

fn spans_degenerate(d: &DomainSpec) -> bool {
    d.style.spans().chain(d.content.spans()).any(|s| s.width() == 0.0)
}

fn span3(r: (f64, f64), g: (f64, f64), b: (f64, f64)) -> [Span; 3] {
    [Span::new(r.0, r.1), Span::new(g.0, g.1), Span::new(b.0, b.1)]
}

/// The three source domains of the desk benchmark: neutral daylight, warm indoor, dim cool.
pub fn desk_sources() -> Vec<DomainSpec> {
    let content = ContentSpec {
        scale: Span::new(0.85, 1.0),
        translate_x: Span::new(-1.5, 1.5),
        translate_y: Span::new(-1.5, 1.5),
        aspect: Span::new(0.92, 1.08),
    };
    vec![
        DomainSpec {
            domain_id: 0,
            name: "daylight".into(),
            style: StyleSpec {
                gain: span3((0.9, 1.1), (0.9, 1.1), (0.9, 1.1)),
                offset: [Span::new(-0.05, 0.05); 3],
                contrast: Span::new(0.9, 1.1),
                noise_sigma: 0.02,
                clamp: true,
            },
            content: content.clone(),
            rng_seed: 11,
        },
        DomainSpec {
            domain_id: 1,
            name: "warm-indoor".into(),
            style: StyleSpec {
                gain: span3((1.0, 1.25), (0.8, 1.0), (0.55, 0.8)),
                offset: span3((0.0, 0.08), (0.0, 0.05), (-0.05, 0.0)),
                contrast: Span::new(0.75, 0.95),
                noise_sigma: 0.02,
                clamp: true,
            },
            content: ContentSpec { scale: Span::new(0.9, 1.05), ..content.clone() },
            rng_seed: 12,
        },
        DomainSpec {
            domain_id: 2,
            name: "dim-cool".into(),
            style: StyleSpec {
                gain: span3((0.5, 0.7), (0.6, 0.8), (0.8, 1.0)),
                offset: span3((-0.04, 0.02), (-0.02, 0.04), (0.0, 0.06)),
                contrast: Span::new(1.05, 1.35),
                noise_sigma: 0.02,
                clamp: true,
            },
            content: ContentSpec { scale: Span::new(0.8, 0.95), ..content },
            rng_seed: 13,
        },
    ]
}

/// Unseen target domain: green-tinted low-light surveillance with washed-out blacks,
/// small distant figures and loose framing.
pub fn desk_held_out() -> DomainSpec {
    DomainSpec {
        domain_id: 3,
        name: "night-surveillance".into(),
        style: StyleSpec {
            gain: span3((0.3, 0.55), (0.55, 0.85), (0.3, 0.5)),
            offset: span3((0.08, 0.2), (0.1, 0.22), (0.06, 0.16)),
            contrast: Span::new(1.2, 1.6),
            noise_sigma: 0.035,
            clamp: true,
        },
        content: ContentSpec {
            scale: Span::new(0.68, 0.82),
            translate_x: Span::new(-3.0, 3.0),
            translate_y: Span::new(-2.0, 4.0),
            aspect: Span::new(0.85, 1.15),
        },
        rng_seed: 14,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_domains_validate() {
        for d in desk_sources() {
            d.validate(true, false).unwrap();
        }
        desk_held_out().validate(false, false).unwrap();
    }

    #[test]
    fn degenerate_needs_permission() {
        let d = desk_sources()[0].degenerate();
        assert!(matches!(d.validate(true, false), Err(Error::Config(_))));
        d.validate(true, true).unwrap();
        let draw = d.draw(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(draw.gain, [1.0; 3]);
        assert_eq!(draw.scale, 1.0);
    }

    #[test]
    fn bad_ranges_rejected() {
        let mut d = desk_sources()[0].clone();
        d.style.gain[1] = Span::new(-0.1, 0.5);
        assert!(d.validate(true, false).is_err());
        let mut d = desk_sources()[0].clone();
        d.content.scale = Span::new(0.4, 1.0);
        assert!(d.validate(true, false).is_err());
        let mut d = desk_sources()[0].clone();
        d.style.contrast = Span::new(1.2, 1.0);
        assert!(d.validate(true, false).is_err());
    }

    #[test]
    fn widened_span_keeps_centre() {
        let s = Span::new(0.8, 1.0).widened(3.0);
        assert!((s.mid() - 0.9).abs() < 1e-12);
        assert!((s.width() - 0.6).abs() < 1e-12);
    }
}
