//! Procedural stroke-glyph datasets.
//!
//! Ten glyph classes are drawn from two primitives, straight segments and
//! circular arcs, on a 28×28 canvas. Four families vary what else appears:
//!
//! | family                    | glyph tilt         | background         |
//! |---------------------------|--------------------|--------------------|
//! | `strokes`                 | small jitter       | blank              |
//! | `strokes_rotated`         | uniform [0°, 360°) | blank              |
//! | `strokes_noisybg`         | small jitter       | blank or smooth    |
//! | `strokes_rotated_noisybg` | uniform [0°, 360°) | blank or smooth    |
//!
//! [`Family::structures`] lists the primitive structures each family can
//! render, so containment between families holds by construction.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, DatasetError, Split};

pub const GLYPH_SIDE: usize = 28;
const GLYPH_HALF: f64 = 8.0;
const SCALE_RANGE: (f64, f64) = (0.85, 1.1);
const SHIFT_MAX: f64 = 3.0;
const HALF_WIDTH_RANGE: (f64, f64) = (0.9, 1.6);
const ENDPOINT_JITTER: f64 = 0.06;
const TILT_JITTER_DEG: f64 = 8.0;
const NOISE_GRID: usize = 5;
const NOISE_AMPLITUDE_MAX: f64 = 0.7;
/// Segment orientations are binned modulo 180° into this many bins.
pub const ORIENTATION_BINS: u8 = 12;
/// Arc openings are binned over 360° into this many bins.
pub const OPENING_BINS: u8 = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Primitive {
    Segment([f64; 2], [f64; 2]),
    /// Center, radius, start and end angle in degrees (counter-clockwise).
    Arc([f64; 2], f64, f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glyph {
    Ring,
    Bar,
    Cross,
    Ell,
    Tee,
    Arc,
    Zed,
    Tri,
    Vee,
    Theta,
}

pub const GLYPHS: [Glyph; 10] = [
    Glyph::Ring,
    Glyph::Bar,
    Glyph::Cross,
    Glyph::Ell,
    Glyph::Tee,
    Glyph::Arc,
    Glyph::Zed,
    Glyph::Tri,
    Glyph::Vee,
    Glyph::Theta,
];

impl Glyph {
    pub fn name(self) -> &'static str {
        match self {
            Glyph::Ring => "ring",
            Glyph::Bar => "bar",
            Glyph::Cross => "cross",
            Glyph::Ell => "ell",
            Glyph::Tee => "tee",
            Glyph::Arc => "arc",
            Glyph::Zed => "zed",
            Glyph::Tri => "tri",
            Glyph::Vee => "vee",
            Glyph::Theta => "theta",
        }
    }

    fn primitives(self) -> Vec<Primitive> {
        use Primitive::{Arc, Segment};
        let ring = Arc([0.0, 0.0], 0.8, 0.0, 360.0);
        match self {
            Glyph::Ring => vec![ring],
            Glyph::Bar => vec![Segment([0.0, -0.9], [0.0, 0.9])],
            Glyph::Cross => vec![Segment([0.0, -0.9], [0.0, 0.9]), Segment([-0.9, 0.0], [0.9, 0.0])],
            Glyph::Ell => vec![Segment([-0.5, -0.9], [-0.5, 0.9]), Segment([-0.5, 0.9], [0.6, 0.9])],
            Glyph::Tee => vec![Segment([-0.8, -0.9], [0.8, -0.9]), Segment([0.0, -0.9], [0.0, 0.9])],
            Glyph::Arc => vec![Arc([0.0, 0.0], 0.8, 45.0, 315.0)],
            Glyph::Zed => vec![
                Segment([-0.7, -0.9], [0.7, -0.9]),
                Segment([0.7, -0.9], [-0.7, 0.9]),
                Segment([-0.7, 0.9], [0.7, 0.9]),
            ],
            Glyph::Tri => vec![
                Segment([0.0, -0.9], [0.85, 0.8]),
                Segment([0.85, 0.8], [-0.85, 0.8]),
                Segment([-0.85, 0.8], [0.0, -0.9]),
            ],
            Glyph::Vee => vec![Segment([-0.7, -0.9], [0.0, 0.9]), Segment([0.0, 0.9], [0.7, -0.9])],
            Glyph::Theta => vec![ring, Segment([-0.8, 0.0], [0.8, 0.0])],
        }
    }
}

/// A primitive structure a family can put on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Structure {
    BlankBackground,
    SmoothBackground,
    Ring,
    /// Straight stroke with orientation in `[15 b, 15 (b + 1))` degrees mod 180.
    Segment {
        bin: u8,
    },
    /// Open arc whose gap faces `[30 b, 30 (b + 1))` degrees.
    ArcOpening {
        bin: u8,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Strokes,
    StrokesRotated,
    StrokesNoisybg,
    StrokesRotatedNoisybg,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Strokes,
        Family::StrokesRotated,
        Family::StrokesNoisybg,
        Family::StrokesRotatedNoisybg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Strokes => "strokes",
            Family::StrokesRotated => "strokes_rotated",
            Family::StrokesNoisybg => "strokes_noisybg",
            Family::StrokesRotatedNoisybg => "strokes_rotated_noisybg",
        }
    }

    pub fn rotated(self) -> bool {
        matches!(self, Family::StrokesRotated | Family::StrokesRotatedNoisybg)
    }

    pub fn noisy_background(self) -> bool {
        matches!(self, Family::StrokesNoisybg | Family::StrokesRotatedNoisybg)
    }

    /// Every structure that can appear in a rendered sample of this family.
    pub fn structures(self) -> BTreeSet<Structure> {
        let mut out = BTreeSet::new();
        out.insert(Structure::BlankBackground);
        if self.noisy_background() {
            out.insert(Structure::SmoothBackground);
        }
        for glyph in GLYPHS {
            for p in glyph.primitives() {
                match p {
                    Primitive::Segment(a, b) => {
                        let base = (b[1] - a[1]).atan2(b[0] - a[0]).to_degrees();
                        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                        let wobble = TILT_JITTER_DEG + (2.0 * ENDPOINT_JITTER / len).asin().to_degrees();
                        for bin in angle_bins(base, wobble, 180.0, ORIENTATION_BINS, self.rotated()) {
                            out.insert(Structure::Segment { bin });
                        }
                    }
                    Primitive::Arc(_, _, a0, a1) if a1 - a0 >= 360.0 => {
                        out.insert(Structure::Ring);
                    }
                    Primitive::Arc(_, _, a0, a1) => {
                        let gap = (a1 + (a0 + 360.0)) / 2.0;
                        for bin in angle_bins(gap, TILT_JITTER_DEG, 360.0, OPENING_BINS, self.rotated()) {
                            out.insert(Structure::ArcOpening { bin });
                        }
                    }
                }
            }
        }
        out
    }
}

fn angle_bins(center: f64, wobble: f64, period: f64, bins: u8, any: bool) -> Vec<u8> {
    if any {
        return (0..bins).collect();
    }
    let width = period / bins as f64;
    let lo = ((center - wobble) / width).floor() as i64;
    let hi = ((center + wobble) / width).floor() as i64;
    let mut v: Vec<u8> = (lo..=hi).map(|b| b.rem_euclid(bins as i64) as u8).collect();
    v.sort_unstable();
    v.dedup();
    v
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown synthetic family `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

fn mix(seed: u64, split: u64, index: u64) -> u64 {
    let mut z = seed ^ split.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders a bundle of `family` glyphs. Sample `i` of each split has label
/// `i mod 10` and is drawn from its own seeded stream.
pub fn make_synthetic(family: Family, sizes: SyntheticSizes, seed: u64) -> Result<DatasetBundle, DatasetError> {
    let shape = [1, GLYPH_SIDE, GLYPH_SIDE];
    let mut splits = Vec::new();
    for (tag, n) in [(0u64, sizes.train), (1, sizes.valid), (2, sizes.test)] {
        if n == 0 {
            return Err(DatasetError::Invalid("synthetic split sizes must be positive".into()));
        }
        let mut pixels = Vec::with_capacity(n * GLYPH_SIDE * GLYPH_SIDE);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % GLYPHS.len();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, tag, i as u64));
            pixels.extend(render(GLYPHS[label], family, &mut rng));
            labels.push(label);
        }
        splits.push(Split::new(shape, pixels, labels)?);
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(DatasetBundle {
        name: family.name().to_string(),
        class_names: GLYPHS.iter().map(|g| g.name().to_string()).collect(),
        train,
        valid,
        test,
        provenance: vec![format!(
            "synthetic: family {family}, sizes {}/{}/{}, seed {seed}",
            sizes.train, sizes.valid, sizes.test
        )],
    })
}

fn render(glyph: Glyph, family: Family, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let tilt = if family.rotated() {
        rng.gen_range(0.0..360.0)
    } else {
        rng.gen_range(-TILT_JITTER_DEG..=TILT_JITTER_DEG)
    };
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1) * GLYPH_HALF;
    let center = [
        GLYPH_SIDE as f64 / 2.0 + rng.gen_range(-SHIFT_MAX..=SHIFT_MAX),
        GLYPH_SIDE as f64 / 2.0 + rng.gen_range(-SHIFT_MAX..=SHIFT_MAX),
    ];
    let half_width = rng.gen_range(HALF_WIDTH_RANGE.0..=HALF_WIDTH_RANGE.1);
    let (sin, cos) = tilt.to_radians().sin_cos();
    let place = |p: [f64; 2]| {
        [
            center[0] + scale * (cos * p[0] - sin * p[1]),
            center[1] + scale * (sin * p[0] + cos * p[1]),
        ]
    };
    let mut jitter = |p: [f64; 2]| {
        [
            p[0] + rng.gen_range(-ENDPOINT_JITTER..=ENDPOINT_JITTER),
            p[1] + rng.gen_range(-ENDPOINT_JITTER..=ENDPOINT_JITTER),
        ]
    };
    let placed: Vec<Primitive> = glyph
        .primitives()
        .into_iter()
        .map(|p| match p {
            Primitive::Segment(a, b) => Primitive::Segment(place(jitter(a)), place(jitter(b))),
            Primitive::Arc(c, r, a0, a1) => Primitive::Arc(place(c), r * scale, a0 + tilt, a1 + tilt),
        })
        .collect();
    let background = if family.noisy_background() {
        Some(smooth_noise(rng))
    } else {
        None
    };
    let mut out = Vec::with_capacity(GLYPH_SIDE * GLYPH_SIDE);
    for y in 0..GLYPH_SIDE {
        for x in 0..GLYPH_SIDE {
            let q = [x as f64 + 0.5, y as f64 + 0.5];
            let d = placed.iter().map(|p| distance(*p, q)).fold(f64::INFINITY, f64::min);
            let ink = (half_width + 0.5 - d).clamp(0.0, 1.0);
            let v = match &background {
                Some(bg) => ink + (1.0 - ink) * bg[y * GLYPH_SIDE + x],
                None => ink,
            };
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

fn distance(p: Primitive, q: [f64; 2]) -> f64 {
    match p {
        Primitive::Segment(a, b) => {
            let ab = [b[0] - a[0], b[1] - a[1]];
            let aq = [q[0] - a[0], q[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 > 0.0 {
                ((aq[0] * ab[0] + aq[1] * ab[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            ((aq[0] - t * ab[0]).powi(2) + (aq[1] - t * ab[1]).powi(2)).sqrt()
        }
        Primitive::Arc(c, r, a0, a1) => {
            let v = [q[0] - c[0], q[1] - c[1]];
            let rho = (v[0] * v[0] + v[1] * v[1]).sqrt();
            let span = a1 - a0;
            let theta = v[1].atan2(v[0]).to_degrees();
            if span >= 360.0 || (theta - a0).rem_euclid(360.0) <= span {
                return (rho - r).abs();
            }
            let end = |deg: f64| {
                let (s, c2) = deg.to_radians().sin_cos();
                let e = [c[0] + r * c2, c[1] + r * s];
                ((q[0] - e[0]).powi(2) + (q[1] - e[1]).powi(2)).sqrt()
            };
            end(a0).min(end(a1))
        }
    }
}

/// Bilinear upsampling of a coarse uniform grid, scaled by a per-image
/// amplitude drawn from `[0, NOISE_AMPLITUDE_MAX]`.
fn smooth_noise(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let amplitude = rng.gen_range(0.0..=NOISE_AMPLITUDE_MAX);
    let grid: Vec<f64> = (0..NOISE_GRID * NOISE_GRID).map(|_| rng.gen::<f64>()).collect();
    let step = (NOISE_GRID - 1) as f64 / (GLYPH_SIDE - 1) as f64;
    let mut out = Vec::with_capacity(GLYPH_SIDE * GLYPH_SIDE);
    for y in 0..GLYPH_SIDE {
        for x in 0..GLYPH_SIDE {
            let (gx, gy) = (x as f64 * step, y as f64 * step);
            let (x0, y0) = (
                (gx.floor() as usize).min(NOISE_GRID - 2),
                (gy.floor() as usize).min(NOISE_GRID - 2),
            );
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let at = |xx: usize, yy: usize| grid[yy * NOISE_GRID + xx];
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out.push(amplitude * (top * (1.0 - fy) + bottom * fy));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: SyntheticSizes = SyntheticSizes {
        train: 40,
        valid: 10,
        test: 10,
    };

    #[test]
    fn deterministic_and_normalized() {
        for family in Family::ALL {
            let a = make_synthetic(family, SMALL, 3).unwrap();
            let b = make_synthetic(family, SMALL, 3).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            assert_eq!(a.num_classes(), 10);
            assert_eq!(a.train.class_counts(10), vec![4; 10]);
            assert_ne!(a, make_synthetic(family, SMALL, 4).unwrap());
        }
    }

    #[test]
    fn glyphs_have_ink() {
        let b = make_synthetic(Family::Strokes, SMALL, 1).unwrap();
        for i in 0..b.train.len() {
            let ink: f32 = b.train.image(i).iter().sum();
            assert!(ink > 20.0, "sample {i} ink {ink}");
            let corner = b.train.image(i)[0];
            assert_eq!(corner, 0.0);
        }
    }

    #[test]
    fn containment_chain() {
        let plain = Family::Strokes.structures();
        let rotated = Family::StrokesRotated.structures();
        let noisy = Family::StrokesRotatedNoisybg.structures();
        assert!(plain.is_subset(&rotated) && plain != rotated);
        assert!(rotated.is_subset(&noisy) && rotated != noisy);
        assert!(plain.is_subset(&Family::StrokesNoisybg.structures()));
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("mnist".parse::<Family>().is_err());
    }

    #[test]
    fn zero_size_rejected() {
        let sizes = SyntheticSizes { train: 0, ..SMALL };
        assert!(make_synthetic(Family::Strokes, sizes, 0).is_err());
    }
}
