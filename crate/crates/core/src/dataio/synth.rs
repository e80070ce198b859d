//! Parametric "vehicle" renderer with exactly known labels.
//!
//! Each picture is a body rectangle, a cabin trapezoid and two wheel discs over
//! an unsaturated background with rectangular clutter. Body colors are
//! saturated, everything else is gray, so color and silhouette extent can be
//! read back from pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [f64; 3],
}

pub const PALETTE: [NamedColor; 8] = [
    NamedColor { name: "red", rgb: [0.85, 0.10, 0.10] },
    NamedColor { name: "orange", rgb: [0.95, 0.55, 0.10] },
    NamedColor { name: "yellow", rgb: [0.95, 0.90, 0.15] },
    NamedColor { name: "green", rgb: [0.15, 0.70, 0.20] },
    NamedColor { name: "cyan", rgb: [0.10, 0.75, 0.85] },
    NamedColor { name: "blue", rgb: [0.10, 0.20, 0.85] },
    NamedColor { name: "purple", rgb: [0.55, 0.15, 0.75] },
    NamedColor { name: "pink", rgb: [0.95, 0.45, 0.70] },
];

pub const WHEEL_GRAY: f64 = 0.12;
pub const WINDOW_RGB: [f64; 3] = [0.72, 0.76, 0.80];
/// Minimum luma gap between background and any vehicle part.
const MIN_CONTRAST: f64 = 0.22;

pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VehicleType {
    Sedan,
    Suv,
    Truck,
    Bus,
}

/// Unit-image proportions of one vehicle type.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TypeShape {
    pub body_w: f64,
    pub body_h: f64,
    pub cabin_h: f64,
}

impl VehicleType {
    pub const ALL: [VehicleType; 4] = [VehicleType::Sedan, VehicleType::Suv, VehicleType::Truck, VehicleType::Bus];

    pub fn name(self) -> &'static str {
        match self {
            VehicleType::Sedan => "sedan",
            VehicleType::Suv => "suv",
            VehicleType::Truck => "truck",
            VehicleType::Bus => "bus",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub(crate) fn shape(self) -> TypeShape {
        match self {
            VehicleType::Sedan => TypeShape { body_w: 0.70, body_h: 0.16, cabin_h: 0.13 },
            VehicleType::Suv => TypeShape { body_w: 0.64, body_h: 0.22, cabin_h: 0.15 },
            VehicleType::Truck => TypeShape { body_w: 0.84, body_h: 0.15, cabin_h: 0.13 },
            VehicleType::Bus => TypeShape { body_w: 0.62, body_h: 0.46, cabin_h: 0.04 },
        }
    }

    /// Width / height of the colored silhouette (body plus cabin).
    pub fn aspect(self) -> f64 {
        let s = self.shape();
        s.body_w / (s.body_h + s.cabin_h)
    }

    /// Nearest type by silhouette aspect ratio, splitting at geometric midpoints.
    pub fn from_aspect(aspect: f64) -> VehicleType {
        let mut sorted = Self::ALL;
        sorted.sort_by(|a, b| a.aspect().total_cmp(&b.aspect()));
        for w in sorted.windows(2) {
            if aspect < (w[0].aspect() * w[1].aspect()).sqrt() {
                return w[0];
            }
        }
        sorted[3]
    }
}

/// Identity-level parameters shared by every picture of one vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleSpec {
    pub color: usize,
    pub kind: VehicleType,
    /// Cabin style, three per type.
    pub variant: usize,
    pub scale: f64,
}

impl VehicleSpec {
    pub fn fine_label(&self) -> usize {
        self.kind.index() * 3 + self.variant
    }

    pub fn color_name(&self) -> &'static str {
        PALETTE[self.color].name
    }
}

/// Per-picture nuisance parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub facing_left: bool,
    pub dx: f64,
    pub dy: f64,
    pub jitter: f64,
}

pub const N_FINE_LABELS: usize = 12;

pub fn attribute_names() -> Vec<String> {
    PALETTE
        .iter()
        .map(|c| format!("color_{}", c.name))
        .chain(VehicleType::ALL.iter().map(|t| format!("type_{}", t.name())))
        .collect()
}

/// Color one-hot followed by type one-hot.
pub fn attribute_bits(spec: &VehicleSpec) -> Vec<u8> {
    let mut bits = vec![0u8; PALETTE.len() + VehicleType::ALL.len()];
    bits[spec.color] = 1;
    bits[PALETTE.len() + spec.kind.index()] = 1;
    bits
}

/// Inverse of [`attribute_bits`]: `(color index, type)` when the bits are a valid pair of one-hots.
pub fn decode_attribute_bits(bits: &[u8]) -> Option<(usize, VehicleType)> {
    if bits.len() != PALETTE.len() + VehicleType::ALL.len() {
        return None;
    }
    let (colors, types) = bits.split_at(PALETTE.len());
    let one = |b: &[u8]| (b.iter().filter(|&&v| v == 1).count() == 1).then(|| b.iter().position(|&v| v == 1).unwrap());
    Some((one(colors)?, VehicleType::ALL[one(types)?]))
}

pub fn caption(spec: &VehicleSpec, pose: &Pose) -> String {
    let style = ["compact", "classic", "long"][spec.variant];
    format!(
        "a {} {} with a {style} cabin facing {}",
        spec.color_name(),
        spec.kind.name(),
        if pose.facing_left { "left" } else { "right" }
    )
}

pub fn random_spec(rng: &mut impl Rng) -> VehicleSpec {
    VehicleSpec {
        color: rng.random_range(0..PALETTE.len()),
        kind: VehicleType::ALL[rng.random_range(0..4)],
        variant: rng.random_range(0..3),
        scale: rng.random_range(0.86..1.0),
    }
}

pub fn random_pose(rng: &mut impl Rng) -> Pose {
    Pose {
        facing_left: rng.random_bool(0.5),
        dx: rng.random_range(-0.04..0.04),
        dy: rng.random_range(-0.03..0.03),
        jitter: rng.random_range(0.97..1.03),
    }
}

/// One rendered picture plus its ground-truth silhouette outline.
pub struct Rendering {
    pub image: ImageTensor<f64>,
    /// `true` on silhouette pixels that touch a non-silhouette 4-neighbor.
    pub outline: Vec<bool>,
    pub silhouette: Vec<bool>,
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Background,
    Body,
    Window,
    Wheel,
}

/// Renders a vehicle at `size × size`, using `rng` for background and clutter.
pub fn render(spec: &VehicleSpec, pose: &Pose, size: usize, rng: &mut impl Rng) -> Rendering {
    let body_rgb = PALETTE[spec.color].rgb;
    let part_lumas = [luma(body_rgb), WHEEL_GRAY];
    let grays: Vec<f64> = (0..=65)
        .map(|k| 0.25 + 0.01 * k as f64)
        .filter(|g| part_lumas.iter().all(|l| (l - g).abs() >= MIN_CONTRAST))
        .collect();
    let bg = grays[rng.random_range(0..grays.len())];
    let tilt: f64 = rng.random_range(-0.05..0.05);
    let clutter: Vec<([f64; 4], f64)> = (0..rng.random_range(2..6))
        .map(|_| {
            let x0: f64 = rng.random_range(0.0..0.9);
            let y0: f64 = rng.random_range(0.0..0.9);
            let w: f64 = rng.random_range(0.05..0.3);
            let h: f64 = rng.random_range(0.05..0.3);
            ([x0, y0, x0 + w, y0 + h], rng.random_range(-0.06..0.06))
        })
        .collect();

    let shape = spec.kind.shape();
    let s = spec.scale * pose.jitter;
    let (bw, bh, ch) = (shape.body_w * s, shape.body_h * s, shape.cabin_h * s);
    let wheel_r = 0.075 * s;
    let ground = 0.80 + pose.dy;
    let body_bottom = ground - wheel_r * 0.9;
    let body_top = body_bottom - bh;
    let cabin_top = body_top - ch;
    let x0 = 0.5 + pose.dx - bw / 2.0;
    let x1 = x0 + bw;
    // cabin bottom spans a variant-dependent fraction of the body, top is narrower
    let (cb0, cb1, inset) = match spec.variant {
        0 => (0.30, 0.75, 0.10),
        1 => (0.15, 0.80, 0.14),
        _ => (0.05, 0.95, 0.06),
    };
    let wheels = [(x0 + 0.2 * bw, body_bottom), (x0 + 0.8 * bw, body_bottom)];

    let part_at = |u: f64, v: f64| -> Part {
        // canonical orientation faces right; mirror for left-facing vehicles
        let u = if pose.facing_left { 1.0 - u + 2.0 * pose.dx } else { u };
        for (cx, cy) in wheels {
            if (u - cx).powi(2) + (v - cy).powi(2) <= wheel_r * wheel_r {
                return Part::Wheel;
            }
        }
        if (x0..x1).contains(&u) && (body_top..body_bottom).contains(&v) {
            return Part::Body;
        }
        if ch > 0.0 && (cabin_top..body_top).contains(&v) {
            let t = (body_top - v) / ch; // 0 at the body, 1 at the roof
            let left = x0 + bw * (cb0 + inset * t);
            let right = x0 + bw * (cb1 - inset * t);
            if (left..right).contains(&u) {
                let frame = 0.18 * (right - left).min(ch * 2.0);
                let inner = u > left + frame && u < right - frame && t > 0.25 && t < 0.8;
                return if inner && spec.kind != VehicleType::Bus { Part::Window } else { Part::Body };
            }
        }
        Part::Background
    };

    let mut pixels = Vec::with_capacity(size * size * 3);
    let mut silhouette = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let u = (c as f64 + 0.5) / size as f64;
            let v = (r as f64 + 0.5) / size as f64;
            let part = part_at(u, v);
            silhouette[r * size + c] = part != Part::Background;
            let rgb = match part {
                Part::Body => body_rgb,
                Part::Window => WINDOW_RGB,
                Part::Wheel => [WHEEL_GRAY; 3],
                Part::Background => {
                    let mut g = bg + tilt * (v - 0.5);
                    for (rect, delta) in &clutter {
                        if u >= rect[0] && u < rect[2] && v >= rect[1] && v < rect[3] {
                            g += delta;
                        }
                    }
                    g += rng.random_range(-0.015..0.015);
                    [g; 3]
                }
            };
            pixels.extend(rgb.iter().map(|x| x.clamp(0.0, 1.0)));
        }
    }
    let outline = (0..size * size)
        .map(|i| {
            if !silhouette[i] {
                return false;
            }
            let (r, c) = (i / size, i % size);
            let out = |rr: isize, cc: isize| {
                rr < 0
                    || cc < 0
                    || rr >= size as isize
                    || cc >= size as isize
                    || !silhouette[rr as usize * size + cc as usize]
            };
            let (r, c) = (r as isize, c as isize);
            out(r - 1, c) || out(r + 1, c) || out(r, c - 1) || out(r, c + 1)
        })
        .collect();
    let image = ImageTensor::new(size, size, 3, pixels).expect("clamped pixels");
    Rendering { image, outline, silhouette }
}

/// Quantizes to 8-bit levels, matching what a PNG round trip produces.
pub fn quantize(image: &ImageTensor<f64>) -> ImageTensor<f64> {
    let px = image.pixels().iter().map(|&v| (v * 255.0).round() / 255.0).collect();
    ImageTensor::new(image.height(), image.width(), image.channels(), px).expect("quantized values stay in range")
}

/// Deterministic identity prototypes for a dataset.
pub fn identity_specs(n_identities: usize, seed: u64) -> Vec<VehicleSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1d00);
    (0..n_identities).map(|_| random_spec(&mut rng)).collect()
}
