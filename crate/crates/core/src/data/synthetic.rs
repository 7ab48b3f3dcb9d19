//! Deterministic shapes dataset. Each foreground class is a (shape, fill
//! pattern) pair with a class tint; colours are jittered per object so the
//! tint is a cue, not a lookup.

use rand::Rng;

use super::{DatasetIndex, LabeledImage};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, RgbImage};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Diamond,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Diagonal,
}

const SHAPES: [Shape; 5] = [Shape::Square, Shape::Disk, Shape::Triangle, Shape::Diamond, Shape::Cross];
const PATTERNS: [Pattern; 5] =
    [Pattern::Solid, Pattern::HorizontalStripes, Pattern::VerticalStripes, Pattern::Checker, Pattern::Diagonal];

/// Number of distinct foreground classes the generator can draw.
pub const SHAPE_VOCABULARY: usize = SHAPES.len() * PATTERNS.len();

/// Hue in `[0, 1)` for class `c`, spread by the golden ratio so neighbours differ.
fn class_hue(class: u8) -> f32 {
    (class as f32 * 0.618_034).fract()
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Class `c` (1-based) cycles through shapes first, then patterns.
pub fn class_appearance(class: u8) -> (Shape, Pattern) {
    let i = class as usize - 1;
    (SHAPES[i % SHAPES.len()], PATTERNS[i / SHAPES.len()])
}

impl Shape {
    /// Membership test in object-local coordinates, `r` = half extent.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= 0.9 * r && dy.abs() <= 0.9 * r,
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

impl Pattern {
    fn on(self, x: usize, y: usize) -> bool {
        match self {
            Pattern::Solid => true,
            Pattern::HorizontalStripes => (y / 2) % 2 == 0,
            Pattern::VerticalStripes => (x / 2) % 2 == 0,
            Pattern::Checker => ((x / 2) + (y / 2)) % 2 == 0,
            Pattern::Diagonal => ((x + y) / 2) % 2 == 0,
        }
    }
}

struct Placed {
    top: usize,
    left: usize,
    extent: usize,
}

impl Placed {
    fn overlaps(&self, other: &Placed) -> bool {
        let gap = 1;
        self.left < other.left + other.extent + gap
            && other.left < self.left + self.extent + gap
            && self.top < other.top + other.extent + gap
            && other.top < self.top + self.extent + gap
    }
}

fn render(seed: u64, index: usize, n_fg_classes: u8, size: usize) -> Result<LabeledImage> {
    let mut rng = seed::rng(&[seed, index as u64, 0x5e7]);
    let mut image = RgbImage::filled(size, size, [0.0; 3]);
    let mut label = LabelMap::filled(size, size, 0);

    // textured background: random base tone, linear gradient, pixel noise
    let base: [f32; 3] = [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)];
    let gx: f32 = rng.gen_range(-0.15..0.15);
    let gy: f32 = rng.gen_range(-0.15..0.15);
    for y in 0..size {
        for x in 0..size {
            let t = (gx * x as f32 + gy * y as f32) / size as f32;
            let mut px = [0f32; 3];
            for (k, v) in px.iter_mut().enumerate() {
                *v = (base[k] + t + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0);
            }
            image.set(y, x, px);
        }
    }

    let n_objects = rng.gen_range(1..=4usize);
    let min_extent = (size as f64 * 0.28).round() as usize;
    let max_extent = (size as f64 * 0.44).round() as usize;
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..n_objects {
        let class = rng.gen_range(1..=n_fg_classes);
        let extent = rng.gen_range(min_extent..=max_extent);
        let mut slot = None;
        for _ in 0..50 {
            let cand = Placed {
                top: rng.gen_range(0..=size - extent),
                left: rng.gen_range(0..=size - extent),
                extent,
            };
            if placed.iter().all(|p| !p.overlaps(&cand)) {
                slot = Some(cand);
                break;
            }
        }
        let Some(slot) = slot else { continue };
        let (shape, pattern) = class_appearance(class);
        let hue = class_hue(class) + rng.gen_range(-0.04..0.04);
        let color = hsv_to_rgb(hue, rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0));
        let alt: [f32; 3] = color.map(|c| if c > 0.5 { c - 0.45 } else { c + 0.45 });
        let r = extent as f64 / 2.0;
        for y in slot.top..slot.top + extent {
            for x in slot.left..slot.left + extent {
                let dx = x as f64 + 0.5 - (slot.left as f64 + r);
                let dy = y as f64 + 0.5 - (slot.top as f64 + r);
                if shape.contains(dx, dy, r) {
                    image.set(y, x, if pattern.on(x, y) { color } else { alt });
                    label.set(y, x, class);
                }
            }
        }
        placed.push(slot);
    }
    LabeledImage::new(format!("syn_{seed}_{index:05}"), image, label)
}

/// Generates `n_images` labelled images. A pure function of its arguments.
pub fn generate_synthetic_dataset(seed: u64, n_fg_classes: u8, n_images: usize, size: usize) -> Result<DatasetIndex> {
    if n_fg_classes < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 foreground classes"));
    }
    if n_fg_classes as usize > SHAPE_VOCABULARY {
        return Err(Error::config(format!(
            "{n_fg_classes} classes exceed the {SHAPE_VOCABULARY} shape x pattern combinations"
        )));
    }
    if size < 32 {
        return Err(Error::config("synthetic images must be at least 32 pixels"));
    }
    let images = (0..n_images)
        .map(|i| render(seed, i, n_fg_classes, size))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetIndex::from_images(n_fg_classes, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic_dataset(7, 4, 40, 64).unwrap();
        let b = generate_synthetic_dataset(7, 4, 40, 64).unwrap();
        for id in a.ids() {
            assert_eq!(a.load(&id).unwrap(), b.load(&id).unwrap());
        }
        let c = generate_synthetic_dataset(8, 4, 40, 64).unwrap();
        assert_ne!(a.load(&a.ids()[0]).unwrap().image, c.load(&c.ids()[0]).unwrap().image);
    }

    #[test]
    fn every_image_has_foreground() {
        let d = generate_synthetic_dataset(3, 8, 100, 64).unwrap();
        assert!(d.entries().iter().all(|e| !e.classes.is_empty()));
    }

    #[test]
    fn class_histogram_covers_all_classes() {
        let (n, k) = (200usize, 4u8);
        let d = generate_synthetic_dataset(7, k, n, 64).unwrap();
        let mut counts = vec![0usize; k as usize + 1];
        for e in d.entries() {
            for &c in &e.classes {
                counts[c as usize] += 1;
            }
        }
        let floor = n / (4 * k as usize);
        assert!(counts[1..].iter().all(|&c| c >= floor), "{counts:?}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_synthetic_dataset(0, 1, 10, 64).is_err());
        assert!(generate_synthetic_dataset(0, 26, 10, 64).is_err());
        assert!(generate_synthetic_dataset(0, 4, 10, 16).is_err());
    }

    #[test]
    fn appearance_pairs_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for c in 1..=SHAPE_VOCABULARY as u8 {
            let (s, p) = class_appearance(c);
            assert!(seen.insert(format!("{s:?}{p:?}")));
        }
    }
}
