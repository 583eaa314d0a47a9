//! Procedural cluttered scenes: a textured background of class-0 patches with
//! 4 classes of flat-coloured objects on top, some alpha-blended, at widely
//! varying scales.
//!
//! Every sample draws from its own `Xoshiro256PlusPlus` stream, seeded through
//! SplitMix64 from `seed + index * 0x9E3779B97F4A7C15`. The draw order below
//! is part of the format; changing it changes every generated file.

use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

const STREAM_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub num_classes: usize,
    /// Inclusive `[min, max]` object count.
    pub objects_per_scene: [usize; 2],
    pub translucent_fraction: f64,
    pub alpha_range: [f64; 2],
    /// Object diameter as a fraction of the image side.
    pub scale_range: [f64; 2],
    pub clutter_patches: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            size: 64,
            num_classes: 5,
            objects_per_scene: [3, 8],
            translucent_fraction: 0.4,
            alpha_range: [0.2, 0.6],
            scale_range: [0.1, 0.6],
            clutter_patches: 20,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        let [a0, a1] = self.alpha_range;
        let [s0, s1] = self.scale_range;
        let [o0, o1] = self.objects_per_scene;
        if self.num_classes != 5 {
            return fail(format!("num_classes must be 5, got {}", self.num_classes));
        }
        if self.size == 0 {
            return fail("size must be at least 1".into());
        }
        if !(a0 > 0.0 && a0 <= a1 && a1 < 1.0) {
            return fail(format!(
                "alpha_range {:?} must lie inside (0, 1)",
                self.alpha_range
            ));
        }
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return fail(format!(
                "scale_range {:?} must lie inside (0, 1]",
                self.scale_range
            ));
        }
        if o0 > o1 {
            return fail(format!(
                "objects_per_scene {:?} is empty",
                self.objects_per_scene
            ));
        }
        if !(0.0..=1.0).contains(&self.translucent_fraction) {
            return fail(format!(
                "translucent_fraction {} must lie in [0, 1]",
                self.translucent_fraction
            ));
        }
        Ok(())
    }

    pub fn rng(&self, index: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(self.seed.wrapping_add(index.wrapping_mul(STREAM_STRIDE)))
    }
}

/// Region geometry in pixel coordinates; pixel `(x, y)` is sampled at its
/// centre `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ellipse {
        center: [f64; 2],
        radii: [f64; 2],
        angle: f64,
    },
    Rect {
        center: [f64; 2],
        half: [f64; 2],
        angle: f64,
    },
    /// Vertices in order; even-odd fill.
    Polygon { vertices: Vec<[f64; 2]> },
}

impl Shape {
    pub fn disk(center: [f64; 2], radius: f64) -> Self {
        Shape::Ellipse {
            center,
            radii: [radius, radius],
            angle: 0.0,
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Shape::Ellipse {
                center,
                radii,
                angle,
            } => {
                let (u, v) = rotate_into(px - center[0], py - center[1], *angle);
                (u / radii[0]).powi(2) + (v / radii[1]).powi(2) <= 1.0
            }
            Shape::Rect {
                center,
                half,
                angle,
            } => {
                let (u, v) = rotate_into(px - center[0], py - center[1], *angle);
                u.abs() <= half[0] && v.abs() <= half[1]
            }
            Shape::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let [x0, y0] = vertices[i];
                    let [x1, y1] = vertices[(i + n - 1) % n];
                    if (y0 > py) != (y1 > py) && px < (x1 - x0) * (py - y0) / (y1 - y0) + x0 {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    fn bounds(&self) -> [f64; 4] {
        match self {
            Shape::Ellipse { center, radii, .. } => {
                let r = radii[0].max(radii[1]);
                [center[0] - r, center[1] - r, center[0] + r, center[1] + r]
            }
            Shape::Rect { center, half, .. } => {
                let r = half[0].hypot(half[1]);
                [center[0] - r, center[1] - r, center[0] + r, center[1] + r]
            }
            Shape::Polygon { vertices } => vertices.iter().fold(
                [
                    f64::INFINITY,
                    f64::INFINITY,
                    f64::NEG_INFINITY,
                    f64::NEG_INFINITY,
                ],
                |b, v| {
                    [
                        b[0].min(v[0]),
                        b[1].min(v[1]),
                        b[2].max(v[0]),
                        b[3].max(v[1]),
                    ]
                },
            ),
        }
    }
}

fn rotate_into(dx: f64, dy: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub class: u8,
    pub center: [f64; 2],
    /// Diameter as a fraction of the image side.
    pub scale: f64,
    /// Blend weight; 1 for opaque objects.
    pub alpha: f64,
    pub translucent: bool,
    pub color: [f64; 3],
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: RgbImage,
    /// Row-major class ids.
    pub mask: Vec<u8>,
    /// Objects in drawing order (back to front).
    pub objects: Vec<ObjectMeta>,
}

/// Image and mask under construction. Painting replaces the mask label of
/// every covered pixel regardless of alpha.
#[derive(Clone, Debug)]
pub struct Canvas {
    pub image: RgbImage,
    pub mask: Vec<u8>,
}

impl Canvas {
    pub fn new(size: usize, background: [f64; 3]) -> Self {
        Canvas {
            image: RgbImage::filled(size, size, background),
            mask: vec![0; size * size],
        }
    }

    /// Composites `alpha * color + (1 - alpha) * current` over the shape's
    /// pixels; `color_at` may vary the colour per pixel.
    pub fn paint(
        &mut self,
        shape: &Shape,
        alpha: f64,
        class: u8,
        mut color_at: impl FnMut(usize, usize) -> [f64; 3],
    ) {
        let size = self.image.width;
        let [x0, y0, x1, y1] = shape.bounds();
        let clip = |v: f64| v.floor().clamp(0.0, size as f64) as usize;
        let (xa, xb) = (clip(x0), (clip(x1) + 1).min(size));
        let (ya, yb) = (clip(y0), (clip(y1) + 1).min(size));
        for y in ya..yb {
            for x in xa..xb {
                if !shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    continue;
                }
                let under = self.image.pixel(x, y);
                let o = color_at(x, y);
                let mixed = std::array::from_fn(|c| alpha * o[c] + (1.0 - alpha) * under[c]);
                self.image.set_pixel(x, y, mixed);
                self.mask[y * size + x] = class;
            }
        }
    }

    pub fn fill(&mut self, shape: &Shape, color: [f64; 3], alpha: f64, class: u8) {
        self.paint(shape, alpha, class, |_, _| color);
    }
}

/// `h` in turns, `s` and `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Centre hue (in turns) of object class `k` in `1..=4`.
pub fn class_hue(k: u8) -> f64 {
    f64::from(k - 1) / 4.0
}

fn random_shape(
    rng: &mut Xoshiro256PlusPlus,
    center: [f64; 2],
    diameter: f64,
    area_shapes: bool,
) -> Shape {
    let r = diameter / 2.0;
    let kind = if area_shapes {
        rng.random_range(0..2)
    } else {
        rng.random_range(0..3)
    };
    match kind {
        0 => {
            let aspect = rng.random_range(0.6..1.0);
            Shape::Ellipse {
                center,
                radii: [r, r * aspect],
                angle: rng.random_range(0.0..PI),
            }
        }
        1 => {
            let aspect = rng.random_range(0.6..1.0);
            Shape::Rect {
                center,
                half: [r * 0.85, r * 0.85 * aspect],
                angle: rng.random_range(0.0..PI),
            }
        }
        _ => {
            let n = rng.random_range(3..=6usize);
            let start = rng.random_range(0.0..2.0 * PI);
            let vertices = (0..n)
                .map(|i| {
                    let a =
                        start + 2.0 * PI * (i as f64 + rng.random_range(-0.25..0.25)) / n as f64;
                    let rr = r * rng.random_range(0.7..1.0);
                    [center[0] + rr * a.cos(), center[1] + rr * a.sin()]
                })
                .collect();
            Shape::Polygon { vertices }
        }
    }
}

pub fn generate_scene(spec: &SceneSpec, index: u64) -> SceneSample {
    let mut rng = spec.rng(index);
    let size = spec.size;
    let side = size as f64;

    let base = hsv_to_rgb(
        rng.random(),
        rng.random_range(0.0..0.25),
        rng.random_range(0.3..0.7),
    );
    let mut canvas = Canvas::new(size, base);

    for _ in 0..spec.clutter_patches {
        let center = [rng.random_range(0.0..side), rng.random_range(0.0..side)];
        let diameter = side * rng.random_range(0.05..0.35);
        let shape = random_shape(&mut rng, center, diameter, true);
        let color = hsv_to_rgb(
            rng.random(),
            rng.random_range(0.0..0.45),
            rng.random_range(0.2..0.9),
        );
        let amp = rng.random_range(0.02..0.12);
        let noise_seed: u64 = rng.random();
        let mut noise = Xoshiro256PlusPlus::seed_from_u64(noise_seed);
        canvas.paint(&shape, 1.0, 0, |_, _| {
            let d = amp * (2.0 * noise.random::<f64>() - 1.0);
            color.map(|c| (c + d).clamp(0.0, 1.0))
        });
    }

    let [o0, o1] = spec.objects_per_scene;
    let count = rng.random_range(o0..=o1);
    let (ln0, ln1) = (spec.scale_range[0].ln(), spec.scale_range[1].ln());
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..=4u8);
        let scale = if ln0 < ln1 {
            rng.random_range(ln0..ln1).exp()
        } else {
            spec.scale_range[0]
        };
        let center = [rng.random_range(0.0..side), rng.random_range(0.0..side)];
        let shape = random_shape(&mut rng, center, scale * side, false);
        let hue = class_hue(class) + rng.random_range(-0.05..0.05);
        let color = hsv_to_rgb(
            hue,
            rng.random_range(0.65..1.0),
            rng.random_range(0.55..1.0),
        );
        let translucent = rng.random::<f64>() < spec.translucent_fraction;
        let alpha = if translucent {
            let [a0, a1] = spec.alpha_range;
            if a0 < a1 {
                rng.random_range(a0..a1)
            } else {
                a0
            }
        } else {
            1.0
        };
        canvas.fill(&shape, color, alpha, class);
        objects.push(ObjectMeta {
            class,
            center,
            scale,
            alpha,
            translucent,
            color,
            shape,
        });
    }

    SceneSample {
        image: canvas.image,
        mask: canvas.mask,
        objects,
    }
}
