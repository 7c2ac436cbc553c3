use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

/// Channel-major RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || data.is_empty() {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Square,
        Shape::Circle,
        Shape::Triangle,
        Shape::Cross,
        Shape::Diamond,
        Shape::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
            Shape::Ring => "ring",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape {s:?}")))
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown color {s:?}")))
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.90, 0.15, 0.15],
            Color::Green => [0.15, 0.80, 0.20],
            Color::Blue => [0.15, 0.30, 0.90],
            Color::Yellow => [0.90, 0.85, 0.15],
            Color::Purple => [0.60, 0.20, 0.80],
            Color::Orange => [0.95, 0.55, 0.10],
        }
    }
}

/// Everything needed to draw one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub color: Color,
    /// Center offset from the canvas middle, in pixels.
    pub offset: (f64, f64),
    /// Multiplier on the base radius.
    pub size: f64,
    /// Uniform background gray level.
    pub background: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

/// Base shape radius as a fraction of the canvas side.
pub const BASE_RADIUS: f64 = 0.25;
pub const SIZE_RANGE: (f64, f64) = (0.7, 1.3);
const SUPERSAMPLE: usize = 4;

impl Scene {
    pub fn radius(&self, canvas: usize) -> f64 {
        BASE_RADIUS * canvas as f64 * self.size
    }

    /// Largest center offset that keeps a shape of this size on a canvas.
    pub fn max_offset(size: f64, canvas: usize) -> f64 {
        (canvas as f64 / 2.0 - BASE_RADIUS * canvas as f64 * size - 0.5).max(0.0)
    }

    fn validate(&self, canvas: usize) -> Result<()> {
        let lim = Self::max_offset(self.size, canvas) + 1e-9;
        if !(self.size > 0.0) || self.offset.0.abs() > lim || self.offset.1.abs() > lim {
            return Err(Error::InvalidArgument(format!(
                "scene {self:?} does not fit a {canvas}px canvas"
            )));
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad scene {self:?}")));
        }
        Ok(())
    }
}

/// Draws a scene on a `canvas × canvas` RGB image with 4×4 supersampled
/// coverage; `seed` drives the pixel noise.
pub fn render_image(scene: &Scene, canvas: usize, seed: u64) -> Result<Image> {
    scene.validate(canvas)?;
    let mut img = Image::filled(3, canvas, canvas, scene.background);
    let r = scene.radius(canvas);
    let center = canvas as f64 / 2.0;
    let (cx, cy) = (center + scene.offset.0, center + scene.offset.1);
    let rgb = scene.color.rgb();
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..canvas {
        for x in 0..canvas {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if scene.shape.contains(px - cx, py - cy, r) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for (c, col) in rgb.iter().enumerate() {
                    img.set(c, y, x, scene.background + cov * (col - scene.background));
                }
            }
        }
    }
    if scene.noise > 0.0 {
        let mut rng = rng::rng(seed);
        for v in img.data.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v + scene.noise * n).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Seeded random resized crop (area fraction in [0.6, 1]) with bilinear
/// resampling back to the input size, then an additive brightness shift in
/// [-0.2, 0.2], clipped to [0, 1].
pub fn augment(image: &Image, seed: u64) -> Image {
    let mut rng = rng::rng(seed);
    let (h, w) = (image.height, image.width);
    let area: f64 = rng.random_range(0.6..=1.0);
    let side = area.sqrt();
    let (ch, cw) = (side * h as f64, side * w as f64);
    let y0 = rng.random_range(0.0..=(h as f64 - ch));
    let x0 = rng.random_range(0.0..=(w as f64 - cw));
    let shift: f64 = rng.random_range(-0.2..=0.2);

    let mut out = Image::filled(image.channels, h, w, 0.0);
    for y in 0..h {
        // pixel centers of the output map into the crop window
        let sy = (y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y_lo, fy) = (sy.floor() as usize, sy - sy.floor());
        let y_hi = (y_lo + 1).min(h - 1);
        for x in 0..w {
            let sx = (x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x_lo, fx) = (sx.floor() as usize, sx - sx.floor());
            let x_hi = (x_lo + 1).min(w - 1);
            for c in 0..image.channels {
                let top = image.get(c, y_lo, x_lo) * (1.0 - fx) + image.get(c, y_lo, x_hi) * fx;
                let bot = image.get(c, y_hi, x_lo) * (1.0 - fx) + image.get(c, y_hi, x_hi) * fx;
                let v = top * (1.0 - fy) + bot * fy + shift;
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(color: Color) -> Scene {
        Scene {
            shape: Shape::Square,
            color,
            offset: (0.0, 0.0),
            size: 1.0,
            background: 0.1,
            noise: 0.0,
        }
    }

    fn foreground_fraction(img: &Image, bg: f64) -> f64 {
        let n = img.height * img.width;
        let fg = (0..img.height)
            .flat_map(|y| (0..img.width).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..3).any(|c| img.get(c, y, x) != bg))
            .count();
        fg as f64 / n as f64
    }

    #[test]
    fn color_change_only_touches_shape_pixels() {
        let a = render_image(&scene(Color::Red), 16, 3).unwrap();
        let b = render_image(&scene(Color::Blue), 16, 3).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let bg_a = (0..3).all(|c| a.get(c, y, x) == 0.1);
                let same = (0..3).all(|c| a.get(c, y, x) == b.get(c, y, x));
                assert_eq!(bg_a, same, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn centered_square_is_deterministic() {
        let a = render_image(&scene(Color::Red), 16, 0).unwrap();
        let b = render_image(&scene(Color::Red), 16, 0).unwrap();
        assert_eq!(a, b);
        // the 0.85·4 = 3.4px half-width covers pixels 5..=10 fully
        assert_eq!(a.get(0, 8, 8), 0.9);
        assert_eq!(a.get(0, 0, 0), 0.1);
    }

    #[test]
    fn coverage_fraction_is_moderate() {
        for shape in Shape::ALL {
            for size in [SIZE_RANGE.0, 1.0, SIZE_RANGE.1] {
                let s = Scene { shape, size, ..scene(Color::Green) };
                let img = render_image(&s, 16, 0).unwrap();
                let f = foreground_fraction(&img, 0.1);
                assert!((0.05..=0.6).contains(&f), "{shape:?} at {size}: {f}");
            }
        }
    }

    #[test]
    fn oversized_offsets_are_rejected() {
        let s = Scene { offset: (7.0, 0.0), ..scene(Color::Red) };
        assert!(render_image(&s, 16, 0).is_err());
    }

    #[test]
    fn noise_stays_in_range() {
        let s = Scene { noise: 0.5, ..scene(Color::Red) };
        let img = render_image(&s, 16, 9).unwrap();
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(img, render_image(&s, 16, 10).unwrap());
    }

    #[test]
    fn augment_is_seeded_and_bounded() {
        let img = render_image(&scene(Color::Yellow), 16, 0).unwrap();
        let a = augment(&img, 1);
        let b = augment(&img, 1);
        let c = augment(&img, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.channels, a.height, a.width), (3, 16, 16));
        assert!(a.data.iter().chain(&c.data).all(|v| (0.0..=1.0).contains(v)));
    }
}
