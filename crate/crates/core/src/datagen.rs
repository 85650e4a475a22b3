//! Procedural shapes-and-captions corpus.
//!
//! Every scene is one flat-colored shape on a flat background, rasterized without
//! anti-aliasing from a fixed palette. The scene lattice has
//! 3 shapes × 8 colors × 7 backgrounds × 5 positions × 2 sizes = 1680 members.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::imageio::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Orange,
    Purple,
    White,
    Black,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Orange,
        Color::Purple,
        Color::White,
        Color::Black,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 25, 75],
            Color::Green => [60, 180, 75],
            Color::Blue => [0, 130, 200],
            Color::Yellow => [255, 225, 25],
            Color::Orange => [245, 130, 48],
            Color::Purple => [145, 30, 180],
            Color::White => [255, 255, 255],
            Color::Black => [0, 0, 0],
        }
    }
}

impl Position {
    pub const ALL: [Position; 5] = [
        Position::Center,
        Position::TopLeft,
        Position::TopRight,
        Position::BottomLeft,
        Position::BottomRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Position::Center => "center",
            Position::TopLeft => "top-left",
            Position::TopRight => "top-right",
            Position::BottomLeft => "bottom-left",
            Position::BottomRight => "bottom-right",
        }
    }

    /// Shape center in pixels for a square image of side `size`.
    pub fn center(self, size: usize) -> (f64, f64) {
        let (q, h, t) = (size as f64 / 4.0, size as f64 / 2.0, 3.0 * size as f64 / 4.0);
        match self {
            Position::Center => (h, h),
            Position::TopLeft => (q, q),
            Position::TopRight => (t, q),
            Position::BottomLeft => (q, t),
            Position::BottomRight => (t, t),
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Half-extent (circle radius) in pixels.
    pub fn radius(self, image_size: usize) -> f64 {
        match self {
            Size::Small => image_size as f64 / 8.0,
            Size::Large => image_size as f64 / 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub background: Color,
    pub position: Position,
    pub size: Size,
}

impl SceneSpec {
    pub fn new(shape: Shape, color: Color, background: Color, position: Position, size: Size) -> Result<Self> {
        if color == background {
            return Err(invalid!("fill and background are both {}", color.name()));
        }
        Ok(Self {
            shape,
            color,
            background,
            position,
            size,
        })
    }

    /// Whether the pixel whose top-left corner is `(x, y)` is covered by the shape.
    pub fn covers(&self, x: usize, y: usize, image_size: usize) -> bool {
        let (cx, cy) = self.position.center(image_size);
        let r = self.size.radius(image_size);
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex up at (cx, cy - r), base along y = cy + r with half-width r.
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// Every valid scene, in lattice order (shape, color, background, position, size).
pub fn all_specs() -> Vec<SceneSpec> {
    let mut out = Vec::with_capacity(1680);
    for shape in Shape::ALL {
        for color in Color::ALL {
            for background in Color::ALL {
                if background == color {
                    continue;
                }
                for position in Position::ALL {
                    for size in Size::ALL {
                        out.push(SceneSpec {
                            shape,
                            color,
                            background,
                            position,
                            size,
                        });
                    }
                }
            }
        }
    }
    out
}

pub fn render(spec: &SceneSpec, image_size: usize) -> Result<RgbImage> {
    if image_size < 16 {
        return Err(invalid!("image size {image_size} below the 16-pixel minimum"));
    }
    let mut img = RgbImage::filled(image_size, image_size, spec.background.rgb());
    let fill = spec.color.rgb();
    for y in 0..image_size {
        for x in 0..image_size {
            if spec.covers(x, y, image_size) {
                img.set_pixel(x, y, fill);
            }
        }
    }
    Ok(img)
}

pub fn caption(spec: &SceneSpec) -> String {
    format!(
        "a {} {} {} at the {} on a {} background",
        spec.size.name(),
        spec.color.name(),
        spec.shape.name(),
        spec.position.name(),
        spec.background.name()
    )
}

/// Every word any caption can contain.
pub fn caption_words() -> Vec<&'static str> {
    let mut words = vec!["a", "at", "the", "on", "background"];
    words.extend(Size::ALL.iter().map(|s| s.name()));
    words.extend(Color::ALL.iter().map(|c| c.name()));
    words.extend(Shape::ALL.iter().map(|s| s.name()));
    words.extend(Position::ALL.iter().map(|p| p.name()));
    words
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: SceneSpec,
    pub image: RgbImage,
    pub caption: String,
}

/// `n` distinct scenes drawn without replacement from the lattice by a seeded
/// integer-only partial Fisher–Yates shuffle.
pub fn make_corpus(n: usize, seed: u64, image_size: usize) -> Result<Vec<Sample>> {
    let mut specs = all_specs();
    if n > specs.len() {
        return Err(invalid!("corpus of {n} exceeds the {} distinct scenes", specs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = specs.len() as u32;
    for i in 0..n as u32 {
        let j = rng.random_range(i..len);
        specs.swap(i as usize, j as usize);
    }
    specs
        .into_iter()
        .take(n)
        .map(|spec| {
            Ok(Sample {
                image: render(&spec, image_size)?,
                caption: caption(&spec),
                spec,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn lattice_size() {
        let specs = all_specs();
        assert_eq!(specs.len(), 3 * 8 * 7 * 5 * 2);
        assert_eq!(specs.iter().collect::<HashSet<_>>().len(), specs.len());
    }

    #[test]
    fn large_red_circle_at_center() {
        let spec = SceneSpec::new(Shape::Circle, Color::Red, Color::Blue, Position::Center, Size::Large).unwrap();
        let img = render(&spec, 32).unwrap();
        assert_eq!(img.pixel(16, 16), Color::Red.rgb());
        assert_eq!(img.pixel(0, 0), Color::Blue.rgb());
        assert_eq!(caption(&spec), "a large red circle at the center on a blue background");
    }

    #[test]
    fn render_is_deterministic_and_validates_size() {
        let spec = all_specs()[123];
        assert_eq!(render(&spec, 32).unwrap(), render(&spec, 32).unwrap());
        assert!(render(&spec, 8).is_err());
    }

    #[test]
    fn fill_equal_background_rejected() {
        assert!(SceneSpec::new(Shape::Square, Color::Red, Color::Red, Position::Center, Size::Small).is_err());
    }

    #[test]
    fn captions_are_injective_and_closed() {
        let words: HashSet<_> = caption_words().into_iter().collect();
        let mut seen = HashSet::new();
        for spec in all_specs() {
            let c = caption(&spec);
            assert!(c.split_whitespace().all(|w| words.contains(w)), "{c}");
            assert!(seen.insert(c));
        }
    }

    #[test]
    fn circle_areas_follow_radius_ratio() {
        // Pixel-count oracle: compare rasterized coverage with the continuous area.
        for size in [32usize, 64, 128] {
            let count = |s: Size| {
                let spec = SceneSpec::new(Shape::Circle, Color::White, Color::Black, Position::Center, s).unwrap();
                (0..size)
                    .flat_map(|y| (0..size).map(move |x| (x, y)))
                    .filter(|&(x, y)| spec.covers(x, y, size))
                    .count() as f64
            };
            let (small, large) = (count(Size::Small), count(Size::Large));
            for (c, s) in [(small, Size::Small), (large, Size::Large)] {
                let r = s.radius(size);
                let area = std::f64::consts::PI * r * r;
                // Rasterization error is bounded by the pixels the boundary crosses.
                assert!((c - area).abs() <= 2.0 * std::f64::consts::PI * r, "{c} vs {area}");
            }
            let ratio = large / small;
            assert!((ratio - 4.0).abs() < 0.5, "size {size}: ratio {ratio}");
        }
    }

    #[test]
    fn corpus_full_lattice_and_determinism() {
        let full = make_corpus(1680, 7, 16).unwrap();
        let specs: HashSet<_> = full.iter().map(|s| s.spec).collect();
        assert_eq!(specs.len(), 1680);
        assert_eq!(make_corpus(16, 3, 32).unwrap(), make_corpus(16, 3, 32).unwrap());
        assert!(make_corpus(1681, 0, 32).is_err());
    }
}
