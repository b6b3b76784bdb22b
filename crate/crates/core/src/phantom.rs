//! Synthetic flying-spot phantoms: piecewise-constant scenes built from a few
//! primitives (disks, plates, line-pair bar groups, cracks).
//!
//! Coordinates are `x` = column, `y` = row, in pixels. Rasterization has no
//! anti-aliasing: a pixel takes a primitive's intensity iff its center lies
//! inside the primitive. Primitives are painted in list order, so later ones
//! cover earlier ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MAX_VALUE};

/// Bar height used when a bar group does not state one.
pub const DEFAULT_BAR_HEIGHT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Pixels whose center is within `radius` of `center` (inclusive).
    Disk {
        center: Point,
        radius: f64,
        intensity: f64,
    },
    /// Axis-aligned plate covering columns `x..x+width` and rows `y..y+height`.
    Rectangle {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
        intensity: f64,
    },
    /// `count` vertical bars of `bar_width` columns separated by `gap` columns,
    /// starting at column `x`, spanning rows `y..y+bar_height`.
    BarGroup {
        x: usize,
        y: usize,
        bar_width: usize,
        gap: usize,
        count: usize,
        #[serde(default = "default_bar_height")]
        bar_height: usize,
        intensity: f64,
    },
    /// Pixels whose center lies within `thickness / 2` of the polyline.
    Crack {
        points: Vec<Point>,
        thickness: f64,
        intensity: f64,
    },
}

fn default_bar_height() -> usize {
    DEFAULT_BAR_HEIGHT
}

impl Primitive {
    pub fn intensity(&self) -> f64 {
        match *self {
            Self::Disk { intensity, .. }
            | Self::Rectangle { intensity, .. }
            | Self::BarGroup { intensity, .. }
            | Self::Crack { intensity, .. } => intensity,
        }
    }

    fn validate(&self, height: usize, width: usize) -> std::result::Result<(), String> {
        let inside = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64;
        match self {
            Self::Disk { center, radius, .. } => {
                if !(*radius >= 0.0) {
                    return Err(format!("negative radius {radius}"));
                }
                if !inside(center.x - radius, center.y - radius)
                    || !inside(center.x + radius, center.y + radius)
                {
                    return Err("disk extends outside the canvas".into());
                }
            }
            Self::Rectangle {
                x,
                y,
                width: w,
                height: h,
                ..
            } => {
                if *w == 0 || *h == 0 {
                    return Err("empty rectangle".into());
                }
                if x + w > width || y + h > height {
                    return Err("rectangle extends outside the canvas".into());
                }
            }
            Self::BarGroup {
                x,
                y,
                bar_width,
                gap,
                count,
                bar_height,
                ..
            } => {
                if *bar_width == 0 || *count == 0 || *bar_height == 0 {
                    return Err("empty bar group".into());
                }
                let span = count * bar_width + (count - 1) * gap;
                if x + span > width || y + bar_height > height {
                    return Err("bar group extends outside the canvas".into());
                }
            }
            Self::Crack {
                points, thickness, ..
            } => {
                if points.len() < 2 {
                    return Err("crack needs at least two points".into());
                }
                if !(*thickness > 0.0) {
                    return Err(format!("non-positive thickness {thickness}"));
                }
                let half = thickness / 2.0;
                if points
                    .iter()
                    .any(|p| !inside(p.x - half, p.y - half) || !inside(p.x + half, p.y + half))
                {
                    return Err("crack extends outside the canvas".into());
                }
            }
        }
        let i = self.intensity();
        if !(0.0..=MAX_VALUE).contains(&i) {
            return Err(format!("intensity {i} outside [0, 65535]"));
        }
        Ok(())
    }

    fn paint(&self, img: &mut Image) {
        let (height, width) = img.dims();
        match self {
            Self::Disk {
                center,
                radius,
                intensity,
            } => {
                let r2 = radius * radius;
                let r0 = (center.y - radius).floor().max(0.0) as usize;
                let r1 = ((center.y + radius).ceil() as usize).min(height - 1);
                let c0 = (center.x - radius).floor().max(0.0) as usize;
                let c1 = ((center.x + radius).ceil() as usize).min(width - 1);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let dy = r as f64 - center.y;
                        let dx = c as f64 - center.x;
                        if dx * dx + dy * dy <= r2 {
                            img.set(r, c, *intensity);
                        }
                    }
                }
            }
            Self::Rectangle {
                x,
                y,
                width: w,
                height: h,
                intensity,
            } => {
                for r in *y..y + h {
                    for c in *x..x + w {
                        img.set(r, c, *intensity);
                    }
                }
            }
            Self::BarGroup {
                x,
                y,
                bar_width,
                gap,
                count,
                bar_height,
                intensity,
            } => {
                for bar in 0..*count {
                    let start = x + bar * (bar_width + gap);
                    for r in *y..y + bar_height {
                        for c in start..start + bar_width {
                            img.set(r, c, *intensity);
                        }
                    }
                }
            }
            Self::Crack {
                points,
                thickness,
                intensity,
            } => {
                let half = thickness / 2.0;
                for seg in points.windows(2) {
                    let (a, b) = (seg[0], seg[1]);
                    let r0 = (a.y.min(b.y) - half).floor().max(0.0) as usize;
                    let r1 = ((a.y.max(b.y) + half).ceil() as usize).min(height - 1);
                    let c0 = (a.x.min(b.x) - half).floor().max(0.0) as usize;
                    let c1 = ((a.x.max(b.x) + half).ceil() as usize).min(width - 1);
                    for r in r0..=r1 {
                        for c in c0..=c1 {
                            if segment_distance(Point::new(c as f64, r as f64), a, b) <= half {
                                img.set(r, c, *intensity);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.x - (a.x + t * abx), p.y - (a.y + t * aby));
    (dx * dx + dy * dy).sqrt()
}

/// A scene to rasterize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: f64,
    pub primitives: Vec<Primitive>,
    /// Amplitude (raw units) of a smooth seeded background undulation; 0 keeps
    /// the background exactly flat.
    #[serde(default)]
    pub background_ripple: f64,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, background: f64) -> Self {
        Self {
            height,
            width,
            background,
            primitives: Vec::new(),
            background_ripple: 0.0,
        }
    }

    pub fn with(mut self, primitive: Primitive) -> Self {
        self.primitives.push(primitive);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Dimensions {
                width: self.width,
                height: self.height,
                reason: "empty canvas",
            });
        }
        if !(0.0..=MAX_VALUE).contains(&self.background) {
            return Err(Error::Config(format!(
                "background {} outside [0, 65535]",
                self.background
            )));
        }
        if !(self.background_ripple >= 0.0) {
            return Err(Error::Config("negative background ripple".into()));
        }
        for (index, p) in self.primitives.iter().enumerate() {
            p.validate(self.height, self.width)
                .map_err(|reason| Error::Primitive { index, reason })?;
        }
        Ok(())
    }
}

/// Rasterizes `spec`. The seed only drives the optional background ripple.
pub fn generate_phantom(spec: &SceneSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut img = Image::filled(spec.width, spec.height, spec.background)?;
    if spec.background_ripple > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let fy = rng.random_range(0.5..2.0) / spec.height as f64;
                let fx = rng.random_range(0.5..2.0) / spec.width as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (fy, fx, phase)
            })
            .collect();
        let amp = spec.background_ripple / waves.len() as f64;
        for r in 0..spec.height {
            for c in 0..spec.width {
                let ripple: f64 = waves
                    .iter()
                    .map(|&(fy, fx, ph)| {
                        (std::f64::consts::TAU * (fy * r as f64 + fx * c as f64) + ph).sin()
                    })
                    .sum();
                img.set(r, c, (spec.background + amp * ripple).clamp(0.0, MAX_VALUE));
            }
        }
    }
    for p in &spec.primitives {
        p.paint(&mut img);
    }
    Ok(img)
}

/// Draws a random low-contrast scene: a background plate plus a few disks and
/// plates, and sometimes a line-pair group or a dark crack.
///
/// Contrasts are a few noise-sigmas (hundreds to a few thousand raw units),
/// the regime of weak backscatter signals.
pub fn random_scene(height: usize, width: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = rng.random_range(8000.0..16000.0_f64).round();
    let mut spec = SceneSpec::new(height, width, background);
    let min_dim = height.min(width) as f64;
    let contrast = |rng: &mut ChaCha8Rng| {
        let c = rng.random_range(1000.0..3000.0_f64);
        if rng.random_bool(0.5) {
            c
        } else {
            -c
        }
    };

    let objects = rng.random_range(1..=3);
    for _ in 0..objects {
        let intensity = (background + contrast(&mut rng)).round();
        if rng.random_bool(0.5) {
            let radius = rng.random_range(0.08 * min_dim..0.25 * min_dim).round();
            let cx = rng.random_range(radius..(width as f64 - 1.0 - radius)).round();
            let cy = rng.random_range(radius..(height as f64 - 1.0 - radius)).round();
            spec.primitives.push(Primitive::Disk {
                center: Point::new(cx, cy),
                radius,
                intensity,
            });
        } else {
            let w = rng.random_range(width / 6..=width / 2).max(1);
            let h = rng.random_range(height / 6..=height / 2).max(1);
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            spec.primitives.push(Primitive::Rectangle {
                x,
                y,
                width: w,
                height: h,
                intensity,
            });
        }
    }

    if rng.random_bool(0.4) {
        let bar_width = rng.random_range(2..=3);
        let gap = bar_width;
        let count = 3;
        let span = count * bar_width + (count - 1) * gap;
        let bar_height = (height / 4).clamp(1, DEFAULT_BAR_HEIGHT);
        if span < width && bar_height < height {
            spec.primitives.push(Primitive::BarGroup {
                x: rng.random_range(0..=width - span),
                y: rng.random_range(0..=height - bar_height),
                bar_width,
                gap,
                count,
                bar_height,
                intensity: (background + contrast(&mut rng).abs()).round(),
            });
        }
    }

    if rng.random_bool(0.3) {
        let margin = 2.0;
        let mut pt = || {
            Point::new(
                rng.random_range(margin..width as f64 - 1.0 - margin).round(),
                rng.random_range(margin..height as f64 - 1.0 - margin).round(),
            )
        };
        let points = vec![pt(), pt(), pt()];
        spec.primitives.push(Primitive::Crack {
            points,
            thickness: 1.5,
            intensity: (background - 1500.0).round(),
        });
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_background() {
        let img = generate_phantom(&SceneSpec::new(64, 64, 1000.0), 0).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 1000.0));
    }

    #[test]
    fn bar_group_columns() {
        let spec = SceneSpec::new(64, 64, 1000.0).with(Primitive::BarGroup {
            x: 10,
            y: 10,
            bar_width: 2,
            gap: 2,
            count: 3,
            bar_height: DEFAULT_BAR_HEIGHT,
            intensity: 30000.0,
        });
        let img = generate_phantom(&spec, 0).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let in_rows = (10..10 + DEFAULT_BAR_HEIGHT).contains(&r);
                let in_cols = [10, 11, 14, 15, 18, 19].contains(&c);
                let want = if in_rows && in_cols { 30000.0 } else { 1000.0 };
                assert_eq!(img.get(r, c), want, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn zero_radius_disk_is_one_pixel() {
        let spec = SceneSpec::new(64, 64, 0.0).with(Primitive::Disk {
            center: Point::new(32.0, 32.0),
            radius: 0.0,
            intensity: 5.0,
        });
        let img = generate_phantom(&spec, 0).unwrap();
        assert_eq!(img.pixels().iter().filter(|&&v| v == 5.0).count(), 1);
        assert_eq!(img.get(32, 32), 5.0);
    }

    #[test]
    fn disk_membership_is_inclusive() {
        let spec = SceneSpec::new(16, 16, 0.0).with(Primitive::Disk {
            center: Point::new(8.0, 8.0),
            radius: 1.0,
            intensity: 1.0,
        });
        let img = generate_phantom(&spec, 0).unwrap();
        // center plus its four axis neighbors at distance exactly 1
        assert_eq!(img.pixels().iter().filter(|&&v| v == 1.0).count(), 5);
    }

    #[test]
    fn later_primitives_cover_earlier_ones() {
        let spec = SceneSpec::new(8, 8, 0.0)
            .with(Primitive::Rectangle {
                x: 0,
                y: 0,
                width: 8,
                height: 8,
                intensity: 1.0,
            })
            .with(Primitive::Rectangle {
                x: 2,
                y: 2,
                width: 2,
                height: 2,
                intensity: 2.0,
            });
        let img = generate_phantom(&spec, 0).unwrap();
        assert_eq!(img.get(2, 2), 2.0);
        assert_eq!(img.get(0, 0), 1.0);
    }

    #[test]
    fn out_of_canvas_names_the_primitive() {
        let spec = SceneSpec::new(32, 32, 0.0)
            .with(Primitive::Disk {
                center: Point::new(5.0, 5.0),
                radius: 2.0,
                intensity: 1.0,
            })
            .with(Primitive::Rectangle {
                x: 30,
                y: 0,
                width: 5,
                height: 2,
                intensity: 1.0,
            });
        match generate_phantom(&spec, 0) {
            Err(Error::Primitive { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected primitive error, got {other:?}"),
        }
    }

    #[test]
    fn crack_is_thin_line() {
        let spec = SceneSpec::new(32, 32, 100.0).with(Primitive::Crack {
            points: vec![Point::new(4.0, 10.0), Point::new(27.0, 10.0)],
            thickness: 1.0,
            intensity: 0.0,
        });
        let img = generate_phantom(&spec, 0).unwrap();
        for c in 0..32 {
            assert_eq!(img.get(10, c), if (4..=27).contains(&c) { 0.0 } else { 100.0 });
            assert_eq!(img.get(9, c), 100.0);
        }
    }

    #[test]
    fn random_scenes_are_valid_and_deterministic() {
        for seed in 0..200 {
            let spec = random_scene(64, 64, seed);
            spec.validate().unwrap();
            assert_eq!(spec, random_scene(64, 64, seed));
        }
    }

    #[test]
    fn ripple_is_seeded() {
        let mut spec = SceneSpec::new(16, 16, 1000.0);
        spec.background_ripple = 50.0;
        let a = generate_phantom(&spec, 1).unwrap();
        assert_eq!(a, generate_phantom(&spec, 1).unwrap());
        assert_ne!(a, generate_phantom(&spec, 2).unwrap());
    }
}
