//! Deterministic rasterization of sprites and scenes.

use super::spec::{Color, IdentityKey, Position, SceneSpec, Shape, Size, SubjectSpec, Texture};
use crate::raster::{Image, Mask, WHITE};

pub const CANVAS: usize = 64;
pub const DISTRACTOR_PX: usize = 10;
/// Stripe period in pixels (half base, half accent).
pub const STRIPE_PERIOD: usize = 4;

/// Whether the canvas-normalized point `(u, v)` in `[-1, 1]^2` (v pointing down) lies in `shape`.
pub fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= 0.85 * 0.85,
        Shape::Square => u.abs() <= 0.75 && v.abs() <= 0.75,
        Shape::Triangle => {
            // apex up, base down
            let (ax, ay, bx, by, cx, cy) = (0.0, -0.85, -0.85, 0.8, 0.85, 0.8);
            let s1 = (bx - ax) * (v - ay) - (by - ay) * (u - ax);
            let s2 = (cx - bx) * (v - by) - (cy - by) * (u - bx);
            let s3 = (ax - cx) * (v - cy) - (ay - cy) * (u - cx);
            (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0) || (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0)
        }
        Shape::Star => {
            let pts: Vec<(f64, f64)> = (0..10)
                .map(|i| {
                    let r = if i % 2 == 0 { 0.92 } else { 0.4 };
                    let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
                    (r * a.cos(), r * a.sin())
                })
                .collect();
            let mut inside = false;
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let (xi, yi) = pts[i];
                let (xj, yj) = pts[j];
                if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            inside
        }
        Shape::Cross => {
            (u.abs() <= 0.28 && v.abs() <= 0.85) || (v.abs() <= 0.28 && u.abs() <= 0.85)
        }
        Shape::Ring => {
            let r2 = u * u + v * v;
            (0.5 * 0.5..=0.88 * 0.88).contains(&r2)
        }
    }
}

/// Texture variant chosen by the subject seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextureVariant {
    /// 0: horizontal, 1: vertical, 2: diagonal, 3: anti-diagonal stripes.
    pub direction: usize,
    pub phase: usize,
}

impl TextureVariant {
    pub fn of(seed: u64) -> Self {
        Self {
            direction: (seed % 4) as usize,
            phase: ((seed / 4) % 6) as usize,
        }
    }
}

fn texture_is_accent(
    texture: Texture,
    var: TextureVariant,
    x: usize,
    y: usize,
    size: usize,
) -> bool {
    match texture {
        Texture::Solid => false,
        Texture::Stripes => {
            let t = match var.direction {
                0 => y,
                1 => x,
                2 => x + y,
                _ => x + size - y,
            };
            (t % STRIPE_PERIOD) >= STRIPE_PERIOD / 2
        }
        Texture::Dots => {
            let (px, py) = ((x + var.phase) % 6, (y + var.phase / 2) % 6);
            let (dx, dy) = (px as f64 - 2.5, py as f64 - 2.5);
            dx * dx + dy * dy <= 1.6 * 1.6
        }
        Texture::Checker => (((x + var.phase) / 4) + ((y + var.phase / 2) / 4)) % 2 == 1,
    }
}

/// Sprite of edge `size` on white with its exact mask (upright orientation).
pub fn render_subject(spec: &SubjectSpec, size: usize) -> (Image, Mask) {
    render_sprite(spec.identity(), spec.seed, size)
}

pub fn render_sprite(key: IdentityKey, seed: u64, size: usize) -> (Image, Mask) {
    let mut img = Image::filled(size, size, WHITE);
    let mut mask = Mask::new(size, size);
    let var = TextureVariant::of(seed);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            if inside(key.shape, u, v) {
                let c = if texture_is_accent(key.texture, var, x, y, size) {
                    key.accent
                } else {
                    key.base
                };
                img.set(y, x, c.rgb());
                mask.set(y, x, true);
            }
        }
    }
    (img, mask)
}

/// Rotates a square sprite clockwise by `quarter_turns * 90` degrees.
pub fn rotate(img: &Image, mask: &Mask, quarter_turns: usize) -> (Image, Mask) {
    let n = img.h;
    let mut out = img.clone();
    let mut m = mask.clone();
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match quarter_turns % 4 {
                0 => (y, x),
                1 => (n - 1 - x, y),
                2 => (n - 1 - y, n - 1 - x),
                _ => (x, n - 1 - y),
            };
            out.set(y, x, img.get(sy, sx));
            m.set(y, x, mask.get(sy, sx));
        }
    }
    (out, m)
}

/// Copies masked sprite pixels onto `canvas` with the sprite's top-left at `(top, left)`.
fn paste(
    canvas: &mut Image,
    canvas_mask: Option<&mut Mask>,
    sprite: &Image,
    mask: &Mask,
    top: isize,
    left: isize,
) {
    let mut cm = canvas_mask;
    for y in 0..sprite.h {
        for x in 0..sprite.w {
            if !mask.get(y, x) {
                continue;
            }
            let (cy, cx) = (top + y as isize, left + x as isize);
            if cy < 0 || cx < 0 || cy >= canvas.h as isize || cx >= canvas.w as isize {
                continue;
            }
            canvas.set(cy as usize, cx as usize, sprite.get(y, x));
            if let Some(m) = cm.as_deref_mut() {
                m.set(cy as usize, cx as usize, true);
            }
        }
    }
}

/// Corner slots for distractors, ordered by decreasing distance from the subject anchor.
pub fn distractor_slots(position: Position) -> Vec<(usize, usize)> {
    let half = DISTRACTOR_PX / 2;
    let corners = [
        (half + 1, half + 1),
        (CANVAS - half - 1, half + 1),
        (half + 1, CANVAS - half - 1),
        (CANVAS - half - 1, CANVAS - half - 1),
    ];
    let (ax, ay) = position.anchor();
    let mut c = corners.to_vec();
    c.sort_by_key(|&(x, y)| {
        std::cmp::Reverse((x as isize - ax as isize).pow(2) + (y as isize - ay as isize).pow(2))
    });
    c
}

/// Full scene and the mask of the subject's visible pixels.
pub fn render_scene_with_mask(subject: &SubjectSpec, scene: &SceneSpec) -> (Image, Mask) {
    let mut img = Image::filled(CANVAS, CANVAS, scene.background.rgb());
    let slots = distractor_slots(scene.position);
    for (d, &(cx, cy)) in scene.distractors.iter().zip(&slots) {
        let (s, m) = render_sprite(d.identity, d.seed, DISTRACTOR_PX);
        let half = (DISTRACTOR_PX / 2) as isize;
        paste(
            &mut img,
            None,
            &s,
            &m,
            cy as isize - half,
            cx as isize - half,
        );
    }
    let px = subject.size.pixels();
    let (s, m) = render_subject(subject, px);
    let (s, m) = rotate(&s, &m, scene.rotation.quarter_turns());
    let (ax, ay) = scene.position.anchor();
    let mut mask = Mask::new(CANVAS, CANVAS);
    let half = (px / 2) as isize;
    paste(
        &mut img,
        Some(&mut mask),
        &s,
        &m,
        ay as isize - half,
        ax as isize - half,
    );
    (img, mask)
}

pub fn render_scene(subject: &SubjectSpec, scene: &SceneSpec) -> Image {
    render_scene_with_mask(subject, scene).0
}

/// The subject alone, upright, centred on a white canvas.
pub fn render_reference(subject: &SubjectSpec) -> (Image, Mask) {
    let scene = SceneSpec {
        background: Color::ALL
            .iter()
            .copied()
            .find(|c| !subject.colors().contains(c))
            .expect("palette larger than two"),
        position: Position::Center,
        rotation: super::spec::Rotation::R0,
        distractors: Vec::new(),
    };
    let (img, mask) = render_scene_with_mask(subject, &scene);
    crate::conditioning::segment_subject_with_mask(&img, &mask).expect("subject is visible")
}

/// Smallest size bucket whose sprite, scaled to a `canvas`-pixel image, spans `extent` pixels.
pub fn size_bucket(extent: usize, canvas: usize) -> Size {
    *Size::ALL
        .iter()
        .find(|s| s.pixels() * canvas >= extent * CANVAS)
        .unwrap_or(&Size::Large)
}
