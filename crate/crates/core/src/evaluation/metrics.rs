//! Surrogate metrics: descriptor cosine for subject fidelity, an attribute checker for text alignment.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::conditioning::{cosine, extract_semantic_features, is_occupied, segment_subject};
use crate::data::{
    parse_prompt, render_subject, size_bucket, Color, Position, Shape, Size, SubjectSpec, Texture,
    CANVAS,
};
use crate::raster::{Image, Mask, WHITE};

/// Per-channel distance from the background above which a pixel belongs to a foreground object.
pub const FOREGROUND: f32 = 0.25;

/// Nearest palette colour, or `None` for white.
pub fn snap(p: [f32; 3]) -> Option<Color> {
    let d = |c: [f32; 3]| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f32>();
    let mut best = (d(WHITE), None);
    for &c in Color::ALL {
        let v = d(c.rgb());
        if v < best.0 {
            best = (v, Some(c));
        }
    }
    best.1
}

/// Most frequent snapped colour of the pixels outside `exclude` (an inclusive-exclusive box).
pub fn dominant_color(img: &Image, exclude: Option<(usize, usize, usize, usize)>) -> Option<Color> {
    let mut counts = [0usize; 9];
    for y in 0..img.h {
        for x in 0..img.w {
            if let Some((y0, x0, y1, x1)) = exclude {
                if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                    continue;
                }
            }
            counts[snap(img.get(y, x)).map_or(8, |c| c.index())] += 1;
        }
    }
    let best = (0..9)
        .max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))
        .expect("non-empty");
    (best < 8).then(|| Color::ALL[best])
}

fn rgb(c: Option<Color>) -> [f32; 3] {
    c.map_or(WHITE, Color::rgb)
}

/// Pixels farther than [`FOREGROUND`] from `background` in any channel.
pub fn foreground(img: &Image, background: [f32; 3]) -> Mask {
    let mut m = Mask::new(img.h, img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            let p = img.get(y, x);
            m.set(
                y,
                x,
                (0..3).any(|i| (p[i] - background[i]).abs() > FOREGROUND),
            );
        }
    }
    m
}

/// Top-left corner of the `side x side` window holding the most true cells; ties go to the first in row-major order.
pub fn max_occupancy_window(mask: &Mask, side: usize) -> (usize, usize) {
    let side = side.min(mask.h).min(mask.w);
    let w1 = mask.w + 1;
    let mut sum = vec![0usize; (mask.h + 1) * w1];
    for y in 0..mask.h {
        for x in 0..mask.w {
            sum[(y + 1) * w1 + x + 1] =
                mask.get(y, x) as usize + sum[y * w1 + x + 1] + sum[(y + 1) * w1 + x]
                    - sum[y * w1 + x];
        }
    }
    let mut best = (0, (0, 0));
    for y in 0..=mask.h - side {
        for x in 0..=mask.w - side {
            let c = sum[(y + side) * w1 + x + side] + sum[y * w1 + x]
                - sum[y * w1 + x + side]
                - sum[(y + side) * w1 + x];
            if c > best.0 {
                best = (c, (y, x));
            }
        }
    }
    best.1
}

/// Side of the reference subject's size bucket, in pixels of the reference.
pub fn reference_window(reference: &Image) -> Option<usize> {
    let mut m = Mask::new(reference.h, reference.w);
    for y in 0..reference.h {
        for x in 0..reference.w {
            m.set(y, x, is_occupied(reference.get(y, x)));
        }
    }
    let (y0, x0, y1, x1) = m.bbox()?;
    let extent = (y1 - y0).max(x1 - x0);
    Some(
        (size_bucket(extent, reference.w).pixels() * reference.w)
            .div_ceil(CANVAS)
            .max(extent),
    )
}

/// The foreground inside the densest `side`-pixel window, re-centred on white; `None` when nothing is found.
pub fn localize_subject(img: &Image, side: usize) -> Option<Image> {
    let fg = foreground(img, rgb(dominant_color(img, None)));
    let (y0, x0) = max_occupancy_window(&fg, side);
    let mut m = Mask::new(img.h, img.w);
    for y in y0..(y0 + side).min(img.h) {
        for x in x0..(x0 + side).min(img.w) {
            m.set(y, x, fg.get(y, x));
        }
    }
    segment_subject(img, &m).ok()
}

/// Cosine between the global descriptors of the reference and of the subject found in `generated`.
pub fn subject_fidelity(generated: &Image, reference: &Image) -> Result<f64, EvalError> {
    if (generated.h, generated.w) != (reference.h, reference.w) {
        return Err(EvalError::Shape(format!(
            "generated {}x{} vs reference {}x{}",
            generated.h, generated.w, reference.h, reference.w
        )));
    }
    let size = reference.w;
    let want = extract_semantic_features(reference, size)?.global;
    let Some(side) = reference_window(reference) else {
        return Ok(0.0);
    };
    let Some(crop) = localize_subject(generated, side) else {
        return Ok(0.0);
    };
    let got = extract_semantic_features(&crop, size)?.global;
    Ok(cosine(&want, &got))
}

/// What the attribute checker read from an image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observed {
    pub background: Option<Color>,
    pub position: Option<Position>,
    /// Larger bounding-box side of the subject, in pixels.
    pub extent: Option<usize>,
}

/// Pixels of the largest 8-connected component (first found in raster order on ties).
pub fn largest_component(mask: &Mask) -> Mask {
    let mut label = vec![usize::MAX; mask.h * mask.w];
    let mut best: (usize, Vec<usize>) = (0, Vec::new());
    let mut stack = Vec::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || label[start] != usize::MAX {
            continue;
        }
        let mut comp = Vec::new();
        label[start] = start;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = ((i / mask.w) as isize, (i % mask.w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= mask.h as isize || nx >= mask.w as isize {
                        continue;
                    }
                    let j = ny as usize * mask.w + nx as usize;
                    if mask.data[j] && label[j] == usize::MAX {
                        label[j] = start;
                        stack.push(j);
                    }
                }
            }
        }
        if comp.len() > best.0 {
            best = (comp.len(), comp);
        }
    }
    let mut out = Mask::new(mask.h, mask.w);
    for i in best.1 {
        out.data[i] = true;
    }
    out
}

/// Background, subject position and subject size read off `img`.
pub fn observe(img: &Image) -> Observed {
    let coarse = dominant_color(img, None);
    let subject = largest_component(&foreground(img, rgb(coarse)));
    let Some((y0, x0, y1, x1)) = subject.bbox() else {
        return Observed {
            background: coarse,
            position: None,
            extent: None,
        };
    };
    let background = dominant_color(img, Some((y0, x0, y1, x1)));
    let scale = img.w as f64 / CANVAS as f64;
    let (cy, cx) = ((y0 + y1) as f64 / 2.0, (x0 + x1) as f64 / 2.0);
    let dist = |p: &Position| {
        let (ax, ay) = p.anchor();
        (ax as f64 * scale - cx).powi(2) + (ay as f64 * scale - cy).powi(2)
    };
    let position = Position::ALL
        .iter()
        .copied()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)));
    Observed {
        background,
        position,
        extent: Some((y1 - y0).max(x1 - x0)),
    }
}

/// Size bucket whose upright `shape` sprite, scaled to a `canvas`-pixel image, has the extent nearest `extent`.
pub fn size_of_shape(extent: usize, shape: Shape, canvas: usize) -> Size {
    let rendered = |s: Size| {
        let (_, m) = render_subject(
            &SubjectSpec {
                shape,
                base: Color::Black,
                texture: Texture::Solid,
                accent: Color::Black,
                size: s,
                seed: 0,
            },
            s.pixels(),
        );
        let (y0, x0, y1, x1) = m.bbox().expect("non-empty sprite");
        (y1 - y0).max(x1 - x0) as f64 * canvas as f64 / CANVAS as f64
    };
    *Size::ALL
        .iter()
        .min_by(|a, b| {
            (rendered(**a) - extent as f64)
                .abs()
                .total_cmp(&(rendered(**b) - extent as f64).abs())
        })
        .expect("non-empty")
}

/// Attribute checks of one image against one prompt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub observed: Observed,
    pub size: Option<Size>,
    pub satisfied: usize,
    pub checked: usize,
}

impl AttributeScore {
    pub fn accuracy(&self) -> f64 {
        self.satisfied as f64 / self.checked as f64
    }
}

/// Scores background colour, size and (when the prompt names it) position.
pub fn score_attributes(img: &Image, prompt: &str) -> Result<AttributeScore, EvalError> {
    let (subject, scene) = parse_prompt(prompt)?;
    let observed = observe(img);
    let size = observed
        .extent
        .map(|e| size_of_shape(e, subject.shape, img.w));
    let mut checks = vec![
        observed.background == Some(scene.background),
        size == Some(subject.size),
    ];
    if let Some(p) = scene.position {
        checks.push(observed.position == Some(p));
    }
    Ok(AttributeScore {
        observed,
        size,
        satisfied: checks.iter().filter(|&&b| b).count(),
        checked: checks.len(),
    })
}

pub fn text_alignment(img: &Image, prompt: &str) -> Result<f64, EvalError> {
    Ok(score_attributes(img, prompt)?.accuracy())
}
