//! Procedural stand-in for MNIST when no IDX files are available.
//!
//! Each class is a seven-segment glyph. Every sample applies a random affine
//! warp, per-endpoint jitter, variable stroke width and intensity, optional
//! clutter strokes and pixel noise, then snaps intensities to the 1/255 grid
//! so the result round-trips through IDX exactly.

use super::{Dataset, Split, CLASSES, PIXELS, SIDE};
use crate::error::{Error, Result};
use crate::rng::{derive_stream, RngStream, StreamId};

// Segment endpoints in glyph coordinates: x in [-1, 1], y in [-1, 1] (down).
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((-1.0, -1.0), (1.0, -1.0)), // a: top
    ((1.0, -1.0), (1.0, 0.0)),   // b: top right
    ((1.0, 0.0), (1.0, 1.0)),    // c: bottom right
    ((-1.0, 1.0), (1.0, 1.0)),   // d: bottom
    ((-1.0, 0.0), (-1.0, 1.0)),  // e: bottom left
    ((-1.0, -1.0), (-1.0, 0.0)), // f: top left
    ((-1.0, 0.0), (1.0, 0.0)),   // g: middle
];

// Segment masks for digits 0..9 (bit i = segment i above).
const GLYPHS: [u8; CLASSES] = [
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111,
    0b1111111, 0b1101111,
];

const HALF_W: f64 = 4.5;
const HALF_H: f64 = 7.5;
const NOISE_SD: f64 = 0.1;

struct Warp {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Warp {
    fn random(rng: &mut RngStream) -> Self {
        let angle = rng.uniform(-0.2, 0.2);
        let shear = rng.uniform(-0.25, 0.25);
        let sx = rng.uniform(0.85, 1.15) * HALF_W;
        let sy = rng.uniform(0.9, 1.1) * HALF_H;
        let (s, c) = angle.sin_cos();
        // rotation · shear · scale
        let a = [[sx, shear * sy], [0.0, sy]];
        let m = [
            [c * a[0][0] - s * a[1][0], c * a[0][1] - s * a[1][1]],
            [s * a[0][0] + c * a[1][0], s * a[0][1] + c * a[1][1]],
        ];
        let t = [13.5 + rng.uniform(-1.5, 1.5), 13.5 + rng.uniform(-1.5, 1.5)];
        Self { m, t }
    }

    fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }
}

fn seg_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn draw_stroke(canvas: &mut [f64], a: (f64, f64), b: (f64, f64), half_width: f64, intensity: f64) {
    let (x0, x1) = (a.0.min(b.0) - half_width - 1.0, a.0.max(b.0) + half_width + 1.0);
    let (y0, y1) = (a.1.min(b.1) - half_width - 1.0, a.1.max(b.1) + half_width + 1.0);
    let cols = (x0.floor().max(0.0) as usize)..=(x1.ceil().min(SIDE as f64 - 1.0) as usize);
    let rows = (y0.floor().max(0.0) as usize)..=(y1.ceil().min(SIDE as f64 - 1.0) as usize);
    for r in rows {
        for c in cols.clone() {
            let d = seg_distance(c as f64, r as f64, a, b);
            let v = intensity * (half_width + 0.5 - d).clamp(0.0, 1.0);
            let px = &mut canvas[r * SIDE + c];
            if v > *px {
                *px = v;
            }
        }
    }
}

fn render(label: usize, rng: &mut RngStream) -> [f32; PIXELS] {
    let mut canvas = [0.0f64; PIXELS];
    let warp = Warp::random(rng);
    let half_width = rng.uniform(0.7, 1.4);
    let intensity = rng.uniform(0.6, 1.0);
    let jitter = 0.1;
    for (i, &(a, b)) in SEGMENTS.iter().enumerate() {
        if GLYPHS[label] >> i & 1 == 0 {
            continue;
        }
        let ja = (a.0 + jitter * rng.normal(), a.1 + jitter * rng.normal());
        let jb = (b.0 + jitter * rng.normal(), b.1 + jitter * rng.normal());
        // Occasionally a segment is drawn faintly, as in a broken pen stroke.
        let seg_int = if rng.next_f64() < 0.04 { intensity * 0.35 } else { intensity };
        draw_stroke(&mut canvas, warp.apply(ja), warp.apply(jb), half_width, seg_int);
    }
    // Clutter: a short stray stroke.
    if rng.next_f64() < 0.6 {
        let a = (rng.uniform(2.0, 26.0), rng.uniform(2.0, 26.0));
        let b = (a.0 + rng.uniform(-6.0, 6.0), a.1 + rng.uniform(-6.0, 6.0));
        draw_stroke(&mut canvas, a, b, rng.uniform(0.4, 0.9), rng.uniform(0.3, 0.8));
    }
    let mut out = [0.0f32; PIXELS];
    for (o, v) in out.iter_mut().zip(canvas) {
        let noisy = (v + NOISE_SD * rng.normal()).clamp(0.0, 1.0);
        *o = ((noisy * 255.0).round() / 255.0) as f32;
    }
    out
}

/// `n` samples split evenly across the ten classes (in shuffled order),
/// deterministic in `seed`.
pub fn synth_dataset(n: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_as(n, seed, Split::Train)
}

pub(crate) fn synth_dataset_as(n: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n < CLASSES {
        return Err(Error::param(format!("synth dataset needs n >= 10, got {n}")));
    }
    let mut order_rng = derive_stream(seed, StreamId::new("synth", 0, "labels"));
    let mut labels: Vec<u8> = (0..n).map(|i| (i % CLASSES) as u8).collect();
    order_rng.shuffle(&mut labels);
    let mut images = Vec::with_capacity(n * PIXELS);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = derive_stream(seed, StreamId::new("synth", i as u64, "sample"));
        images.extend_from_slice(&render(label as usize, &mut rng));
    }
    Dataset::new(images, labels, split)
}
