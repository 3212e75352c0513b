//! Synthetic datasets: 2-d Gaussian blobs for the vector-clustering
//! experiments and a 10-class glyph image set that stands in for handwritten
//! digits when no IDX files are available.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{DataKind, Dataset};

/// Isotropic 2-d Gaussian blobs (σ = 1) with centers at pairwise distance
/// ≥ `separation`. Labels are balanced by construction: cluster `c` owns
/// samples `c·m .. (c+1)·m`.
pub fn make_blobs(
    clusters: usize,
    points_per_cluster: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if clusters < 2 {
        return Err(Error::config(format!("make_blobs: need ≥ 2 clusters, got {clusters}")));
    }
    if points_per_cluster == 0 {
        return Err(Error::config("make_blobs: need ≥ 1 point per cluster"));
    }
    if !(separation > 0.0) {
        return Err(Error::config(format!("make_blobs: bad separation {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Rejection-sample centers in a box sized for the requested packing;
    // widen the box if a configuration refuses to fit.
    let mut half = separation * (clusters as f64).sqrt();
    let centers = loop {
        let mut centers: Vec<(f64, f64)> = Vec::with_capacity(clusters);
        let mut attempts = 0;
        while centers.len() < clusters && attempts < 10_000 {
            attempts += 1;
            let c = (rng.gen_range(-half..half), rng.gen_range(-half..half));
            let ok = centers
                .iter()
                .all(|o| ((c.0 - o.0).powi(2) + (c.1 - o.1).powi(2)).sqrt() >= separation);
            if ok {
                centers.push(c);
            }
        }
        if centers.len() == clusters {
            break centers;
        }
        half *= 1.5;
    };

    let mut samples = Vec::with_capacity(clusters * points_per_cluster);
    let mut labels = Vec::with_capacity(clusters * points_per_cluster);
    for (label, &(cx, cy)) in centers.iter().enumerate() {
        for _ in 0..points_per_cluster {
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            samples.push(Tensor::new(vec![2], vec![cx + nx, cy + ny])?);
            labels.push(label);
        }
    }
    Dataset::new(samples, Some(labels), DataKind::Vector)
}

// ---------------------------------------------------------------------------
// glyph images
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Stroke {
    Segment { a: (f64, f64), b: (f64, f64) },
    Ring { center: (f64, f64), radius: f64 },
}

fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> Stroke {
    Stroke::Segment { a: (ax, ay), b: (bx, by) }
}

/// Ten visually distinct stroke prototypes in [−1,1]² coordinates.
fn prototype(class: usize) -> Vec<Stroke> {
    match class {
        0 => vec![Stroke::Ring { center: (0.0, 0.0), radius: 0.55 }],
        1 => vec![seg(0.0, -0.6, 0.0, 0.6)],
        2 => vec![seg(-0.55, 0.0, 0.55, 0.0)],
        3 => vec![seg(0.0, -0.55, 0.0, 0.55), seg(-0.55, 0.0, 0.55, 0.0)],
        4 => vec![seg(-0.42, -0.42, 0.42, 0.42), seg(-0.42, 0.42, 0.42, -0.42)],
        5 => vec![
            seg(-0.45, -0.45, 0.45, -0.45),
            seg(0.45, -0.45, 0.45, 0.45),
            seg(0.45, 0.45, -0.45, 0.45),
            seg(-0.45, 0.45, -0.45, -0.45),
        ],
        6 => vec![
            seg(0.0, -0.55, 0.5, 0.4),
            seg(0.5, 0.4, -0.5, 0.4),
            seg(-0.5, 0.4, 0.0, -0.55),
        ],
        7 => vec![seg(-0.45, 0.45, 0.45, -0.45)],
        8 => vec![seg(-0.3, -0.55, -0.3, 0.55), seg(0.3, -0.55, 0.3, 0.55)],
        9 => vec![seg(-0.5, -0.5, 0.5, -0.5), seg(0.0, -0.5, 0.0, 0.55)],
        _ => unreachable!("glyph classes are 0..10"),
    }
}

fn dist_to(stroke: &Stroke, px: f64, py: f64) -> f64 {
    match stroke {
        Stroke::Segment { a, b } => {
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len2 = dx * dx + dy * dy;
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            };
            let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
            ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
        }
        Stroke::Ring { center, radius } => {
            let d = ((px - center.0).powi(2) + (py - center.1).powi(2)).sqrt();
            (d - radius).abs()
        }
    }
}

fn transform(stroke: &Stroke, angle: f64, scale: f64, shift: (f64, f64)) -> Stroke {
    let (sin, cos) = angle.sin_cos();
    let map = |(x, y): (f64, f64)| -> (f64, f64) {
        let (x, y) = (x * scale, y * scale);
        (cos * x - sin * y + shift.0, sin * x + cos * y + shift.1)
    };
    match stroke {
        Stroke::Segment { a, b } => Stroke::Segment { a: map(*a), b: map(*b) },
        Stroke::Ring { center, radius } => {
            Stroke::Ring { center: map(*center), radius: radius * scale }
        }
    }
}

const GLYPH_SIZE: usize = 28;

fn render_glyph(strokes: &[Stroke], width: f64, noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = GLYPH_SIZE;
    let aa = 2.0 / n as f64 * 1.2;
    let mut data = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let px = (x as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let py = (y as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let mut v: f64 = 0.0;
            for s in strokes {
                let d = dist_to(s, px, py);
                v = v.max((1.0 - (d - width) / aa).clamp(0.0, 1.0));
            }
            if noise > 0.0 {
                v = (v + rng.gen_range(0.0..noise)).min(1.0);
            }
            data[y * n + x] = v;
        }
    }
    Tensor::new(vec![1, n, n], data).expect("glyph shape")
}

/// Deterministic 28×28 glyph dataset: up to 10 stroke-shape classes with
/// per-sample rotation/scale/shift/width jitter and light additive noise.
/// A desk-scale stand-in for handwritten-digit images with the same shape
/// and label layout as the IDX loaders produce.
pub fn make_glyphs(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if !(2..=10).contains(&classes) {
        return Err(Error::config(format!("make_glyphs: classes must be 2..=10, got {classes}")));
    }
    if per_class == 0 {
        return Err(Error::config("make_glyphs: need ≥ 1 sample per class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let proto = prototype(class);
        for _ in 0..per_class {
            let angle = rng.gen_range(-10.0f64..=10.0).to_radians();
            let scale = rng.gen_range(0.85..=1.15);
            let shift = (rng.gen_range(-0.18..=0.18), rng.gen_range(-0.18..=0.18));
            let width = rng.gen_range(0.04..=0.09);
            let strokes: Vec<Stroke> =
                proto.iter().map(|s| transform(s, angle, scale, shift)).collect();
            samples.push(render_glyph(&strokes, width, 0.05, &mut rng));
            labels.push(class);
        }
    }
    Dataset::new(samples, Some(labels), DataKind::Image)
}
