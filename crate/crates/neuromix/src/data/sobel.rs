//! Sobel edge preprocessing: grayscale (or RGB, converted first) images
//! become two planes of horizontal- and vertical-gradient responses. The
//! network never sees raw intensities, which keeps it from overfitting to
//! colors and absolute brightness.
//!
//! The 3×3 kernels are applied separably ([1,2,1] smoothing times central
//! difference) so constant regions cancel exactly and transposition swaps
//! the channels bitwise.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// [1,2,1] smoothing along y with zero padding.
fn smooth_rows(src: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let above = if y > 0 { src[(y - 1) * w + x] } else { 0.0 };
            let below = if y + 1 < h { src[(y + 1) * w + x] } else { 0.0 };
            out[y * w + x] = above + 2.0 * src[y * w + x] + below;
        }
    }
}

/// [1,2,1] smoothing along x with zero padding.
fn smooth_cols(src: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let left = if x > 0 { src[y * w + x - 1] } else { 0.0 };
            let right = if x + 1 < w { src[y * w + x + 1] } else { 0.0 };
            out[y * w + x] = left + 2.0 * src[y * w + x] + right;
        }
    }
}

/// `1×H×W` or RGB `3×H×W` → `2×H×W`: channel 0 is the horizontal-gradient
/// response, channel 1 the vertical-gradient response, both at the input's
/// spatial size (zero "same" padding).
pub fn sobel_preprocess(img: &Tensor) -> Result<Tensor> {
    if img.ndim() != 3 {
        return Err(Error::shape(format!("sobel: expected c×h×w image, got {:?}", img.shape())));
    }
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let gray: Vec<f64> = match c {
        1 => img.data().to_vec(),
        3 => {
            let plane = h * w;
            let (r, rest) = img.data().split_at(plane);
            let (g, b) = rest.split_at(plane);
            r.iter()
                .zip(g)
                .zip(b)
                .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
                .collect()
        }
        _ => return Err(Error::shape(format!("sobel: expected 1 or 3 channels, got {c}"))),
    };

    let mut smoothed = vec![0.0; h * w];
    let mut out = vec![0.0; 2 * h * w];
    {
        // horizontal gradient: vertical smoothing, then central x-difference
        smooth_rows(&gray, h, w, &mut smoothed);
        let hx = &mut out[..h * w];
        for y in 0..h {
            for x in 0..w {
                let left = if x > 0 { smoothed[y * w + x - 1] } else { 0.0 };
                let right = if x + 1 < w { smoothed[y * w + x + 1] } else { 0.0 };
                hx[y * w + x] = right - left;
            }
        }
    }
    {
        // vertical gradient: horizontal smoothing, then central y-difference
        smooth_cols(&gray, h, w, &mut smoothed);
        let vy = &mut out[h * w..];
        for y in 0..h {
            for x in 0..w {
                let above = if y > 0 { smoothed[(y - 1) * w + x] } else { 0.0 };
                let below = if y + 1 < h { smoothed[(y + 1) * w + x] } else { 0.0 };
                vy[y * w + x] = below - above;
            }
        }
    }
    Tensor::new(vec![2, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let img = Tensor::full(&[1, 5, 5], 0.7);
        let out = sobel_preprocess(&img).unwrap();
        // interior exactly zero; borders see the zero padding
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(out.data()[y * 5 + x], 0.0);
                assert_eq!(out.data()[25 + y * 5 + x], 0.0);
            }
        }
    }

    #[test]
    fn matches_direct_3x3_correlation() {
        // independent dense 3×3 application as the oracle
        let gx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let gy = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let (h, w) = (5, 4);
        let data: Vec<f64> = (0..h * w).map(|v| ((v * 37 % 11) as f64) / 10.0).collect();
        let img = Tensor::new(vec![1, h, w], data.clone()).unwrap();
        let out = sobel_preprocess(&img).unwrap();
        let direct = |kernel: &[[f64; 3]; 3], y: usize, x: usize| -> f64 {
            let mut acc = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as i64 + ky as i64 - 1;
                    let sx = x as i64 + kx as i64 - 1;
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        acc += kernel[ky][kx] * data[sy as usize * w + sx as usize];
                    }
                }
            }
            acc
        };
        for y in 0..h {
            for x in 0..w {
                assert!((out.data()[y * w + x] - direct(&gx, y, x)).abs() < 1e-12);
                assert!((out.data()[h * w + y * w + x] - direct(&gy, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vertical_step_edge_activates_horizontal_channel_only() {
        // columns 0..3 dark, 3..6 bright
        let mut img = Tensor::zeros(&[1, 6, 6]);
        for y in 0..6 {
            for x in 3..6 {
                img.data_mut()[y * 6 + x] = 1.0;
            }
        }
        let out = sobel_preprocess(&img).unwrap();
        let hx = &out.data()[..36];
        let vy = &out.data()[36..];
        // horizontal-gradient channel fires along the step
        for y in 1..5 {
            assert!(hx[y * 6 + 3].abs() > 0.0);
        }
        // vertical-gradient channel is zero away from the borders
        for y in 1..5 {
            for x in 1..5 {
                assert_eq!(vy[y * 6 + x], 0.0);
            }
        }
    }

    #[test]
    fn transposing_the_input_swaps_channels() {
        let (h, w) = (4, 4);
        let data: Vec<f64> = (0..16).map(|v| (v as f64 * 0.37).sin().abs()).collect();
        let img = Tensor::new(vec![1, h, w], data.clone()).unwrap();
        let mut tdata = vec![0.0; 16];
        for y in 0..h {
            for x in 0..w {
                tdata[x * h + y] = data[y * w + x];
            }
        }
        let timg = Tensor::new(vec![1, w, h], tdata).unwrap();
        let a = sobel_preprocess(&img).unwrap();
        let b = sobel_preprocess(&timg).unwrap();
        for y in 0..h {
            for x in 0..w {
                // horizontal response of transpose == transposed vertical response
                assert_eq!(b.data()[x * h + y], a.data()[16 + y * w + x]);
                assert_eq!(b.data()[16 + x * h + y], a.data()[y * w + x]);
            }
        }
    }

    #[test]
    fn rgb_is_converted_to_luminance_first() {
        let mut img = Tensor::zeros(&[3, 3, 3]);
        img.data_mut()[..9].iter_mut().for_each(|v| *v = 1.0); // pure red
        let out = sobel_preprocess(&img).unwrap();
        let gray_equiv = Tensor::full(&[1, 3, 3], 0.299);
        let expect = sobel_preprocess(&gray_equiv).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
