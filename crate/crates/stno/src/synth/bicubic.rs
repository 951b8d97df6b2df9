//! Separable Catmull-Rom bicubic resampling (a = -0.5), half-pixel phase,
//! clamp-to-edge. Used by the data pipeline and the upsampling baseline.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const A: f64 = -0.5;

fn kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap weights and source start index for one output coordinate.
fn taps(dst: usize, src_len: usize, scale: f64) -> ([f64; 4], isize) {
    let s = (dst as f64 + 0.5) * scale - 0.5;
    let base = s.floor() as isize - 1;
    let mut w = [0.0; 4];
    for (k, wk) in w.iter_mut().enumerate() {
        *wk = kernel(s - (base + k as isize) as f64);
    }
    let _ = src_len;
    (w, base)
}

/// Resize [C,H,W] to [C,OH,OW] with bicubic interpolation.
pub fn bicubic_resize<S: Scalar>(img: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::dim(format!("bicubic_resize: {shape:?}")));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::dim(format!("bicubic_resize: output {oh}x{ow}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;

    // horizontal pass: [C,H,W] -> [C,H,OW]
    let mut tmp = vec![0.0f64; c * h * ow];
    for ox in 0..ow {
        let (wx, base) = taps(ox, w, sx);
        for ci in 0..c {
            for y in 0..h {
                let row = &img.data()[(ci * h + y) * w..(ci * h + y + 1) * w];
                let mut acc = 0.0;
                for (k, &wk) in wx.iter().enumerate() {
                    let xi = (base + k as isize).clamp(0, w as isize - 1) as usize;
                    acc += wk * row[xi].to_f64_();
                }
                tmp[(ci * h + y) * ow + ox] = acc;
            }
        }
    }
    // vertical pass: [C,H,OW] -> [C,OH,OW]
    let mut out = vec![S::zero(); c * oh * ow];
    for oy in 0..oh {
        let (wy, base) = taps(oy, h, sy);
        for ci in 0..c {
            for ox in 0..ow {
                let mut acc = 0.0;
                for (k, &wk) in wy.iter().enumerate() {
                    let yi = (base + k as isize).clamp(0, h as isize - 1) as usize;
                    acc += wk * tmp[(ci * h + yi) * ow + ox];
                }
                out[(ci * oh + oy) * ow + ox] = S::from_f64(acc);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Bicubic decimation by an integer factor; dimensions must divide evenly.
pub fn bicubic_downsample<S: Scalar>(img: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::dim(format!("bicubic_downsample: {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(format!(
            "bicubic_downsample: {h}x{w} not divisible by {factor}"
        )));
    }
    bicubic_resize(img, h / factor, w / factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::<f64>::full(&[3, 8, 8], 0.37);
        let out = bicubic_downsample(&img, 4).unwrap();
        assert_eq!(out.shape(), &[3, 2, 2]);
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
        let up = bicubic_resize(&img, 13, 21).unwrap();
        for &v in up.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ramp_reproduced() {
        // cubic convolution reproduces affine functions away from the border
        let w = 16;
        let img = Tensor::<f64>::from_fn(&[1, 4, w], |i| (i % w) as f64);
        let out = bicubic_downsample(&img, 4).unwrap();
        // output x samples source at (ox+0.5)*4-0.5
        for ox in 1..3 {
            let expect = (ox as f64 + 0.5) * 4.0 - 0.5;
            assert!((out.at3(0, 0, ox) - expect).abs() < 1e-12, "{ox}");
        }
    }

    #[test]
    fn checkerboard_matches_scalar_reference() {
        let img = Tensor::<f64>::from_fn(&[1, 8, 8], |i| {
            let (y, x) = (i / 8, i % 8);
            ((x + y) % 2) as f64
        });
        let out = bicubic_downsample(&img, 4).unwrap();

        // independent direct 2-D reference (no separability)
        let kernel_ref = |x: f64| -> f64 {
            let x = x.abs();
            let a = -0.5;
            if x <= 1.0 {
                (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
            } else if x < 2.0 {
                a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
            } else {
                0.0
            }
        };
        for oy in 0..2 {
            for ox in 0..2 {
                let sy = (oy as f64 + 0.5) * 4.0 - 0.5;
                let sx = (ox as f64 + 0.5) * 4.0 - 0.5;
                let mut acc = 0.0;
                for ky in -1i64..=2 {
                    for kx in -1i64..=2 {
                        let yy = (sy.floor() as i64 + ky).clamp(0, 7) as usize;
                        let xx = (sx.floor() as i64 + kx).clamp(0, 7) as usize;
                        let wy = kernel_ref(sy - (sy.floor() + ky as f64));
                        let wx = kernel_ref(sx - (sx.floor() + kx as f64));
                        acc += wy * wx * img.at3(0, yy, xx);
                    }
                }
                assert!((out.at3(0, oy, ox) - acc).abs() < 1e-12, "({oy},{ox})");
            }
        }
    }

    #[test]
    fn rejects_non_divisible_dims() {
        let img = Tensor::<f64>::zeros(&[1, 9, 8]);
        assert!(bicubic_downsample(&img, 4).is_err());
    }
}
