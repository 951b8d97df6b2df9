//! Geometry-consistent augmentation of synthetic samples: temporal flips,
//! 90° rotations, horizontal flips, and random crops, applied in lockstep to
//! frames and flow fields (with the matching vector remaps).

use crate::error::{Error, Result};
use crate::synth::{FlowTarget, SyntheticSample};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpatialXf {
    /// Clockwise quarter turns, 0..=3.
    pub rot90: u8,
    pub hflip: bool,
    /// (y0, x0, size) at the canonical high resolution; offsets and size must
    /// be multiples of 8 so every derived raster crops evenly.
    pub crop: Option<(usize, usize, usize)>,
}

fn crop3(t: &Tensor<f32>, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let (c, _h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let _ = w;
    Tensor::from_fn(&[c, ch, cw], |i| {
        let ci = i / (ch * cw);
        let y = (i / cw) % ch;
        let x = i % cw;
        t.at3(ci, y0 + y, x0 + x)
    })
}

fn rot90cw(t: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    // out is [C,W,H]: out(y', x') = in(h-1-x', y')
    Tensor::from_fn(&[c, w, h], |i| {
        let ci = i / (w * h);
        let y = (i / h) % w;
        let x = i % h;
        t.at3(ci, h - 1 - x, y)
    })
}

fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        let ci = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        t.at3(ci, y, w - 1 - x)
    })
}

/// Remap flow vectors after a clockwise quarter turn: (vx,vy) -> (-vy, vx).
fn rot_flow_vectors(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let n = h * w;
    Tensor::from_fn(&[2, h, w], |i| {
        if i < n {
            -t.data()[n + i]
        } else {
            t.data()[i - n]
        }
    })
}

fn hflip_flow_vectors(t: &Tensor<f32>) -> Tensor<f32> {
    let n = t.shape()[1] * t.shape()[2];
    Tensor::from_fn(t.shape(), |i| if i < n { -t.data()[i] } else { t.data()[i] })
}

/// Apply the transform to an image-like tensor living at 1/`div` of the
/// canonical resolution.
pub fn apply_to_image(t: &Tensor<f32>, xf: &SpatialXf, div: usize) -> Result<Tensor<f32>> {
    let mut out = t.clone();
    if let Some((y0, x0, size)) = xf.crop {
        if y0 % div != 0 || x0 % div != 0 || size % div != 0 {
            return Err(Error::contract(format!(
                "crop ({y0},{x0},{size}) does not divide by {div}"
            )));
        }
        let (cy, cx, cs) = (y0 / div, x0 / div, size / div);
        if cy + cs > out.shape()[1] || cx + cs > out.shape()[2] {
            return Err(Error::contract(format!(
                "crop ({y0},{x0},{size})/{div} outside {}x{}",
                out.shape()[1],
                out.shape()[2]
            )));
        }
        out = crop3(&out, cy, cx, cs, cs);
    }
    for _ in 0..xf.rot90 % 4 {
        out = rot90cw(&out);
    }
    if xf.hflip {
        out = hflip(&out);
    }
    Ok(out)
}

fn apply_to_flow(t: &Tensor<f32>, xf: &SpatialXf, div: usize) -> Result<Tensor<f32>> {
    let mut out = t.clone();
    if let Some((y0, x0, size)) = xf.crop {
        if y0 % div != 0 || x0 % div != 0 || size % div != 0 {
            return Err(Error::contract(format!(
                "crop ({y0},{x0},{size}) does not divide by {div}"
            )));
        }
        out = crop3(&out, y0 / div, x0 / div, size / div, size / div);
    }
    for _ in 0..xf.rot90 % 4 {
        out = rot_flow_vectors(&rot90cw(&out));
    }
    if xf.hflip {
        out = hflip_flow_vectors(&hflip(&out));
    }
    Ok(out)
}

fn apply_to_mask(t: &Tensor<f32>, xf: &SpatialXf, div: usize) -> Result<Tensor<f32>> {
    let with_c = t.clone().reshaped(vec![1, t.shape()[0], t.shape()[1]])?;
    let out = apply_to_image(&with_c, xf, div)?;
    let (h, w) = (out.shape()[1], out.shape()[2]);
    out.reshaped(vec![h, w])
}

fn apply_to_target(ft: &FlowTarget, xf: &SpatialXf, div: usize) -> Result<FlowTarget> {
    Ok(FlowTarget {
        flow: apply_to_flow(&ft.flow, xf, div)?,
        occlusion: apply_to_mask(&ft.occlusion, xf, div)?,
    })
}

/// Reverse the frame order; each flow target swaps with its opposite.
pub fn temporal_flip(s: &SyntheticSample) -> SyntheticSample {
    let mut out = s.clone();
    out.hr_frames.reverse();
    out.lr_inputs.reverse();
    std::mem::swap(&mut out.sup_fw, &mut out.sup_bw);
    std::mem::swap(&mut out.hr_fw, &mut out.hr_bw);
    out
}

/// Synchronized spatial transform of every raster in the sample.
pub fn spatial_augment(s: &SyntheticSample, xf: &SpatialXf) -> Result<SyntheticSample> {
    Ok(SyntheticSample {
        spec: s.spec.clone(),
        hr_frames: s.hr_frames.iter().map(|f| apply_to_image(f, xf, 1)).collect::<Result<_>>()?,
        lr_inputs: s.lr_inputs.iter().map(|f| apply_to_image(f, xf, 4)).collect::<Result<_>>()?,
        sup_fw: apply_to_target(&s.sup_fw, xf, 2)?,
        sup_bw: apply_to_target(&s.sup_bw, xf, 2)?,
        hr_fw: apply_to_target(&s.hr_fw, xf, 1)?,
        hr_bw: apply_to_target(&s.hr_bw, xf, 1)?,
    })
}

/// One augmented training view, able to rasterize ground truth at any
/// fractional time and scale consistently with its transform.
pub struct AugSample {
    pub view: SyntheticSample,
    pub tflip: bool,
    pub xf: SpatialXf,
}

impl AugSample {
    pub fn new(base: &SyntheticSample, tflip: bool, xf: SpatialXf) -> Result<Self> {
        let flipped;
        let src = if tflip {
            flipped = temporal_flip(base);
            &flipped
        } else {
            base
        };
        Ok(AugSample { view: spatial_augment(src, &xf)?, tflip, xf })
    }

    /// Ground truth at pair-relative time t of the augmented timeline,
    /// rasterized at (h, w).
    pub fn render_target(&self, t: f64, h: usize, w: usize) -> Result<Tensor<f32>> {
        let spec = &self.view.spec;
        let t_base = if self.tflip { 1.0 - t } else { t };
        let scene_t = t_base * (spec.n_frames - 1) as f64;
        let win = match self.xf.crop {
            Some((y0, x0, size)) => (y0 as f64, x0 as f64, size as f64, size as f64),
            None => (0.0, 0.0, spec.hr_size.0 as f64, spec.hr_size.1 as f64),
        };
        // render pre-rotation dims so the transform lands on (h, w)
        let (rh, rw) = if self.xf.rot90 % 2 == 1 { (w, h) } else { (h, w) };
        let mut img = spec.render_window(scene_t, win, rh, rw);
        for _ in 0..self.xf.rot90 % 4 {
            img = rot90cw(&img);
        }
        if self.xf.hflip {
            img = hflip(&img);
        }
        Ok(img)
    }
}

/// Draw the training augmentation for one sample: temporal flip with
/// probability 0.5, uniform quarter-turns, horizontal flip, and a random
/// crop when `crop_hr` is smaller than the frame.
pub fn random_augment(
    base: &SyntheticSample,
    crop_hr: usize,
    rng: &mut impl Rng,
) -> Result<AugSample> {
    let (h, w) = base.spec.hr_size;
    let tflip = rng.gen_bool(0.5);
    let crop = if crop_hr > 0 && crop_hr < h.min(w) {
        let y0 = (rng.gen_range(0..=(h - crop_hr) / 8)) * 8;
        let x0 = (rng.gen_range(0..=(w - crop_hr) / 8)) * 8;
        Some((y0, x0, crop_hr))
    } else {
        None
    };
    let square = match crop {
        Some(_) => true,
        None => h == w,
    };
    let xf = SpatialXf {
        rot90: if square { rng.gen_range(0..4) } else { [0u8, 2][rng.gen_range(0..2)] },
        hflip: rng.gen_bool(0.5),
        crop,
    };
    AugSample::new(base, tflip, xf)
}

/// Continuous-protocol draw: t uniform over {1/8..7/8}, scale uniform over
/// {2.0, 2.2, ..., 4.0}.
pub fn sample_continuous(rng: &mut impl Rng) -> (f64, f64) {
    let t = (1 + rng.gen_range(0..7)) as f64 / 8.0;
    let s = 2.0 + 0.2 * rng.gen_range(0..11) as f64;
    (t, s)
}
