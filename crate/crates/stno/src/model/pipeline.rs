//! Forward-pass composition: projection pyramid, coarse-to-fine coupled
//! MEMC, bidirectional propagation, and the continuous coordinate decoder.

use super::{BoundModel, PYRAMID_LEVELS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Value};

/// Per-frame features at three spatial scales, finest (input resolution) first.
pub struct FeaturePyramid {
    pub levels: [Value; PYRAMID_LEVELS],
    pub dims: [(usize, usize); PYRAMID_LEVELS],
}

/// The four flow fields of one pyramid level, in that level's pixel units.
#[derive(Clone, Copy)]
pub struct FlowLevel {
    pub flow01: Value,
    pub flow10: Value,
    pub flow_t0: Value,
    pub flow_t1: Value,
    pub h: usize,
    pub w: usize,
}

/// Flows of one adjacent input pair at every pyramid level, finest first.
pub struct PairFlows {
    pub levels: Vec<FlowLevel>,
}

/// What a produced output frame corresponds to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrameKind {
    /// The i-th input frame.
    Existing(usize),
    /// Interpolated at time t inside input pair `pair`.
    Interpolated { pair: usize, t: f64 },
}

pub struct ForwardOutput {
    pub frames: Vec<Value>,
    pub kinds: Vec<FrameKind>,
    pub pair_flows: Vec<PairFlows>,
}

/// Edge-replicate pad of a [C,H,W] tensor so H and W become multiples of `m`.
pub fn pad_to_multiple<S: Scalar>(t: &Tensor<S>, m: usize) -> Tensor<S> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return t.clone();
    }
    Tensor::from_fn(&[c, ph, pw], |i| {
        let ci = i / (ph * pw);
        let y = (i / pw) % ph;
        let x = i % pw;
        t.at3(ci, y.min(h - 1), x.min(w - 1))
    })
}

/// Indices and blend weights of the four nearest feature centers for every
/// output pixel. Queries cover the `active` region of a possibly padded
/// feature map; weights are bilinear areas summing to 1.
pub struct EnsembleGrid {
    /// Token index of each corner, per output pixel: [4][m].
    pub idx: [Vec<usize>; 4],
    /// Blend weight of each corner: [4][m].
    pub weight: [Vec<f64>; 4],
    /// (dx, dy) from the corner's feature center to the query, feature px.
    pub rel: [Vec<(f64, f64)>; 4],
    /// Feature pixels covered by one output pixel: (cell_h, cell_w).
    pub cell: (f64, f64),
}

pub fn ensemble_grid(
    feat_h: usize,
    feat_w: usize,
    active_h: usize,
    active_w: usize,
    out_h: usize,
    out_w: usize,
) -> EnsembleGrid {
    let m = out_h * out_w;
    let mut g = EnsembleGrid {
        idx: std::array::from_fn(|_| Vec::with_capacity(m)),
        weight: std::array::from_fn(|_| Vec::with_capacity(m)),
        rel: std::array::from_fn(|_| Vec::with_capacity(m)),
        cell: (active_h as f64 / out_h as f64, active_w as f64 / out_w as f64),
    };
    for oy in 0..out_h {
        let qy = (oy as f64 + 0.5) * active_h as f64 / out_h as f64 - 0.5;
        let y0f = qy.floor();
        let fy = qy - y0f;
        let y0 = (y0f.max(0.0) as usize).min(feat_h - 1);
        let y1 = ((y0f + 1.0).max(0.0) as usize).min(feat_h - 1);
        for ox in 0..out_w {
            let qx = (ox as f64 + 0.5) * active_w as f64 / out_w as f64 - 0.5;
            let x0f = qx.floor();
            let fx = qx - x0f;
            let x0 = (x0f.max(0.0) as usize).min(feat_w - 1);
            let x1 = ((x0f + 1.0).max(0.0) as usize).min(feat_w - 1);
            let corners = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)];
            let weights = [
                (1.0 - fy) * (1.0 - fx),
                (1.0 - fy) * fx,
                fy * (1.0 - fx),
                fy * fx,
            ];
            for k in 0..4 {
                let (cy, cx) = corners[k];
                g.idx[k].push(cy * feat_w + cx);
                g.weight[k].push(weights[k]);
                g.rel[k].push((qx - cx as f64, qy - cy as f64));
            }
        }
    }
    g
}

impl BoundModel {
    /// Stack of residual conv layers plus two stride-2 convs: one frame
    /// [3,H,W] (H, W multiples of 4) to its three-level pyramid.
    pub fn input_projection<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        frame: Value,
    ) -> Result<FeaturePyramid> {
        let shape = tape.value(frame).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::dim(format!("input_projection: frame {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::contract(format!(
                "input_projection: {h}x{w} not multiples of 4; pad first"
            )));
        }
        let slope = S::from_f64(0.1);
        let mut x = self.proj_in.apply(tape, frame)?;
        x = tape.leaky_relu(x, slope);
        for (ca, cb) in &self.proj_res {
            let mut y = ca.apply(tape, x)?;
            y = tape.leaky_relu(y, slope);
            y = cb.apply(tape, y)?;
            x = tape.add(x, y)?;
        }
        let l0 = x;
        let mut l1 = self.proj_down[0].apply(tape, l0)?;
        l1 = tape.leaky_relu(l1, slope);
        let mut l2 = self.proj_down[1].apply(tape, l1)?;
        l2 = tape.leaky_relu(l2, slope);
        Ok(FeaturePyramid {
            levels: [l0, l1, l2],
            dims: [(h, w), (h / 2, w / 2), (h / 4, w / 4)],
        })
    }

    /// One explicit+implicit MEMC iteration at a single pyramid level.
    ///
    /// Warps each frame's features by the current flow estimate, runs texture
    /// and motion aggregation in both directions on the warped token grids,
    /// updates the flows residually, and advances one intermediate-feature
    /// state per requested time by blending the directional textures.
    #[allow(clippy::too_many_arguments)]
    pub fn coarse_to_fine_step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        level: usize,
        iter: usize,
        f0_img: Value,
        f1_img: Value,
        flow01: Value,
        flow10: Value,
        states: &mut [Option<Value>],
        times: &[f64],
        h: usize,
        w: usize,
    ) -> Result<(Value, Value)> {
        let attn = &self.attn[level][iter];
        let fuse = &self.state_fuse[level][iter];

        // explicit MEMC: align each frame to the other's grid
        let f1_warped = tape.bilinear_warp(f1_img, flow01)?;
        let f0_warped = tape.bilinear_warp(f0_img, flow10)?;
        let t_f0 = tape.im_to_tokens(f0_img)?;
        let t_f1 = tape.im_to_tokens(f1_img)?;
        let t_f1w = tape.im_to_tokens(f1_warped)?;
        let t_f0w = tape.im_to_tokens(f0_warped)?;

        // implicit MEMC, direction 0 -> 1
        let (q0, k01, v01) = attn.project_qkv(tape, t_f0, t_f1w)?;
        let te01 = attn.texture_from_projection(tape, t_f0, q0, k01, v01)?;
        let dmo01 = attn.motion_aggregate(tape, q0, k01, h, w)?;
        // direction 1 -> 0
        let (q1, k10, v10) = attn.project_qkv(tape, t_f1, t_f0w)?;
        let te10 = attn.texture_from_projection(tape, t_f1, q1, k10, v10)?;
        let dmo10 = attn.motion_aggregate(tape, q1, k10, h, w)?;

        // residual flow update
        let d01 = tape.tokens_to_im(dmo01, h, w)?;
        let d10 = tape.tokens_to_im(dmo10, h, w)?;
        let flow01 = tape.add(flow01, d01)?;
        let flow10 = tape.add(flow10, d10)?;

        // per-time state update: blend of directional textures plus a
        // pointwise linear carry of the previous state
        for (si, &t) in times.iter().enumerate() {
            let a = tape.scale(te01, S::from_f64(1.0 - t));
            let b = tape.scale(te10, S::from_f64(t));
            let blend = tape.add(a, b)?;
            states[si] = Some(match states[si] {
                Some(prev) => {
                    let carried = fuse.apply(tape, prev)?;
                    tape.add(blend, carried)?
                }
                None => blend,
            });
        }
        Ok((flow01, flow10))
    }

    /// Coarse-to-fine kernel integration over one frame pair. Returns the
    /// level-0 intermediate features (one per requested time, token layout)
    /// and the full flow set per level.
    pub fn kernel_integration<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p0: &FeaturePyramid,
        p1: &FeaturePyramid,
        times: &[f64],
    ) -> Result<(Vec<Value>, PairFlows)> {
        for &t in times {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::contract(format!("kernel_integration: t={t} outside [0,1]")));
            }
        }
        // States blend directional textures, so at least one time must drive
        // them; flows themselves are time-independent.
        let drive_times: Vec<f64> = if times.is_empty() { vec![0.5] } else { times.to_vec() };
        let mut states: Vec<Option<Value>> = vec![None; drive_times.len()];
        let mut prev_flows: Option<(Value, Value)> = None;
        let mut flows_per_level: Vec<Option<FlowLevel>> = (0..PYRAMID_LEVELS).map(|_| None).collect();

        for level in (0..PYRAMID_LEVELS).rev() {
            let (h, w) = p0.dims[level];
            let (mut flow01, mut flow10) = match prev_flows {
                None => (
                    tape.constant(Tensor::zeros(&[2, h, w])),
                    tape.constant(Tensor::zeros(&[2, h, w])),
                ),
                Some((f01, f10)) => {
                    // upsample flows (values doubled) and carry states across levels
                    let up01 = tape.bilinear_resize(f01, h, w)?;
                    let f01 = tape.scale(up01, S::from_f64(2.0));
                    let up10 = tape.bilinear_resize(f10, h, w)?;
                    let f10 = tape.scale(up10, S::from_f64(2.0));
                    (f01, f10)
                }
            };
            if level < PYRAMID_LEVELS - 1 {
                let (ch, cw) = p0.dims[level + 1];
                for s in states.iter_mut() {
                    if let Some(prev) = *s {
                        let img = tape.tokens_to_im(prev, ch, cw)?;
                        let up = tape.bilinear_resize(img, h, w)?;
                        let tok = tape.im_to_tokens(up)?;
                        *s = Some(self.guide_adapt[level].apply(tape, tok)?);
                    }
                }
            }
            for iter in 0..self.config.iter_layers {
                let (f01, f10) = self.coarse_to_fine_step(
                    tape,
                    level,
                    iter,
                    p0.levels[level],
                    p1.levels[level],
                    flow01,
                    flow10,
                    &mut states,
                    &drive_times,
                    h,
                    w,
                )?;
                flow01 = f01;
                flow10 = f10;
            }
            // intermediate-time flows by the linear-motion rule; recorded for
            // the first requested time (one flow set per pair)
            let t = drive_times[0];
            let flow_t0 = tape.scale(flow10, S::from_f64(t));
            let flow_t1 = tape.scale(flow01, S::from_f64(1.0 - t));
            flows_per_level[level] = Some(FlowLevel { flow01, flow10, flow_t0, flow_t1, h, w });
            prev_flows = Some((flow01, flow10));
        }
        let fts: Vec<Value> = if times.is_empty() {
            Vec::new()
        } else {
            states.into_iter().map(|s| s.expect("driven state")).collect()
        };
        Ok((
            fts,
            PairFlows { levels: flows_per_level.into_iter().map(|f| f.expect("level")).collect() },
        ))
    }

    /// Backward then forward recurrent sweeps with warped hidden states, then
    /// a swap-symmetric fusion into one representation per frame.
    ///
    /// `flow_fwd[i]` carries frame i's features onto frame i+1's grid
    /// (flow_{i+1 -> i}); `flow_bwd[i]` carries frame i+1's onto frame i's
    /// (flow_{i -> i+1}).
    pub fn propagate_bidirectional<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        feats: &[Value],
        flow_fwd: &[Value],
        flow_bwd: &[Value],
    ) -> Result<Vec<Value>> {
        let n = feats.len();
        if n < 2 {
            return Err(Error::contract(format!("propagate_bidirectional: {n} < 2 frames")));
        }
        if flow_fwd.len() != n - 1 || flow_bwd.len() != n - 1 {
            return Err(Error::dim("propagate_bidirectional: need N-1 flows per direction"));
        }
        let slope = S::from_f64(0.1);
        let shape = tape.value(feats[0]).shape().to_vec();

        let mut h_b: Vec<Option<Value>> = vec![None; n];
        for i in (0..n).rev() {
            let incoming = if i == n - 1 {
                tape.constant(Tensor::zeros(&shape))
            } else {
                tape.bilinear_warp(h_b[i + 1].unwrap(), flow_bwd[i])?
            };
            let cat = tape.concat_channels(&[feats[i], incoming])?;
            let fused = self.prop_fuse.apply(tape, cat)?;
            h_b[i] = Some(tape.leaky_relu(fused, slope));
        }
        let mut h_f: Vec<Option<Value>> = vec![None; n];
        for i in 0..n {
            let incoming = if i == 0 {
                tape.constant(Tensor::zeros(&shape))
            } else {
                tape.bilinear_warp(h_f[i - 1].unwrap(), flow_fwd[i - 1])?
            };
            let cat = tape.concat_channels(&[feats[i], incoming])?;
            let fused = self.prop_fuse.apply(tape, cat)?;
            h_f[i] = Some(tape.leaky_relu(fused, slope));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let rx = self.fuse_x.apply(tape, feats[i])?;
            let rb = self.fuse_h.apply(tape, h_b[i].unwrap())?;
            let rf = self.fuse_h.apply(tape, h_f[i].unwrap())?;
            let s = tape.add(rb, rf)?;
            let s = tape.add(rx, s)?;
            out.push(tape.leaky_relu(s, slope));
        }
        Ok(out)
    }

    /// Continuous decode of one fused representation to [3,out_h,out_w].
    /// Each output pixel blends coordinate-MLP predictions from its four
    /// nearest feature centers with bilinear weights; queries span only the
    /// `active` (unpadded) region of the feature map.
    #[allow(clippy::too_many_arguments)]
    pub fn spatial_modulate<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        r_img: Value,
        active_h: usize,
        active_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Value> {
        let shape = tape.value(r_img).shape().to_vec();
        let (feat_h, feat_w) = (shape[1], shape[2]);
        if out_h < active_h || out_w < active_w {
            return Err(Error::contract(format!(
                "spatial_modulate: downscaling {active_h}x{active_w} -> {out_h}x{out_w}"
            )));
        }
        let tokens = tape.im_to_tokens(r_img)?;
        let grid = ensemble_grid(feat_h, feat_w, active_h, active_w, out_h, out_w);
        let m = out_h * out_w;
        let mut acc: Option<Value> = None;
        for k in 0..4 {
            let feats = tape.gather_rows(tokens, grid.idx[k].clone())?;
            let coords = tape.constant(Tensor::from_fn(&[m, 4], |flat| {
                let (row, col) = (flat / 4, flat % 4);
                let (dx, dy) = grid.rel[k][row];
                S::from_f64(match col {
                    0 => dx,
                    1 => dy,
                    2 => grid.cell.0,
                    _ => grid.cell.1,
                })
            }));
            let inp = tape.concat_cols(&[feats, coords])?;
            let pred = self.decoder.apply(tape, inp)?;
            let wv = tape.constant(Tensor::from_fn(&[m], |i| S::from_f64(grid.weight[k][i])));
            let weighted = tape.scale_rows(pred, wv)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted)?,
                None => weighted,
            });
        }
        tape.tokens_to_im(acc.expect("four corners"), out_h, out_w)
    }

    /// Full pipeline over a clip: projection, per-pair kernel integration,
    /// bidirectional propagation over existing + interpolated frames, and
    /// continuous decoding of every output frame.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        lr_frames: &[Tensor<S>],
        times: &[f64],
        scale: f64,
    ) -> Result<ForwardOutput> {
        if lr_frames.len() < 2 {
            return Err(Error::contract("forward: need at least 2 input frames"));
        }
        if !(1.0..=8.0).contains(&scale) {
            return Err(Error::contract(format!("forward: scale {scale} outside [1,8]")));
        }
        let mut times = times.to_vec();
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        times.dedup();
        for &t in &times {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::contract(format!("forward: time {t} outside [0,1]")));
            }
        }
        let shape = lr_frames[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::dim(format!("forward: frame shape {shape:?}")));
        }
        if lr_frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::dim("forward: frames differ in shape"));
        }
        let (in_h, in_w) = (shape[1], shape[2]);
        let out_h = (scale * in_h as f64).floor() as usize;
        let out_w = (scale * in_w as f64).floor() as usize;

        let pyramids: Vec<FeaturePyramid> = lr_frames
            .iter()
            .map(|f| {
                let padded = pad_to_multiple(f, 4);
                let leaf = tape.constant(padded);
                self.input_projection(tape, leaf)
            })
            .collect::<Result<_>>()?;

        // timeline entries: (features, pair index, time within pair)
        let mut seq: Vec<(Value, usize, f64, FrameKind)> = Vec::new();
        let mut pair_flows = Vec::new();
        for pair in 0..pyramids.len() - 1 {
            seq.push((
                pyramids[pair].levels[0],
                pair,
                0.0,
                FrameKind::Existing(pair),
            ));
            let (fts, flows) =
                self.kernel_integration(tape, &pyramids[pair], &pyramids[pair + 1], &times)?;
            let (h0, w0) = pyramids[pair].dims[0];
            for (ft, &t) in fts.iter().zip(&times) {
                let img = tape.tokens_to_im(*ft, h0, w0)?;
                seq.push((img, pair, t, FrameKind::Interpolated { pair, t }));
            }
            pair_flows.push(flows);
        }
        let last = pyramids.len() - 1;
        seq.push((
            pyramids[last].levels[0],
            last - 1,
            1.0,
            FrameKind::Existing(last),
        ));

        // adjacent-pair propagation flows from the linear-motion rule:
        // flow_{a->b} = (tb-ta)·flow01 going forward in time, (ta-tb)·flow10
        // coming back
        let mut flow_fwd = Vec::new();
        let mut flow_bwd = Vec::new();
        for win in seq.windows(2) {
            let (_, pa, ta, _) = win[0];
            let (_, _pb, tb, _) = win[1];
            let lvl = &pair_flows[pa].levels[0];
            let span = tb - ta;
            // forward sweep at frame b pulls from a: flow_{tb -> ta} = span·flow10
            flow_fwd.push(tape.scale(lvl.flow10, S::from_f64(span)));
            // backward sweep at frame a pulls from b: flow_{ta -> tb} = span·flow01
            flow_bwd.push(tape.scale(lvl.flow01, S::from_f64(span)));
        }
        let feats: Vec<Value> = seq.iter().map(|&(f, ..)| f).collect();
        let fused = self.propagate_bidirectional(tape, &feats, &flow_fwd, &flow_bwd)?;

        let mut frames = Vec::with_capacity(fused.len());
        let mut kinds = Vec::with_capacity(fused.len());
        for (r, &(_, _, _, kind)) in fused.iter().zip(&seq) {
            frames.push(self.spatial_modulate(tape, *r, in_h, in_w, out_h, out_w)?);
            kinds.push(kind);
        }
        Ok(ForwardOutput { frames, kinds, pair_flows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, StnoModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> StnoModel<f32> {
        StnoModel::new(ModelConfig::tiny(), 7).unwrap()
    }

    /// Tiny config with distinct channels per level to exercise the adapters.
    fn mixed_model() -> StnoModel<f32> {
        let cfg = ModelConfig {
            channels: [4, 6, 8],
            residual_blocks: 1,
            iter_layers: 2,
            decoder_hidden: 8,
        };
        StnoModel::new(cfg, 9).unwrap()
    }

    fn rand_frame(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
        Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn projection_shapes_and_determinism() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = rand_frame(16, 24, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let (bound, _) = model.bind(&mut tape, false);
            let leaf = tape.constant(frame.clone());
            let p = bound.input_projection(&mut tape, leaf).unwrap();
            assert_eq!(p.dims, [(16, 24), (8, 12), (4, 6)]);
            for (j, &(h, w)) in p.dims.iter().enumerate() {
                assert_eq!(tape.value(p.levels[j]).shape(), &[model.config.channels[j], h, w]);
            }
            tape.value(p.levels[0]).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn projection_zero_input_zero_biases_gives_zero() {
        let model = tiny_model();
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let leaf = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let p = bound.input_projection(&mut tape, leaf).unwrap();
        for lvl in p.levels {
            assert!(tape.value(lvl).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_rejects_unpadded_input() {
        let model = tiny_model();
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let leaf = tape.constant(Tensor::zeros(&[3, 10, 8]));
        assert!(bound.input_projection(&mut tape, leaf).is_err());
    }

    #[test]
    fn pad_to_multiple_replicates_edges() {
        let t = Tensor::<f32>::from_fn(&[1, 3, 3], |i| i as f32);
        let p = pad_to_multiple(&t, 4);
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(p.at3(0, 3, 0), t.at3(0, 2, 0));
        assert_eq!(p.at3(0, 0, 3), t.at3(0, 0, 2));
        assert_eq!(p.at3(0, 3, 3), t.at3(0, 2, 2));
        // already aligned input is returned unchanged
        let q = Tensor::<f32>::zeros(&[1, 4, 8]);
        assert_eq!(pad_to_multiple(&q, 4).shape(), &[1, 4, 8]);
    }

    #[test]
    fn kernel_integration_flows_exactly_zero_at_init() {
        for model in [tiny_model(), mixed_model()] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut tape = Tape::new();
            let (bound, _) = model.bind(&mut tape, false);
            let fa = tape.constant(rand_frame(16, 16, &mut rng));
            let fb = tape.constant(rand_frame(16, 16, &mut rng));
            let pa = bound.input_projection(&mut tape, fa).unwrap();
            let pb = bound.input_projection(&mut tape, fb).unwrap();
            let (fts, flows) = bound.kernel_integration(&mut tape, &pa, &pb, &[0.5]).unwrap();
            assert_eq!(fts.len(), 1);
            for (j, lvl) in flows.levels.iter().enumerate() {
                let (h, w) = (16 >> j, 16 >> j);
                for v in [lvl.flow01, lvl.flow10, lvl.flow_t0, lvl.flow_t1] {
                    assert_eq!(tape.value(v).shape(), &[2, h, w], "level {j}");
                    assert!(
                        tape.value(v).data().iter().all(|&x| x == 0.0),
                        "level {j} flow not zero at init"
                    );
                }
            }
        }
    }

    #[test]
    fn coarse_to_fine_degenerate_pair_matches_texture_path() {
        // F0 = F1, zero prior flows, t = 0.5: the flow update is exactly zero
        // and the state equals the texture aggregation of the shared frame.
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let c = model.config.channels[2];
        let (h, w) = (4, 4);
        let img = tape.constant(Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0f32..1.0)));
        let zero = tape.constant(Tensor::zeros(&[2, h, w]));
        let mut states = vec![None];
        let (f01, f10) = bound
            .coarse_to_fine_step(&mut tape, 2, 0, img, img, zero, zero, &mut states, &[0.5], h, w)
            .unwrap();
        assert!(tape.value(f01).data().iter().all(|&x| x == 0.0));
        assert!(tape.value(f10).data().iter().all(|&x| x == 0.0));
        let tok = tape.im_to_tokens(img).unwrap();
        let te = bound.attn[2][0].texture_aggregate(&mut tape, tok, tok).unwrap();
        let st = states[0].unwrap();
        for (a, b) in tape.value(st).data().iter().zip(tape.value(te).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flow_t0_is_zero_when_t_is_zero() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let fa = tape.constant(rand_frame(8, 8, &mut rng));
        let fb = tape.constant(rand_frame(8, 8, &mut rng));
        let pa = bound.input_projection(&mut tape, fa).unwrap();
        let pb = bound.input_projection(&mut tape, fb).unwrap();
        let (_, flows) = bound.kernel_integration(&mut tape, &pa, &pb, &[0.0]).unwrap();
        for lvl in &flows.levels {
            assert!(tape.value(lvl.flow_t0).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn propagation_time_reversal_symmetry() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = model.config.channels[0];
        let (h, w) = (6, 6);
        let n = 4;
        let feats_t: Vec<Tensor<f32>> =
            (0..n).map(|_| Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0f32..1.0))).collect();
        let flows_f: Vec<Tensor<f32>> = (0..n - 1)
            .map(|_| Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-0.8f32..0.8)))
            .collect();
        let flows_b: Vec<Tensor<f32>> = (0..n - 1)
            .map(|_| Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-0.8f32..0.8)))
            .collect();

        let run = |feats: &[Tensor<f32>], ff: &[Tensor<f32>], fb: &[Tensor<f32>]| {
            let mut tape = Tape::new();
            let (bound, _) = model.bind(&mut tape, false);
            let fv: Vec<Value> = feats.iter().map(|t| tape.constant(t.clone())).collect();
            let ffv: Vec<Value> = ff.iter().map(|t| tape.constant(t.clone())).collect();
            let fbv: Vec<Value> = fb.iter().map(|t| tape.constant(t.clone())).collect();
            let rs = bound.propagate_bidirectional(&mut tape, &fv, &ffv, &fbv).unwrap();
            rs.into_iter().map(|r| tape.value(r).clone()).collect::<Vec<_>>()
        };

        let fwd = run(&feats_t, &flows_f, &flows_b);
        assert_eq!(fwd.len(), n);

        let rev_feats: Vec<_> = feats_t.iter().rev().cloned().collect();
        let rev_ff: Vec<_> = flows_b.iter().rev().cloned().collect();
        let rev_fb: Vec<_> = flows_f.iter().rev().cloned().collect();
        let rev = run(&rev_feats, &rev_ff, &rev_fb);
        for i in 0..n {
            for (a, b) in fwd[i].data().iter().zip(rev[n - 1 - i].data()) {
                assert!((a - b).abs() < 1e-5, "frame {i}");
            }
        }
    }

    #[test]
    fn propagation_rejects_single_frame() {
        let model = tiny_model();
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let f = tape.constant(Tensor::zeros(&[4, 4, 4]));
        assert!(bound.propagate_bidirectional(&mut tape, &[f], &[], &[]).is_err());
    }

    #[test]
    fn fusion_with_zero_hidden_is_frame_local() {
        // With both hidden states zeroed the fused representation depends on
        // x_i alone.
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = model.config.channels[0];
        let x = Tensor::from_fn(&[c, 5, 5], |_| rng.gen_range(-1.0f32..1.0));
        let fuse = |x: &Tensor<f32>| {
            let mut tape = Tape::new();
            let (bound, _) = model.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let zero = tape.constant(Tensor::zeros(&[c, 5, 5]));
            let rx = bound.fuse_x.apply(&mut tape, xv).unwrap();
            let rb = bound.fuse_h.apply(&mut tape, zero).unwrap();
            let rf = bound.fuse_h.apply(&mut tape, zero).unwrap();
            let s = tape.add(rb, rf).unwrap();
            let s = tape.add(rx, s).unwrap();
            let r = tape.leaky_relu(s, 0.1);
            tape.value(r).clone()
        };
        assert_eq!(fuse(&x).data(), fuse(&x).data());
    }

    #[test]
    fn ensemble_weights_partition_of_unity() {
        let g = ensemble_grid(8, 10, 8, 10, 19, 23);
        let m = 19 * 23;
        for p in 0..m {
            let sum: f64 = (0..4).map(|k| g.weight[k][p]).sum();
            assert!((sum - 1.0).abs() < 1e-9, "pixel {p}: {sum}");
            assert!((0..4).all(|k| g.weight[k][p] >= 0.0));
        }
    }

    #[test]
    fn ensemble_identity_queries_hit_feature_centers() {
        // out == in: every query lands exactly on a feature center.
        let g = ensemble_grid(6, 6, 6, 6, 6, 6);
        for p in 0..36 {
            assert!((g.weight[0][p] - 1.0).abs() < 1e-12);
            assert_eq!(g.idx[0][p], p);
            for k in 1..4 {
                assert!(g.weight[k][p].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_modulate_shapes_and_contract() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = model.config.channels[0];
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let r = tape.constant(Tensor::from_fn(&[c, 5, 7], |_| rng.gen_range(-1.0f32..1.0)));
        let out = bound.spatial_modulate(&mut tape, r, 5, 7, 20, 28).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 20, 28]);
        assert!(tape.value(out).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(bound.spatial_modulate(&mut tape, r, 5, 7, 4, 7).is_err());
    }

    #[test]
    fn forward_shape_contracts() {
        let model = mixed_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = vec![rand_frame(16, 16, &mut rng), rand_frame(16, 16, &mut rng)];

        // space-time: 2 inputs, one midpoint, x4
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let out = bound.forward(&mut tape, &frames, &[0.5], 4.0).unwrap();
        assert_eq!(out.frames.len(), 3);
        assert_eq!(out.kinds[0], FrameKind::Existing(0));
        assert_eq!(out.kinds[1], FrameKind::Interpolated { pair: 0, t: 0.5 });
        assert_eq!(out.kinds[2], FrameKind::Existing(1));
        for f in &out.frames {
            assert_eq!(tape.value(*f).shape(), &[3, 64, 64]);
        }
        assert_eq!(out.pair_flows.len(), 1);

        // pure VSR path
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let out = bound.forward(&mut tape, &frames, &[], 2.0).unwrap();
        assert_eq!(out.frames.len(), 2);

        // identity-scale decode
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let out = bound.forward(&mut tape, &frames, &[], 1.0).unwrap();
        assert_eq!(tape.value(out.frames[0]).shape(), &[3, 16, 16]);
    }

    #[test]
    fn forward_pads_odd_sizes_and_handles_fractional_scale() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames = vec![rand_frame(10, 14, &mut rng), rand_frame(10, 14, &mut rng)];
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        let out = bound.forward(&mut tape, &frames, &[0.5], 2.5).unwrap();
        assert_eq!(tape.value(out.frames[1]).shape(), &[3, 25, 35]);
    }

    #[test]
    fn forward_validates_inputs() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = rand_frame(8, 8, &mut rng);
        let mut tape = Tape::new();
        let (bound, _) = model.bind(&mut tape, false);
        assert!(bound.forward(&mut tape, &[f.clone()], &[], 2.0).is_err());
        assert!(bound.forward(&mut tape, &[f.clone(), f.clone()], &[], 9.0).is_err());
        assert!(bound.forward(&mut tape, &[f.clone(), f.clone()], &[1.5], 2.0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let frames = vec![rand_frame(8, 8, &mut rng), rand_frame(8, 8, &mut rng)];
        let run = || {
            let mut tape = Tape::new();
            let (bound, _) = model.bind(&mut tape, false);
            let out = bound.forward(&mut tape, &frames, &[0.5], 2.0).unwrap();
            tape.value(out.frames[1]).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
