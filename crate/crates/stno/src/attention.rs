//! Galerkin-type attention and the coupled texture/motion aggregation heads.
//!
//! The production path is the fused tape op ([`Tape::galerkin_attend`]) with
//! cost O(n·C²); [`kernel_integral_oracle`] is the brute-force double sum kept
//! deliberately factorization-free for equivalence testing, and
//! [`softmax_attend`] is the quadratic baseline used only by the benchmark.

use crate::error::{Error, Result};
use crate::nn::{Binder, BoundMlp, MlpParams};
use crate::tensor::{LnParams, Scalar, Tape, Tensor, Value};
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Learned parameters of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionParams<S: Scalar> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub ln_k_gamma: Tensor<S>,
    pub ln_k_beta: Tensor<S>,
    pub ln_v_gamma: Tensor<S>,
    pub ln_v_beta: Tensor<S>,
    /// C -> 2C -> C head combining the residual and the attention output.
    pub texture_mlp: MlpParams<S>,
    /// 2 -> C -> C embedding of normalized coordinates.
    pub coord_mlp: MlpParams<S>,
    /// C -> 2C -> 2 displacement head; final layer zero-initialized so the
    /// predicted flow starts exactly at zero.
    pub motion_mlp: MlpParams<S>,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn new(c: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / c as f64).sqrt();
        AttentionParams {
            w_q: Tensor::rand_uniform(&[c, c], bound, rng),
            w_k: Tensor::rand_uniform(&[c, c], bound, rng),
            w_v: Tensor::rand_uniform(&[c, c], bound, rng),
            ln_k_gamma: Tensor::full(&[c], S::one()),
            ln_k_beta: Tensor::zeros(&[c]),
            ln_v_gamma: Tensor::full(&[c], S::one()),
            ln_v_beta: Tensor::zeros(&[c]),
            texture_mlp: MlpParams::new(c, 2 * c, c, rng),
            coord_mlp: MlpParams::new(2, c, c, rng),
            motion_mlp: MlpParams::new(c, 2 * c, 2, rng).zero_final(),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&format!("{prefix}.w_q"), &self.w_q);
        f(&format!("{prefix}.w_k"), &self.w_k);
        f(&format!("{prefix}.w_v"), &self.w_v);
        f(&format!("{prefix}.ln_k_gamma"), &self.ln_k_gamma);
        f(&format!("{prefix}.ln_k_beta"), &self.ln_k_beta);
        f(&format!("{prefix}.ln_v_gamma"), &self.ln_v_gamma);
        f(&format!("{prefix}.ln_v_beta"), &self.ln_v_beta);
        self.texture_mlp.visit(&format!("{prefix}.texture_mlp"), f);
        self.coord_mlp.visit(&format!("{prefix}.coord_mlp"), f);
        self.motion_mlp.visit(&format!("{prefix}.motion_mlp"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{prefix}.w_q"), &mut self.w_q);
        f(&format!("{prefix}.w_k"), &mut self.w_k);
        f(&format!("{prefix}.w_v"), &mut self.w_v);
        f(&format!("{prefix}.ln_k_gamma"), &mut self.ln_k_gamma);
        f(&format!("{prefix}.ln_k_beta"), &mut self.ln_k_beta);
        f(&format!("{prefix}.ln_v_gamma"), &mut self.ln_v_gamma);
        f(&format!("{prefix}.ln_v_beta"), &mut self.ln_v_beta);
        self.texture_mlp.visit_mut(&format!("{prefix}.texture_mlp"), f);
        self.coord_mlp.visit_mut(&format!("{prefix}.coord_mlp"), f);
        self.motion_mlp.visit_mut(&format!("{prefix}.motion_mlp"), f);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundAttention {
        BoundAttention {
            w_q: b.leaf(&self.w_q),
            w_k: b.leaf(&self.w_k),
            w_v: b.leaf(&self.w_v),
            ln_k: (b.leaf(&self.ln_k_gamma), b.leaf(&self.ln_k_beta)),
            ln_v: (b.leaf(&self.ln_v_gamma), b.leaf(&self.ln_v_beta)),
            texture_mlp: self.texture_mlp.bind(b),
            coord_mlp: self.coord_mlp.bind(b),
            motion_mlp: self.motion_mlp.bind(b),
        }
    }
}

/// Attention parameters bound to a tape for one forward pass.
#[derive(Clone, Copy)]
pub struct BoundAttention {
    pub w_q: Value,
    pub w_k: Value,
    pub w_v: Value,
    pub ln_k: (Value, Value),
    pub ln_v: (Value, Value),
    pub texture_mlp: BoundMlp,
    pub coord_mlp: BoundMlp,
    pub motion_mlp: BoundMlp,
}

impl BoundAttention {
    /// Q = F0·W_Q, K = F1·W_K, V = F1·W_V.
    pub fn project_qkv<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        f0: Value,
        f1: Value,
    ) -> Result<(Value, Value, Value)> {
        let q = tape.matmul(f0, self.w_q)?;
        let k = tape.matmul(f1, self.w_k)?;
        let v = tape.matmul(f1, self.w_v)?;
        Ok((q, k, v))
    }

    /// Te = MLP(F0 + Q0·(LN(K1)ᵀ·LN(V1))/n) on token grids [n,C].
    pub fn texture_aggregate<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        f0: Value,
        f1: Value,
    ) -> Result<Value> {
        let (q, k, v) = self.project_qkv(tape, f0, f1)?;
        self.texture_from_projection(tape, f0, q, k, v)
    }

    pub fn texture_from_projection<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        f0: Value,
        q: Value,
        k: Value,
        v: Value,
    ) -> Result<Value> {
        let z = tape.galerkin_attend(q, k, v, Some(self.ln_k), Some(self.ln_v), S::from_f64(LN_EPS))?;
        let res = tape.add(f0, z)?;
        self.texture_mlp.apply(tape, res)
    }

    /// Mo = MLP(Q0·(LN(K1)ᵀ·V_emb)/n − V_emb), scaled from normalized units to
    /// pixels. Returns a [n,2] token grid of displacements.
    pub fn motion_aggregate<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        q: Value,
        k: Value,
        h: usize,
        w: usize,
    ) -> Result<Value> {
        let n = tape.value(q).shape()[0];
        if n != h * w {
            return Err(Error::dim(format!("motion_aggregate: {n} tokens vs {h}x{w}")));
        }
        let pos = tape.constant(positional_grid(h, w));
        let vemb = self.coord_mlp.apply(tape, pos)?;
        let z = tape.galerkin_attend(q, k, vemb, Some(self.ln_k), None, S::from_f64(LN_EPS))?;
        let rel = tape.sub(z, vemb)?;
        let mo = self.motion_mlp.apply(tape, rel)?;
        // normalized units -> pixels: dx·W/2, dy·H/2
        let px = tape.constant(Tensor::from_fn(&[n, 2], |i| {
            if i % 2 == 0 {
                S::from_f64(w as f64 / 2.0)
            } else {
                S::from_f64(h as f64 / 2.0)
            }
        }));
        tape.mul(mo, px)
    }
}

/// Per-pixel centers normalized to [-1,1]: x = (2i+1)/W − 1, y = (2j+1)/H − 1,
/// flattened row-major (y outer) into [n,2] with x in column 0.
pub fn positional_grid<S: Scalar>(h: usize, w: usize) -> Tensor<S> {
    Tensor::from_fn(&[h * w, 2], |i| {
        let token = i / 2;
        let (y, x) = (token / w, token % w);
        if i % 2 == 0 {
            S::from_f64((2 * x + 1) as f64 / w as f64 - 1.0)
        } else {
            S::from_f64((2 * y + 1) as f64 / h as f64 - 1.0)
        }
    })
}

/// Optional affine layer-norm parameters for the oracle and heatmap helpers.
pub type LnRef<'a, S> = Option<(&'a Tensor<S>, &'a Tensor<S>)>;

fn oracle_norm<S: Scalar>(x: &Tensor<S>, ln: LnRef<S>, eps: S) -> Vec<S> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    match ln {
        None => d.to_vec(),
        Some((gamma, beta)) => {
            let mut out = vec![S::zero(); n * c];
            let cn = S::from_f64(c as f64);
            for i in 0..n {
                let row = &d[i * c..(i + 1) * c];
                let mut mu = S::zero();
                for &v in row {
                    mu += v;
                }
                mu /= cn;
                let mut var = S::zero();
                for &v in row {
                    var += (v - mu) * (v - mu);
                }
                var /= cn;
                let inv = (var + eps).sqrt().recip();
                for j in 0..c {
                    out[i * c + j] = (row[j] - mu) * inv * gamma.data()[j] + beta.data()[j];
                }
            }
            out
        }
    }
}

/// Direct double-sum kernel integral: for every position x and output channel
/// j, sum over basis index l of (Σ_ξ v̂_j(ξ)·k̂_l(ξ)/n)·q_l(x). No C×C
/// factorization; small n only.
pub fn kernel_integral_oracle<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    ln_k: LnRef<S>,
    ln_v: LnRef<S>,
    eps: S,
) -> Tensor<S> {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    assert_eq!(k.shape(), q.shape());
    assert_eq!(v.shape(), q.shape());
    let kn = oracle_norm(k, ln_k, eps);
    let vn = oracle_norm(v, ln_v, eps);
    let qd = q.data();
    let nn = S::from_f64(n as f64);
    Tensor::from_fn(&[n, c], |flat| {
        let (i, j) = (flat / c, flat % c);
        let mut acc = S::zero();
        for l in 0..c {
            let mut inner = S::zero();
            for xi in 0..n {
                inner += vn[xi * c + j] * kn[xi * c + l];
            }
            acc += inner / nn * qd[i * c + l];
        }
        acc
    })
}

/// Quadratic-baseline attention: softmax(Q·Kᵀ/√C)·V, materializing the full
/// n×n score matrix. Benchmark and reference use only.
pub fn softmax_attend<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Tensor<S> {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    assert_eq!(k.shape(), q.shape());
    assert_eq!(v.shape(), q.shape());
    let mut scores = vec![S::zero(); n * n];
    let scale = S::from_f64(1.0 / (c as f64).sqrt());
    // scores = Q·Kᵀ/√C
    crate::tensor::raw_gemm_acc(q.data(), false, k.data(), true, &mut scores, n, c, n, scale, S::zero());
    for row in scores.chunks_mut(n) {
        let mut mx = row[0];
        for &s in row.iter() {
            if s > mx {
                mx = s;
            }
        }
        let mut sum = S::zero();
        for s in row.iter_mut() {
            *s = (*s - mx).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
    let mut out = vec![S::zero(); n * c];
    crate::tensor::raw_matmul(&scores, v.data(), &mut out, n, n, c);
    Tensor::new(vec![n, c], out).expect("n*c elements")
}

/// Per-position L2 norm of z, min-max scaled to 0..=255. A constant field
/// (degenerate min-max) maps to all zeros.
pub fn attention_heatmap<S: Scalar>(z: &Tensor<S>, h: usize, w: usize) -> Vec<u8> {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    assert_eq!(n, h * w);
    let mut norms = vec![0.0f64; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..c {
            let v = z.data()[i * c + j].to_f64_();
            s += v * v;
        }
        norms[i] = s.sqrt();
    }
    let mn = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(mx > mn) {
        return vec![0u8; n];
    }
    norms
        .iter()
        .map(|&v| (((v - mn) / (mx - mn)) * 255.0).round() as u8)
        .collect()
}

/// Forward-only Galerkin attention on plain tensors (no tape), as benched and
/// as used to build heatmaps; identical math to the tape op.
pub fn galerkin_attend_fn<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    ln_k: LnRef<S>,
    ln_v: LnRef<S>,
    eps: S,
) -> Tensor<S> {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let lnk = ln_k.map(|(g, b)| LnParams { gamma: g.data(), beta: b.data(), eps });
    let lnv = ln_v.map(|(g, b)| LnParams { gamma: g.data(), beta: b.data(), eps });
    let (z, _) = crate::tensor::raw_galerkin_forward(q.data(), k.data(), v.data(), n, c, lnk, lnv);
    Tensor::new(vec![n, c], z).expect("n*c elements")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn rel_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
        a.data()
            .iter()
            .zip(b.data())
            .all(|(&x, &y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
    }

    fn unit_ln(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
    }

    #[test]
    fn project_qkv_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let n = 6;
        let mut params = AttentionParams::<f64>::new(c, &mut rng);
        params.w_q = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let f0 = rand_t(&[n, c], &mut rng);
        let f1 = Tensor::zeros(&[n, c]);
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, false);
        let bound = params.bind(&mut b);
        let v0 = tape.leaf(f0.clone(), false);
        let v1 = tape.leaf(f1, false);
        let (q, k, v) = bound.project_qkv(&mut tape, v0, v1).unwrap();
        assert_eq!(tape.value(q).data(), f0.data());
        assert!(tape.value(k).data().iter().all(|&x| x == 0.0));
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn project_qkv_matches_independent_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, c) = (5, 3);
        let params = AttentionParams::<f64>::new(c, &mut rng);
        let f0 = rand_t(&[n, c], &mut rng);
        let f1 = rand_t(&[n, c], &mut rng);
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, false);
        let bound = params.bind(&mut b);
        let v0 = tape.leaf(f0.clone(), false);
        let v1 = tape.leaf(f1.clone(), false);
        let (q, _k, v) = bound.project_qkv(&mut tape, v0, v1).unwrap();
        // scalar-loop reference
        let reference = |f: &Tensor<f64>, w: &Tensor<f64>| {
            Tensor::<f64>::from_fn(&[n, c], |flat| {
                let (i, j) = (flat / c, flat % c);
                (0..c).map(|l| f.data()[i * c + l] * w.data()[l * c + j]).sum()
            })
        };
        assert!(rel_close(tape.value(q), &reference(&f0, &params.w_q), 1e-12));
        assert!(rel_close(tape.value(v), &reference(&f1, &params.w_v), 1e-12));
    }

    #[test]
    fn galerkin_zero_values_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, c) = (6, 4);
        let q = rand_t(&[n, c], &mut rng);
        let k = rand_t(&[n, c], &mut rng);
        let v = Tensor::zeros(&[n, c]);
        let (g, b) = unit_ln(c);
        let z = galerkin_attend_fn(&q, &k, &v, Some((&g, &b)), Some((&g, &b)), 1e-5);
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn galerkin_invariant_under_joint_kv_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, c) = (8, 4);
        let q = rand_t(&[n, c], &mut rng);
        let k = rand_t(&[n, c], &mut rng);
        let v = rand_t(&[n, c], &mut rng);
        let (g, b) = unit_ln(c);
        let z0 = galerkin_attend_fn(&q, &k, &v, Some((&g, &b)), Some((&g, &b)), 1e-5);
        let mut perm: Vec<usize> = (0..n).collect();
        // fixed shuffle
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permute = |t: &Tensor<f64>| {
            Tensor::<f64>::from_fn(&[n, c], |flat| {
                let (i, j) = (flat / c, flat % c);
                t.data()[perm[i] * c + j]
            })
        };
        let z1 = galerkin_attend_fn(&q, &permute(&k), &permute(&v), Some((&g, &b)), Some((&g, &b)), 1e-5);
        assert!(rel_close(&z0, &z1, 1e-10));
    }

    #[test]
    fn galerkin_matches_oracle_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, c) = (4, 3);
        let q = rand_t(&[n, c], &mut rng);
        let k = rand_t(&[n, c], &mut rng);
        let v = rand_t(&[n, c], &mut rng);
        let (g, b) = unit_ln(c);
        let z = galerkin_attend_fn(&q, &k, &v, Some((&g, &b)), Some((&g, &b)), 1e-5);
        let o = kernel_integral_oracle(&q, &k, &v, Some((&g, &b)), Some((&g, &b)), 1e-5);
        assert!(rel_close(&z, &o, 1e-6));
    }

    #[test]
    fn oracle_agrees_with_fused_on_random_instances() {
        // 20 random (n<=16, C<=8) instances at 1e-6
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = rng.gen_range(2..=16);
            let c = rng.gen_range(2..=8);
            let q = rand_t(&[n, c], &mut rng);
            let k = rand_t(&[n, c], &mut rng);
            let v = rand_t(&[n, c], &mut rng);
            let g = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5));
            let b = Tensor::from_fn(&[c], |_| rng.gen_range(-0.3..0.3));
            let z = galerkin_attend_fn(&q, &k, &v, Some((&g, &b)), Some((&g, &b)), 1e-5);
            let o = kernel_integral_oracle(&q, &k, &v, Some((&g, &b)), Some((&g, &b)), 1e-5);
            assert!(rel_close(&z, &o, 1e-6), "seed {seed} n={n} c={c}");
        }
    }

    #[test]
    fn oracle_single_channel_degenerates_to_zero() {
        // C=1 with gamma=1, beta=0: every row normalizes to 0.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 5;
        let q = rand_t(&[n, 1], &mut rng);
        let k = rand_t(&[n, 1], &mut rng);
        let v = rand_t(&[n, 1], &mut rng);
        let (g, b) = unit_ln(1);
        let o = kernel_integral_oracle(&q, &k, &v, Some((&g, &b)), Some((&g, &b)), 1e-5);
        assert!(o.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn galerkin_linear_in_v_without_ln() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, c) = (7, 5);
        let q = rand_t(&[n, c], &mut rng);
        let k = rand_t(&[n, c], &mut rng);
        let v1 = rand_t(&[n, c], &mut rng);
        let v2 = rand_t(&[n, c], &mut rng);
        let (a, b) = (0.7, -1.3);
        let vmix = Tensor::from_fn(&[n, c], |i| a * v1.data()[i] + b * v2.data()[i]);
        let z1 = galerkin_attend_fn(&q, &k, &v1, None, None, 1e-5);
        let z2 = galerkin_attend_fn(&q, &k, &v2, None, None, 1e-5);
        let zm = galerkin_attend_fn(&q, &k, &vmix, None, None, 1e-5);
        let zlin = Tensor::from_fn(&[n, c], |i| a * z1.data()[i] + b * z2.data()[i]);
        assert!(rel_close(&zm, &zlin, 1e-6));
    }

    #[test]
    fn galerkin_query_row_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (n, c) = (6, 4);
        let q = rand_t(&[n, c], &mut rng);
        let k = rand_t(&[n, c], &mut rng);
        let v = rand_t(&[n, c], &mut rng);
        let (g, b) = unit_ln(c);
        let z0 = galerkin_attend_fn(&q, &k, &v, Some((&g, &b)), Some((&g, &b)), 1e-5);
        let target = 3usize;
        let mut q2 = q.clone();
        for j in 0..c {
            q2.data_mut()[target * c + j] += 0.5;
        }
        let z1 = galerkin_attend_fn(&q2, &k, &v, Some((&g, &b)), Some((&g, &b)), 1e-5);
        for i in 0..n {
            let changed = (0..c).any(|j| z0.data()[i * c + j] != z1.data()[i * c + j]);
            assert_eq!(changed, i == target, "row {i}");
        }
    }

    #[test]
    fn softmax_uniform_when_keys_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (n, c) = (5, 3);
        let q = rand_t(&[n, c], &mut rng);
        let krow: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = Tensor::from_fn(&[n, c], |i| krow[i % c]);
        let v = rand_t(&[n, c], &mut rng);
        let z = softmax_attend(&q, &k, &v);
        for j in 0..c {
            let mean: f64 = (0..n).map(|i| v.data()[i * c + j]).sum::<f64>() / n as f64;
            for i in 0..n {
                assert!((z.data()[i * c + j] - mean).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_single_token_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = rand_t(&[1, 4], &mut rng);
        let k = rand_t(&[1, 4], &mut rng);
        let v = rand_t(&[1, 4], &mut rng);
        let z = softmax_attend(&q, &k, &v);
        assert!(rel_close(&z, &v, 1e-12));
    }

    #[test]
    fn softmax_matches_scalar_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, c) = (8, 4);
        let q = rand_t(&[n, c], &mut rng);
        let k = rand_t(&[n, c], &mut rng);
        let v = rand_t(&[n, c], &mut rng);
        let z = softmax_attend(&q, &k, &v);
        let scale = 1.0 / (c as f64).sqrt();
        let mut reference = Tensor::<f64>::zeros(&[n, c]);
        for i in 0..n {
            let mut row = vec![0.0f64; n];
            for jj in 0..n {
                let mut dot = 0.0;
                for l in 0..c {
                    dot += q.data()[i * c + l] * k.data()[jj * c + l];
                }
                row[jj] = dot * scale;
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut den = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                den += *r;
            }
            for jj in 0..n {
                for l in 0..c {
                    reference.data_mut()[i * c + l] += row[jj] / den * v.data()[jj * c + l];
                }
            }
        }
        assert!(rel_close(&z, &reference, 1e-6));
    }

    #[test]
    fn positional_grid_conventions() {
        let g1 = positional_grid::<f64>(1, 1);
        assert_eq!(g1.data(), &[0.0, 0.0]);
        let g2 = positional_grid::<f64>(1, 2);
        assert_eq!(g2.data()[0], -0.5);
        assert_eq!(g2.data()[2], 0.5);
        // antisymmetric under horizontal flip: x(i) = -x(W-1-i)
        let w = 5;
        let g = positional_grid::<f64>(3, w);
        for y in 0..3 {
            for x in 0..w {
                let a = g.data()[(y * w + x) * 2];
                let b = g.data()[(y * w + (w - 1 - x)) * 2];
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn texture_reduces_to_mlp_on_zero_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (n, c) = (6, 4);
        let mut params = AttentionParams::<f64>::new(c, &mut rng);
        params.w_v = Tensor::zeros(&[c, c]); // V = 0 and ln_v beta = 0 -> attention output 0
        let f0 = rand_t(&[n, c], &mut rng);
        let f1 = rand_t(&[n, c], &mut rng);
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, false);
        let bound = params.bind(&mut b);
        let v0 = tape.leaf(f0.clone(), false);
        let v1 = tape.leaf(f1, false);
        let te = bound.texture_aggregate(&mut tape, v0, v1).unwrap();
        assert_eq!(tape.value(te).shape(), &[n, c]);
        let direct = bound.texture_mlp.apply(&mut tape, v0).unwrap();
        assert!(rel_close(tape.value(te), tape.value(direct), 1e-12));
    }

    #[test]
    fn texture_constant_rows_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (n, c) = (8, 4);
        let params = AttentionParams::<f64>::new(c, &mut rng);
        let row: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::from_fn(&[n, c], |i| row[i % c]);
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, false);
        let bound = params.bind(&mut b);
        let v0 = tape.leaf(f.clone(), false);
        let v1 = tape.leaf(f, false);
        let te = bound.texture_aggregate(&mut tape, v0, v1).unwrap();
        let first = tape.value(te).data()[0..c].to_vec();
        for i in 1..n {
            assert_eq!(&tape.value(te).data()[i * c..(i + 1) * c], &first[..], "row {i}");
        }
    }

    #[test]
    fn motion_is_exactly_zero_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let c = 4;
        let (h, w) = (3, 4);
        let params = AttentionParams::<f64>::new(c, &mut rng);
        let f0 = rand_t(&[h * w, c], &mut rng);
        let f1 = rand_t(&[h * w, c], &mut rng);
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, false);
        let bound = params.bind(&mut b);
        let v0 = tape.leaf(f0, false);
        let v1 = tape.leaf(f1, false);
        let (q, k, _v) = bound.project_qkv(&mut tape, v0, v1).unwrap();
        let mo = bound.motion_aggregate(&mut tape, q, k, h, w).unwrap();
        assert_eq!(tape.value(mo).shape(), &[h * w, 2]);
        assert!(tape.value(mo).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn motion_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = 4;
        let (h, w) = (4, 4);
        let mut params = AttentionParams::<f64>::new(c, &mut rng);
        // non-zero motion head for a non-trivial field
        params.motion_mlp = MlpParams::new(c, 2 * c, 2, &mut rng);
        let f0 = rand_t(&[h * w, c], &mut rng);
        let f1 = rand_t(&[h * w, c], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let mut b = Binder::new(&mut tape, false);
            let bound = params.bind(&mut b);
            let v0 = tape.leaf(f0.clone(), false);
            let v1 = tape.leaf(f1.clone(), false);
            let (q, k, _v) = bound.project_qkv(&mut tape, v0, v1).unwrap();
            let mo = bound.motion_aggregate(&mut tape, q, k, h, w).unwrap();
            tape.value(mo).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn heatmap_conventions() {
        // constant field -> all zeros
        let z = Tensor::<f64>::full(&[6, 3], 0.7);
        assert!(attention_heatmap(&z, 2, 3).iter().all(|&p| p == 0));
        // single hot token -> single bright pixel
        let mut z = Tensor::<f64>::zeros(&[6, 3]);
        z.data_mut()[4 * 3] = 2.0;
        let img = attention_heatmap(&z, 2, 3);
        assert_eq!(img.len(), 6);
        assert_eq!(img[4], 255);
        assert!(img.iter().enumerate().all(|(i, &p)| if i == 4 { p == 255 } else { p == 0 }));
    }
}
