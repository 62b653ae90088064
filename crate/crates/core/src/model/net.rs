//! Hash-bucket wordpiece encoder, two same-padded 1D convolutions with ReLU,
//! max-pool over wordpieces, and a linear head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::Matrix;
use crate::scalar::Real;
use crate::util::fnv1a;

pub const TENSOR_NAMES: [&str; 7] = [
    "embedding",
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "head.weight",
    "head.bias",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    fn uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        Tensor { shape, data }
    }
}

/// Sizes derived from a model config and its feature layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub buckets: usize,
    pub d_enc: usize,
    pub d_static: usize,
    pub c1: usize,
    pub c2: usize,
    pub kernel: usize,
    pub outputs: usize,
}

impl Dims {
    pub fn d_in(&self) -> usize {
        self.d_enc + self.d_static
    }

    pub fn shapes(&self) -> [Vec<usize>; 7] {
        [
            vec![self.buckets, self.d_enc],
            vec![self.c1, self.d_in(), self.kernel],
            vec![self.c1],
            vec![self.c2, self.c1, self.kernel],
            vec![self.c2],
            vec![self.outputs, self.c2],
            vec![self.outputs],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tensors: [Tensor<T>; 7],
}

impl<T: Real> Params<T> {
    pub fn zeros(dims: &Dims) -> Self {
        Params {
            tensors: dims.shapes().map(Tensor::zeros),
        }
    }

    /// Uniform fan-in scaled init; biases start at zero.
    pub fn init(dims: &Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [emb, w1, b1, w2, b2, wo, bo] = dims.shapes();
        let fan = |f: usize| (1.0 / f.max(1) as f64).sqrt();
        Params {
            tensors: [
                Tensor::uniform(emb, 0.5, &mut rng),
                Tensor::uniform(w1, fan(dims.d_in() * dims.kernel), &mut rng),
                Tensor::zeros(b1),
                Tensor::uniform(w2, fan(dims.c1 * dims.kernel), &mut rng),
                Tensor::zeros(b2),
                Tensor::uniform(wo, fan(dims.c2), &mut rng),
                Tensor::zeros(bo),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients; the embedding part is sparse over the buckets a batch touched.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub embedding: BTreeMap<usize, Vec<T>>,
    pub dense: [Vec<T>; 6],
}

impl<T: Real> Grads<T> {
    pub fn zeros(dims: &Dims) -> Self {
        let [_, w1, b1, w2, b2, wo, bo] = dims.shapes();
        let z = |s: Vec<usize>| vec![T::zero(); s.iter().product()];
        Grads {
            embedding: BTreeMap::new(),
            dense: [z(w1), z(b1), z(w2), z(b2), z(wo), z(bo)],
        }
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (bucket, g) in &other.embedding {
            let row = self
                .embedding
                .entry(*bucket)
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for (a, b) in row.iter_mut().zip(g) {
                *a = *a + *b;
            }
        }
        for (dst, src) in self.dense.iter_mut().zip(&other.dense) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a = *a + *b;
            }
        }
    }

    /// Dense view of tensor `i` (0 = embedding) for checks and optimizers.
    pub fn dense_embedding(&self, dims: &Dims) -> Vec<T> {
        let mut out = vec![T::zero(); dims.buckets * dims.d_enc];
        for (b, g) in &self.embedding {
            out[b * dims.d_enc..(b + 1) * dims.d_enc].copy_from_slice(g);
        }
        out
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Mean binary cross-entropy over outputs, from logits.
pub fn bce_with_logits<T: Real>(logits: &[T], target: &[T]) -> T {
    let n = T::from_count(logits.len() as u64);
    logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
        .sum::<T>()
        / n
}

pub fn bucket_of(piece: &str, buckets: usize) -> usize {
    (fnv1a(piece) % buckets as u64) as usize
}

/// `out[t][c] = b[c] + Σ_k Σ_d w[c][d][k] · x[t + k - pad][d]`, zero outside.
fn conv_same<T: Real>(
    x: &[T],
    n: usize,
    d: usize,
    w: &[T],
    b: &[T],
    c_out: usize,
    k: usize,
) -> Vec<T> {
    let pad = k / 2;
    let mut out = vec![T::zero(); n * c_out];
    for t in 0..n {
        let row = &mut out[t * c_out..(t + 1) * c_out];
        row.copy_from_slice(b);
        for kk in 0..k {
            let Some(src) = (t + kk).checked_sub(pad).filter(|s| *s < n) else {
                continue;
            };
            let xs = &x[src * d..(src + 1) * d];
            for (c, acc) in row.iter_mut().enumerate() {
                let mut s = T::zero();
                for (dd, xv) in xs.iter().enumerate() {
                    s = s + w[(c * d + dd) * k + kk] * *xv;
                }
                *acc = *acc + s;
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_same_backward<T: Real>(
    x: &[T],
    n: usize,
    d: usize,
    w: &[T],
    c_out: usize,
    k: usize,
    da: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let pad = k / 2;
    let mut dx = vec![T::zero(); n * d];
    for t in 0..n {
        let g = &da[t * c_out..(t + 1) * c_out];
        for (c, gv) in g.iter().enumerate() {
            db[c] = db[c] + *gv;
        }
        for kk in 0..k {
            let Some(src) = (t + kk).checked_sub(pad).filter(|s| *s < n) else {
                continue;
            };
            for (c, gv) in g.iter().enumerate() {
                if *gv == T::zero() {
                    continue;
                }
                for dd in 0..d {
                    let wi = (c * d + dd) * k + kk;
                    dw[wi] = dw[wi] + *gv * x[src * d + dd];
                    dx[src * d + dd] = dx[src * d + dd] + *gv * w[wi];
                }
            }
        }
    }
    dx
}

/// Intermediate values kept for the backward pass.
pub struct Trace<T> {
    n: usize,
    x: Vec<T>,
    a1: Vec<T>,
    h1: Vec<T>,
    a2: Vec<T>,
    pooled: Vec<T>,
    argmax: Vec<usize>,
    pub logits: Vec<T>,
}

impl<T: Real> Trace<T> {
    /// ReLU on/off states and pooling winners. Finite differences are only
    /// meaningful between points that share a pattern.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<bool>, Vec<usize>) {
        let on = |v: &Vec<T>| v.iter().map(|a| *a > T::zero()).collect();
        (on(&self.a1), on(&self.a2), self.argmax.clone())
    }
}

pub struct Net<T> {
    pub dims: Dims,
    pub params: Params<T>,
}

impl<T: Real> Net<T> {
    pub fn new(dims: Dims, params: Params<T>) -> Self {
        Net { dims, params }
    }

    pub fn bucket_ids(&self, wordpieces: &[String]) -> Vec<usize> {
        wordpieces
            .iter()
            .map(|p| bucket_of(p, self.dims.buckets))
            .collect()
    }

    /// Encoder output for a sentence: one embedding row per wordpiece.
    pub fn encode(&self, ids: &[usize]) -> Matrix<T> {
        let d = self.dims.d_enc;
        let emb = &self.params.tensors[0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for id in ids {
            data.extend_from_slice(&emb[id * d..(id + 1) * d]);
        }
        Matrix::from_vec(ids.len(), d, data)
    }

    /// Runs the trunk and head on a concatenated `n × d_in` input.
    pub fn forward_input(&self, x: Vec<T>, n: usize) -> Trace<T> {
        let Dims {
            c1,
            c2,
            kernel,
            outputs,
            ..
        } = self.dims;
        let p = &self.params.tensors;
        let a1 = conv_same(&x, n, self.dims.d_in(), &p[1].data, &p[2].data, c1, kernel);
        let h1: Vec<T> = a1.iter().map(|v| v.max(T::zero())).collect();
        let a2 = conv_same(&h1, n, c1, &p[3].data, &p[4].data, c2, kernel);
        let mut pooled = vec![T::zero(); c2];
        let mut argmax = vec![0; c2];
        for t in 0..n {
            for c in 0..c2 {
                let h = a2[t * c2 + c].max(T::zero());
                if t == 0 || h > pooled[c] {
                    pooled[c] = h;
                    argmax[c] = t;
                }
            }
        }
        let logits = (0..outputs)
            .map(|o| {
                p[6].data[o]
                    + (0..c2)
                        .map(|c| p[5].data[o * c2 + c] * pooled[c])
                        .sum::<T>()
            })
            .collect();
        Trace {
            n,
            x,
            a1,
            h1,
            a2,
            pooled,
            argmax,
            logits,
        }
    }

    /// Concatenates encoder rows with the static block and runs the network.
    pub fn forward(&self, ids: &[usize], static_block: &Matrix<T>) -> Trace<T> {
        let enc = self.encode(ids);
        let x = Matrix::hcat(&[&enc, static_block]);
        self.forward_input(x.data, ids.len())
    }

    #[allow(clippy::needless_range_loop)]
    /// Gradients of `scale · loss` where `d loss / d logits = dlogits`.
    pub fn backward(&self, ids: &[usize], trace: &Trace<T>, dlogits: &[T]) -> Grads<T> {
        let Dims {
            c1,
            c2,
            kernel,
            outputs,
            d_enc,
            ..
        } = self.dims;
        let d_in = self.dims.d_in();
        let n = trace.n;
        let p = &self.params.tensors;
        let mut g = Grads::zeros(&self.dims);

        let mut dpooled = vec![T::zero(); c2];
        for o in 0..outputs {
            g.dense[5][o] = g.dense[5][o] + dlogits[o];
            for c in 0..c2 {
                g.dense[4][o * c2 + c] = g.dense[4][o * c2 + c] + dlogits[o] * trace.pooled[c];
                dpooled[c] = dpooled[c] + dlogits[o] * p[5].data[o * c2 + c];
            }
        }
        let mut da2 = vec![T::zero(); n * c2];
        if n == 0 {
            return g;
        }
        for c in 0..c2 {
            let t = trace.argmax[c];
            if trace.a2[t * c2 + c] > T::zero() {
                da2[t * c2 + c] = dpooled[c];
            }
        }
        let [dw1, db1, dw2, db2, ..] = &mut g.dense;
        let dh1 = conv_same_backward(&trace.h1, n, c1, &p[3].data, c2, kernel, &da2, dw2, db2);
        let da1: Vec<T> = dh1
            .iter()
            .zip(&trace.a1)
            .map(|(d, a)| if *a > T::zero() { *d } else { T::zero() })
            .collect();
        let dx = conv_same_backward(&trace.x, n, d_in, &p[1].data, c1, kernel, &da1, dw1, db1);
        for (t, id) in ids.iter().enumerate() {
            let row = g
                .embedding
                .entry(*id)
                .or_insert_with(|| vec![T::zero(); d_enc]);
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + dx[t * d_in + j];
            }
        }
        g
    }

    /// Loss and gradients for one example with mean-over-outputs BCE, scaled
    /// by `scale` (for batch averaging).
    pub fn loss_and_grads(
        &self,
        ids: &[usize],
        static_block: &Matrix<T>,
        target: &[T],
        scale: T,
    ) -> (T, Grads<T>) {
        let trace = self.forward(ids, static_block);
        let loss = bce_with_logits(&trace.logits, target);
        let n_out = T::from_count(target.len() as u64);
        let dlogits: Vec<T> = trace
            .logits
            .iter()
            .zip(target)
            .map(|(z, y)| (sigmoid(*z) - *y) / n_out * scale)
            .collect();
        (loss, self.backward(ids, &trace, &dlogits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig, TestCaseError};

    fn dims() -> Dims {
        Dims {
            buckets: 11,
            d_enc: 8,
            d_static: 3,
            c1: 4,
            c2: 4,
            kernel: 3,
            outputs: 6,
        }
    }

    fn random_input(n: usize, seed: u64) -> (Vec<usize>, Matrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..n).map(|_| rng.gen_range(0..11)).collect();
        let st = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let target = (0..6)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        (ids, st, target)
    }

    type Input = (Vec<usize>, Matrix<f64>, Vec<f64>);

    /// Central difference, or `None` when the probe crosses a ReLU or pooling
    /// switch.
    fn perturbed_loss(
        net: &mut Net<f64>,
        tensor: usize,
        i: usize,
        h: f64,
        input: &Input,
    ) -> Option<f64> {
        let base = net.forward(&input.0, &input.1).activation_pattern();
        let orig = net.params.tensors[tensor].data[i];
        net.params.tensors[tensor].data[i] = orig + h;
        let plus = net.forward(&input.0, &input.1);
        net.params.tensors[tensor].data[i] = orig - h;
        let minus = net.forward(&input.0, &input.1);
        net.params.tensors[tensor].data[i] = orig;
        if plus.activation_pattern() != base || minus.activation_pattern() != base {
            return None;
        }
        Some(
            (bce_with_logits(&plus.logits, &input.2) - bce_with_logits(&minus.logits, &input.2))
                / (2.0 * h),
        )
    }

    #[allow(clippy::needless_range_loop)]
    fn check_gradients(seed: u64, n: usize) -> Result<(), TestCaseError> {
        let d = dims();
        let mut params = Params::<f64>::init(&d, seed);
        // non-zero biases so ReLU kinks are rarely hit exactly
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for t in [2, 4, 6] {
            for v in &mut params.tensors[t].data {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
        let mut net = Net::new(d, params);
        let input = random_input(n, seed);
        let (_, grads) = net.loss_and_grads(&input.0, &input.1, &input.2, 1.0);
        let emb = grads.dense_embedding(&d);
        let h = 1e-4;
        for tensor in 0..7 {
            let analytic: &[f64] = if tensor == 0 {
                &emb
            } else {
                &grads.dense[tensor - 1]
            };
            for i in 0..analytic.len() {
                let Some(numeric) = perturbed_loss(&mut net, tensor, i, h, &input) else {
                    continue;
                };
                let a = analytic[i];
                let denom = a.abs().max(numeric.abs());
                if denom < 1e-7 {
                    continue;
                }
                let rel = (a - numeric).abs() / denom;
                prop_assert!(
                    rel < 1e-3 || (a - numeric).abs() < 1e-8,
                    "{}[{i}]: analytic {a} numeric {numeric}",
                    TENSOR_NAMES[tensor]
                );
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_finite_differences(seed in any::<u64>(), n in 1usize..=6) {
            check_gradients(seed, n)?;
        }
    }

    #[test]
    fn one_wordpiece_runs_and_outputs_are_probabilities() {
        let d = dims();
        let net = Net::new(d, Params::<f32>::init(&d, 1));
        let st = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.5]);
        let trace = net.forward(&[4], &st);
        assert_eq!(trace.logits.len(), 6);
        assert!(trace.logits.iter().all(|z| {
            let p = sigmoid(*z);
            p > 0.0 && p < 1.0
        }));
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z = [0.3f64, -2.0];
        let y = [1.0, 0.0];
        let direct: f64 = z
            .iter()
            .zip(&y)
            .map(|(z, y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 2.0;
        assert!((bce_with_logits(&z, &y) - direct).abs() < 1e-12);
    }
}
