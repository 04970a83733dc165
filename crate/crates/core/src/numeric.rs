//! Fixed-topology differentiable kernels: dense two-layer nets, softmax
//! cross-entropy, momentum SGD and a central-difference gradient checker.
//!
//! Every loop runs in a fixed order so seeded runs are bit-reproducible.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension { expected: rows * cols, got: data.len() });
        }
        Ok(DenseMat { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        DenseMat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · x`
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::Dimension { expected: self.cols, got: x.len() });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[T]) -> Result<Vec<T>> {
        if y.len() != self.rows {
            return Err(Error::Dimension { expected: self.rows, got: y.len() });
        }
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    /// Inserts `row` before row index `at`.
    pub fn insert_row(&mut self, at: usize, row: &[T]) {
        assert_eq!(row.len(), self.cols);
        let start = at * self.cols;
        self.data.splice(start..start, row.iter().copied());
        self.rows += 1;
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `x / ‖x‖`, failing on a zero vector.
pub fn normalized<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    let n = norm(x);
    if n == T::zero() || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(x.iter().map(|&v| v / n).collect())
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot(a, b) / (norm(a) * norm(b))
}

fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// `out = W2 · relu(W1 · x + b1) + b2`
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerNet<T> {
    pub w1: DenseMat<T>,
    pub b1: Vec<T>,
    pub w2: DenseMat<T>,
    pub b2: Vec<T>,
}

/// Intermediate values kept by [`TwoLayerNet::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub input: Vec<T>,
    pub hidden_pre: Vec<T>,
    pub hidden: Vec<T>,
    /// Final-layer output before any nonlinearity; only kept on request.
    pub preactivation: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads<T> {
    pub w1: DenseMat<T>,
    pub b1: Vec<T>,
    pub w2: DenseMat<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> NetGrads<T> {
    pub fn zeros_like(net: &TwoLayerNet<T>) -> Self {
        NetGrads {
            w1: DenseMat::zeros(net.w1.rows, net.w1.cols),
            b1: vec![T::zero(); net.b1.len()],
            w2: DenseMat::zeros(net.w2.rows, net.w2.cols),
            b2: vec![T::zero(); net.b2.len()],
        }
    }

    pub fn accumulate(&mut self, other: &NetGrads<T>) {
        add_into(self.w1.as_mut_slice(), other.w1.as_slice());
        add_into(&mut self.b1, &other.b1);
        add_into(self.w2.as_mut_slice(), other.w2.as_slice());
        add_into(&mut self.b2, &other.b2);
    }

    pub fn scale(&mut self, s: T) {
        for v in self
            .w1
            .as_mut_slice()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.as_mut_slice().iter_mut())
            .chain(self.b2.iter_mut())
        {
            *v *= s;
        }
    }

    pub fn sq_norm(&self) -> T {
        self.parts().iter().flat_map(|(_, p)| p.iter()).fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn parts(&self) -> [(&'static str, &[T]); 4] {
        [("w1", self.w1.as_slice()), ("b1", &self.b1), ("w2", self.w2.as_slice()), ("b2", &self.b2)]
    }
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> TwoLayerNet<T> {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        TwoLayerNet {
            w1: DenseMat::zeros(hidden, input),
            b1: vec![T::zero(); hidden],
            w2: DenseMat::zeros(output, hidden),
            b2: vec![T::zero(); output],
        }
    }

    /// He-scaled first layer (`std = √(2/fan_in)`), `√(1/fan_in)` second layer, zero biases.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        TwoLayerNet {
            w1: DenseMat::random_normal(hidden, input, (2.0 / input as f64).sqrt(), rng),
            b1: vec![T::zero(); hidden],
            w2: DenseMat::random_normal(output, hidden, (1.0 / hidden as f64).sqrt(), rng),
            b2: vec![T::zero(); output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows
    }

    pub fn forward(&self, x: &[T], keep_preactivation: bool) -> Result<(Vec<T>, ForwardCache<T>)> {
        let mut hidden_pre = self.w1.matvec(x)?;
        add_into(&mut hidden_pre, &self.b1);
        let hidden: Vec<T> = hidden_pre.iter().map(|&v| relu(v)).collect();
        let mut out = self.w2.matvec(&hidden)?;
        add_into(&mut out, &self.b2);
        let cache = ForwardCache {
            input: x.to_vec(),
            hidden_pre,
            hidden,
            preactivation: keep_preactivation.then(|| out.clone()),
        };
        Ok((out, cache))
    }

    /// Output only.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(x, false)?.0)
    }

    /// Reverse-mode gradients of a scalar whose gradient w.r.t. the output is `grad_out`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &[T]) -> Result<(NetGrads<T>, Vec<T>)> {
        if grad_out.len() != self.output_dim() {
            return Err(Error::Dimension { expected: self.output_dim(), got: grad_out.len() });
        }
        if cache.hidden.len() != self.hidden_dim() || cache.input.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.hidden_dim(), got: cache.hidden.len() });
        }
        let mut grads = NetGrads::zeros_like(self);
        grads.b2.copy_from_slice(grad_out);
        outer_into(&mut grads.w2, grad_out, &cache.hidden);
        let mut grad_hidden = self.w2.matvec_t(grad_out)?;
        for (g, &pre) in grad_hidden.iter_mut().zip(&cache.hidden_pre) {
            if pre <= T::zero() {
                *g = T::zero();
            }
        }
        grads.b1.copy_from_slice(&grad_hidden);
        outer_into(&mut grads.w1, &grad_hidden, &cache.input);
        let grad_in = self.w1.matvec_t(&grad_hidden)?;
        Ok((grads, grad_in))
    }

    /// Named parameter slices in a fixed order.
    pub fn parts(&self) -> [(&'static str, &[T]); 4] {
        [("w1", self.w1.as_slice()), ("b1", &self.b1), ("w2", self.w2.as_slice()), ("b2", &self.b2)]
    }

    pub fn parts_mut(&mut self) -> [(&'static str, &mut [T]); 4] {
        [
            ("w1", self.w1.as_mut_slice()),
            ("b1", &mut self.b1),
            ("w2", self.w2.as_mut_slice()),
            ("b2", &mut self.b2),
        ]
    }

    pub fn shapes(&self) -> [(&'static str, Vec<usize>); 4] {
        [
            ("w1", vec![self.w1.rows, self.w1.cols]),
            ("b1", vec![self.b1.len()]),
            ("w2", vec![self.w2.rows, self.w2.cols]),
            ("b2", vec![self.b2.len()]),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }
}

fn outer_into<T: Scalar>(dst: &mut DenseMat<T>, left: &[T], right: &[T]) {
    let cols = dst.cols;
    for (r, &l) in left.iter().enumerate() {
        if l == T::zero() {
            continue;
        }
        for (d, &v) in dst.data[r * cols..(r + 1) * cols].iter_mut().zip(right) {
            *d = l * v;
        }
    }
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(z)`, computed stably.
pub fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&z| (z - max).exp()).sum();
    max + total.ln()
}

/// Cross-entropy against a one-hot `target`, with its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> (T, Vec<T>) {
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= T::one();
    (loss, grad)
}

/// Classical momentum with optional L2 weight decay:
/// `v ← μ·v + g + λ·p; p ← p − lr·v`.
///
/// Velocity buffers are created lazily per parameter name and must keep
/// their shape afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T) -> Self {
        Self::with_momentum(learning_rate, T::of(0.9))
    }

    pub fn with_momentum(learning_rate: T, momentum: T) -> Self {
        Sgd { learning_rate, momentum, weight_decay: T::zero(), velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, name: &str, param: &mut [T], grad: &[T]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Dimension { expected: param.len(), got: grad.len() });
        }
        let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![T::zero(); param.len()]);
        if v.len() != param.len() {
            return Err(Error::Dimension { expected: v.len(), got: param.len() });
        }
        for ((p, vi), &g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = self.momentum * *vi + g + self.weight_decay * *p;
            *p -= self.learning_rate * *vi;
        }
        Ok(())
    }

    /// Updates all four tensors of `net` under `prefix.{w1,b1,w2,b2}`.
    pub fn step_net(&mut self, prefix: &str, net: &mut TwoLayerNet<T>, grads: &NetGrads<T>) -> Result<()> {
        for ((name, param), (_, grad)) in net.parts_mut().into_iter().zip(grads.parts()) {
            self.step(&format!("{prefix}.{name}"), param, grad)?;
        }
        Ok(())
    }

    pub fn velocity(&self) -> &BTreeMap<String, Vec<T>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: &str, v: Vec<T>) {
        self.velocity.insert(name.to_string(), v);
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub within_tolerance: bool,
}

/// Compares the analytic gradient returned by `loss_fn` with central
/// differences at `point`:
/// `max_k |a_k − cd_k| / max(|a_k|, |cd_k|, 1e-12)`.
///
/// `loss_fn` is evaluated twice at `point`; differing results mean it is
/// not deterministic and the check fails with [`Error::NonDeterministic`].
pub fn grad_check<T, F>(loss_fn: F, point: &[T], step: T, tol: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&[T]) -> (T, Vec<T>),
{
    let (v1, analytic) = loss_fn(point);
    let (v2, analytic2) = loss_fn(point);
    if v1 != v2 || analytic != analytic2 {
        return Err(Error::NonDeterministic);
    }
    if analytic.len() != point.len() {
        return Err(Error::Dimension { expected: point.len(), got: analytic.len() });
    }
    let mut x = point.to_vec();
    let mut worst = GradCheck { max_rel_err: 0.0, worst_coordinate: 0, within_tolerance: true };
    let two = T::one() + T::one();
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let plus = loss_fn(&x).0;
        x[k] = orig - step;
        let minus = loss_fn(&x).0;
        x[k] = orig;
        let cd = ((plus - minus) / (two * step)).as_f64();
        let a = analytic[k].as_f64();
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-12);
        if rel > worst.max_rel_err || rel.is_nan() {
            worst.max_rel_err = rel;
            worst.worst_coordinate = k;
        }
    }
    worst.within_tolerance = worst.max_rel_err < tol;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // straight-line reference for W2·relu(W1·x+b1)+b2
    fn reference_forward(net: &TwoLayerNet<f64>, x: &[f64]) -> Vec<f64> {
        let (h, i) = (net.hidden_dim(), net.input_dim());
        let mut hidden = vec![0.0; h];
        for r in 0..h {
            let mut s = net.b1[r];
            for c in 0..i {
                s += net.w1.as_slice()[r * i + c] * x[c];
            }
            hidden[r] = if s > 0.0 { s } else { 0.0 };
        }
        (0..net.output_dim())
            .map(|r| net.b2[r] + (0..h).map(|c| net.w2.as_slice()[r * h + c] * hidden[c]).sum::<f64>())
            .collect()
    }

    fn random_net(seed: u64, i: usize, h: usize, o: usize) -> TwoLayerNet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = TwoLayerNet::random(i, h, o, &mut rng);
        for b in net.b1.iter_mut().chain(net.b2.iter_mut()) {
            *b = rng.random_range(-0.5..0.5);
        }
        net
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = TwoLayerNet::<f64>::zeros(3, 4, 2);
        assert_eq!(net.apply(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_net_passes_nonnegative_input() {
        let net = TwoLayerNet {
            w1: DenseMat::identity(3),
            b1: vec![0.0; 3],
            w2: DenseMat::identity(3),
            b2: vec![0.0; 3],
        };
        assert_eq!(net.apply(&[0.5, 0.0, 2.0]).unwrap(), vec![0.5, 0.0, 2.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..10 {
            let net = random_net(seed, 5, 7, 3);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (out, cache) = net.forward(&x, true).unwrap();
            let expected = reference_forward(&net, &x);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(cache.preactivation.as_deref(), Some(out.as_slice()));
        }
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let net = TwoLayerNet::<f64>::zeros(3, 4, 2);
        assert!(matches!(net.forward(&[1.0], false), Err(Error::Dimension { .. })));
        let (_, cache) = net.forward(&[1.0, 2.0, 3.0], false).unwrap();
        assert!(net.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = random_net(3, 4, 5, 2);
        let (_, cache) = net.forward(&[0.3, -0.1, 0.2, 0.9], false).unwrap();
        let (g, gin) = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert_eq!(g, NetGrads::zeros_like(&net));
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_net_closed_form() {
        // y = w2·relu(w1·x + b1) + b2 with w1=2, b1=0.5, w2=-3, b2=1 at x=1.5: pre=3.5>0
        let net = TwoLayerNet {
            w1: DenseMat::from_vec(1, 1, vec![2.0]).unwrap(),
            b1: vec![0.5],
            w2: DenseMat::from_vec(1, 1, vec![-3.0]).unwrap(),
            b2: vec![1.0],
        };
        let (y, cache) = net.forward(&[1.5], false).unwrap();
        assert_eq!(y, vec![-9.5]);
        let (g, gin) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.w2.as_slice(), &[3.5]);
        assert_eq!(g.b2, vec![1.0]);
        assert_eq!(g.w1.as_slice(), &[-3.0 * 1.5]);
        assert_eq!(g.b1, vec![-3.0]);
        assert_eq!(gin, vec![-6.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&[0.0f64, 3.0f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let u = softmax(&[2.0f64; 5]);
        assert!(u.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let a = softmax(&[0.1f64, -2.0, 3.0]);
        let b = softmax(&[100.1f64, 98.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let big = softmax(&[1000.0f64, 0.0]);
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_in_single_precision() {
        let p = softmax(&[0.0f32, 3.0f32.ln()]);
        assert!((p[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_unrolled() {
        let mut opt = Sgd::new(0.1f64);
        let mut p = vec![1.0, -2.0];
        opt.step("p", &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut p = vec![1.0];
        let mut opt = Sgd::new(0.1f64);
        opt.step("p", &mut p, &[2.0]).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 2.0)).abs() < 1e-15);
        opt.step("p", &mut p, &[2.0]).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 2.0 * (1.0 + 1.9))).abs() < 1e-12);
        assert!(opt.step("p", &mut [0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut opt = Sgd::new(0.0f64);
        let mut p = vec![0.3, 0.7];
        for _ in 0..3 {
            opt.step("p", &mut p, &[5.0, -1.0]).unwrap();
        }
        assert_eq!(p, vec![0.3, 0.7]);
    }

    #[test]
    fn grad_check_quadratic() {
        let f = |x: &[f64]| {
            let v = x.iter().enumerate().map(|(i, &a)| (i as f64 + 1.0) * a * a).sum::<f64>();
            let g = x.iter().enumerate().map(|(i, &a)| 2.0 * (i as f64 + 1.0) * a).collect();
            (v, g)
        };
        let r = grad_check(f, &[0.3, -1.2, 2.0], 1e-5, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let target = rng.random_range(0..6);
            let r = grad_check(|z: &[f64]| softmax_cross_entropy(z, target), &logits, 1e-5, 1e-4).unwrap();
            assert!(r.within_tolerance, "{r:?}");
        }
    }

    #[test]
    fn grad_check_rejects_randomized_loss() {
        let counter = std::cell::Cell::new(0u64);
        let f = |x: &[f64]| {
            counter.set(counter.get() + 1);
            (x[0] + counter.get() as f64, vec![1.0])
        };
        assert!(matches!(grad_check(f, &[0.0], 1e-5, 1e-4), Err(Error::NonDeterministic)));
    }

    #[test]
    fn insert_row_keeps_existing_rows() {
        let mut m = DenseMat::from_vec(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        m.insert_row(1, &[9.0, 9.0]);
        assert_eq!(m.as_slice(), &[1.0, 2.0, 9.0, 9.0, 3.0, 4.0]);
        assert_eq!(m.rows(), 3);
    }
}
