//! A small convolutional classifier with dropout, written out by hand:
//! im2col convolutions on top of `matrixmultiply`, ReLU, 2x2 max-pooling,
//! fully connected layers and a 4-way softmax. Generic over the float type
//! so gradients can be checked in f64 while training runs in f32.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelgen::OutcomeClass;

pub const NUM_CLASSES: usize = 4;

pub trait Real: Float + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + Debug + Default + 'static {
    /// `c = alpha * a * b + beta * c` for an m x k by k x n product with
    /// arbitrary (non-negative) row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(v: f64) -> Self {
        Self::from(v).unwrap()
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(span(m, k, a_strides) <= a.len());
                assert!(span(k, n, b_strides) <= b.len());
                assert!(span(m, n, c_strides) <= c.len());
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    /// 2x2 max-pooling (stride 2) after the ReLU.
    #[serde(default)]
    pub pool: bool,
}

fn one() -> usize {
    1
}

/// Architecture. Dropout always sits on the inputs of the first two fully
/// connected layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Side of the square single-channel input.
    pub input_size: usize,
    pub conv: Vec<ConvSpec>,
    /// Fully connected widths; the last is the class count.
    pub fc: Vec<usize>,
    pub p_drop: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let c = |out_channels, stride| ConvSpec { out_channels, kernel: 5, stride, padding: 0, pool: true };
        Self { input_size: 100, conv: vec![c(8, 2), c(16, 1), c(32, 1)], fc: vec![128, 64, 4], p_drop: 0.5 }
    }
}

impl NetworkSpec {
    /// Five convolutions and three fully connected layers in the AlexNet
    /// mold, scaled to a 100x100 input; the second fc layer is 256 wide.
    pub fn alexnet_like() -> Self {
        let c = |out_channels, kernel, stride, padding, pool| ConvSpec { out_channels, kernel, stride, padding, pool };
        Self {
            input_size: 100,
            conv: vec![c(96, 11, 4, 0, true), c(256, 5, 1, 2, true), c(384, 3, 1, 1, false), c(384, 3, 1, 1, false), c(256, 3, 1, 1, true)],
            fc: vec![512, 256, NUM_CLASSES],
            p_drop: 0.5,
        }
    }

    fn plan(&self) -> Result<Plan> {
        if self.input_size == 0 {
            return Err(Error::invalid("network.input_size", "must be positive"));
        }
        if self.fc.len() < 2 {
            return Err(Error::invalid("network.fc", "need at least two fully connected layers"));
        }
        if self.fc.last() != Some(&NUM_CLASSES) {
            return Err(Error::invalid("network.fc", "the last layer must have width 4"));
        }
        if self.fc.contains(&0) {
            return Err(Error::invalid("network.fc", "widths must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::invalid("network.p_drop", "must be in [0, 1)"));
        }
        let mut offset = 0;
        let mut alloc = |n: usize| {
            offset += n;
            offset - n
        };
        let (mut c, mut h, mut w) = (1, self.input_size, self.input_size);
        let mut convs = Vec::new();
        for (i, s) in self.conv.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::invalid("network.conv", format!("layer {i}: sizes must be positive")));
            }
            if h + 2 * s.padding < s.kernel || w + 2 * s.padding < s.kernel {
                return Err(Error::invalid("network.conv", format!("layer {i}: kernel larger than its input")));
            }
            let out_h = (h + 2 * s.padding - s.kernel) / s.stride + 1;
            let out_w = (w + 2 * s.padding - s.kernel) / s.stride + 1;
            let (next_h, next_w) = if s.pool { (out_h / 2, out_w / 2) } else { (out_h, out_w) };
            if next_h == 0 || next_w == 0 {
                return Err(Error::invalid("network.conv", format!("layer {i}: output collapses to zero size")));
            }
            let fan_in = c * s.kernel * s.kernel;
            convs.push(ConvPlan {
                in_c: c,
                in_h: h,
                in_w: w,
                spec: *s,
                out_h,
                out_w,
                w_off: alloc(s.out_channels * fan_in),
                b_off: alloc(s.out_channels),
            });
            (c, h, w) = (s.out_channels, next_h, next_w);
        }
        let features = c * h * w;
        let mut fcs = Vec::new();
        let mut fan_in = features;
        for &out in &self.fc {
            fcs.push(FcPlan { fan_in, out, w_off: alloc(out * fan_in), b_off: alloc(out) });
            fan_in = out;
        }
        Ok(Plan { convs, fcs, features, n_params: offset })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub fn input_len(&self) -> usize {
        self.input_size * self.input_size
    }
}

#[derive(Debug, Clone)]
struct ConvPlan {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    spec: ConvSpec,
    out_h: usize,
    out_w: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvPlan {
    fn fan_in(&self) -> usize {
        self.in_c * self.spec.kernel * self.spec.kernel
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug, Clone)]
struct FcPlan {
    fan_in: usize,
    out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone)]
struct Plan {
    convs: Vec<ConvPlan>,
    fcs: Vec<FcPlan>,
    features: usize,
    n_params: usize,
}

/// Inverted-dropout multipliers (0 or 1/(1-p)) for the inputs of the first
/// two fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<R> {
    pub layers: [Vec<R>; 2],
}

#[derive(Debug, Clone)]
pub struct Network<R> {
    spec: NetworkSpec,
    plan: Plan,
    params: Vec<R>,
}

// Forward intermediates of one sample, kept for backpropagation.
struct Trace<R> {
    cols: Vec<Vec<R>>,
    acts: Vec<Vec<R>>,
    pool_idx: Vec<Vec<u32>>,
    /// Inputs of each fc layer after dropout.
    fc_in: Vec<Vec<R>>,
    /// Post-ReLU outputs of the hidden fc layers.
    hidden: Vec<Vec<R>>,
    probs: [R; NUM_CLASSES],
}

impl<R: Real> Network<R> {
    /// All weights and biases zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let plan = spec.plan()?;
        let params = vec![R::zero(); plan.n_params];
        Ok(Self { spec, plan, params })
    }

    /// He-normal weights, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |params: &mut [R], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for p in params {
                *p = R::lit(normal.sample(&mut rng));
            }
        };
        let plan = net.plan.clone();
        for c in &plan.convs {
            fill(&mut net.params[c.w_off..c.b_off], c.fan_in());
        }
        for f in &plan.fcs {
            fill(&mut net.params[f.w_off..f.b_off], f.fan_in);
        }
        Ok(net)
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<R>) -> Result<Self> {
        let plan = spec.plan()?;
        if params.len() != plan.n_params {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", plan.n_params),
                actual: format!("{} parameters", params.len()),
            });
        }
        Ok(Self { spec, plan, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Length of the flattened convolutional feature vector.
    pub fn feature_len(&self) -> usize {
        self.plan.features
    }

    /// Width of the second fully connected layer (the embedding).
    pub fn embedding_len(&self) -> usize {
        self.plan.fcs[1].out
    }

    pub fn cast<S: Real>(&self) -> Network<S> {
        Network {
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|&p| S::from(p).unwrap()).collect(),
        }
    }

    fn check_input(&self, input: &[f32]) -> Result<()> {
        if input.len() != self.spec.input_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{0}x{0} patch", self.spec.input_size),
                actual: format!("{} values", input.len()),
            });
        }
        Ok(())
    }

    /// Fresh dropout multipliers, or `None` when `p_drop` is zero.
    pub fn sample_masks<G: Rng>(&self, rng: &mut G) -> Option<DropoutMasks<R>> {
        let p = self.spec.p_drop;
        if p == 0.0 {
            return None;
        }
        let keep = R::lit(1.0 / (1.0 - p));
        let mut layer = |n: usize| (0..n).map(|_| if rng.gen::<f64>() < p { R::zero() } else { keep }).collect();
        let first = layer(self.plan.fcs[0].fan_in);
        let second = layer(self.plan.fcs[1].fan_in);
        Some(DropoutMasks { layers: [first, second] })
    }

    /// Convolutional trunk: flattened features for an input in [0, 1].
    pub fn features(&self, input: &[f32]) -> Result<Vec<R>> {
        self.check_input(input)?;
        let mut x = normalize(input);
        for c in &self.plan.convs {
            let mut cols = Vec::new();
            let act = self.conv_forward(c, &x, &mut cols);
            x = if c.spec.pool { max_pool(&act, c.spec.out_channels, c.out_h, c.out_w).0 } else { act };
        }
        Ok(x)
    }

    /// Class probabilities from trunk features.
    pub fn head(&self, features: &[R], masks: Option<&DropoutMasks<R>>) -> [R; NUM_CLASSES] {
        let mut x = features.to_vec();
        let last = self.plan.fcs.len() - 1;
        for (j, f) in self.plan.fcs.iter().enumerate() {
            if let (Some(m), true) = (masks, j < 2) {
                apply_mask(&mut x, &m.layers[j]);
            }
            let mut y = self.fc_forward(f, &x);
            if j < last {
                relu(&mut y);
            }
            x = y;
        }
        softmax(&x)
    }

    pub fn forward(&self, input: &[f32], masks: Option<&DropoutMasks<R>>) -> Result<[R; NUM_CLASSES]> {
        if let Some(m) = masks {
            self.check_masks(m)?;
        }
        Ok(self.head(&self.features(input)?, masks))
    }

    /// Output of the second fully connected layer (post-ReLU), no dropout.
    pub fn embedding(&self, input: &[f32]) -> Result<Vec<R>> {
        let mut x = self.features(input)?;
        for f in &self.plan.fcs[..2] {
            x = self.fc_forward(f, &x);
            relu(&mut x);
        }
        Ok(x)
    }

    fn check_masks(&self, m: &DropoutMasks<R>) -> Result<()> {
        for (j, layer) in m.layers.iter().enumerate() {
            if layer.len() != self.plan.fcs[j].fan_in {
                return Err(Error::ShapeMismatch {
                    expected: format!("dropout mask {j} of {}", self.plan.fcs[j].fan_in),
                    actual: format!("{}", layer.len()),
                });
            }
        }
        Ok(())
    }

    fn conv_forward(&self, c: &ConvPlan, x: &[R], cols: &mut Vec<R>) -> Vec<R> {
        let (k, n, oc) = (c.fan_in(), c.pixels(), c.spec.out_channels);
        cols.resize(k * n, R::zero());
        im2col(x, c, cols);
        let mut out = vec![R::zero(); oc * n];
        for (o, row) in out.chunks_exact_mut(n).enumerate() {
            row.fill(self.params[c.b_off + o]);
        }
        let w = &self.params[c.w_off..c.b_off];
        R::gemm(oc, k, n, R::one(), w, (k, 1), cols, (n, 1), R::one(), &mut out, (n, 1));
        relu(&mut out);
        out
    }

    fn fc_forward(&self, f: &FcPlan, x: &[R]) -> Vec<R> {
        let w = &self.params[f.w_off..f.b_off];
        (0..f.out)
            .map(|o| {
                let row = &w[o * f.fan_in..(o + 1) * f.fan_in];
                self.params[f.b_off + o] + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<R>()
            })
            .collect()
    }

    fn trace(&self, input: &[f32], masks: Option<&DropoutMasks<R>>) -> Result<Trace<R>> {
        self.check_input(input)?;
        if let Some(m) = masks {
            self.check_masks(m)?;
        }
        let mut t = Trace {
            cols: vec![],
            acts: vec![],
            pool_idx: vec![],
            fc_in: vec![],
            hidden: vec![],
            probs: [R::zero(); NUM_CLASSES],
        };
        let mut x = normalize(input);
        for c in &self.plan.convs {
            let mut cols = Vec::new();
            let act = self.conv_forward(c, &x, &mut cols);
            let (next, idx) =
                if c.spec.pool { max_pool(&act, c.spec.out_channels, c.out_h, c.out_w) } else { (act.clone(), vec![]) };
            t.cols.push(cols);
            t.acts.push(act);
            t.pool_idx.push(idx);
            x = next;
        }
        let last = self.plan.fcs.len() - 1;
        for (j, f) in self.plan.fcs.iter().enumerate() {
            if let (Some(m), true) = (masks, j < 2) {
                apply_mask(&mut x, &m.layers[j]);
            }
            let mut y = self.fc_forward(f, &x);
            t.fc_in.push(x);
            if j < last {
                relu(&mut y);
                t.hidden.push(y.clone());
            }
            x = y;
        }
        t.probs = softmax(&x);
        Ok(t)
    }

    /// Weighted cross-entropy `-weight * ln p[label]` of one sample; adds its
    /// gradient to `grad` and returns the loss.
    pub fn loss_and_grad(
        &self,
        input: &[f32],
        label: OutcomeClass,
        weight: R,
        masks: Option<&DropoutMasks<R>>,
        grad: &mut [R],
    ) -> Result<R> {
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient slots", self.params.len()),
                actual: format!("{}", grad.len()),
            });
        }
        let t = self.trace(input, masks)?;
        let y = label.index();
        let loss = -weight * t.probs[y].max(R::min_positive_value()).ln();

        let mut delta: Vec<R> = t.probs.iter().map(|&p| p * weight).collect();
        delta[y] -= weight;
        for (j, f) in self.plan.fcs.iter().enumerate().rev() {
            let x = &t.fc_in[j];
            for (o, &d) in delta.iter().enumerate() {
                if d == R::zero() {
                    continue;
                }
                grad[f.b_off + o] += d;
                let g = &mut grad[f.w_off + o * f.fan_in..f.w_off + (o + 1) * f.fan_in];
                for (gi, &xi) in g.iter_mut().zip(x) {
                    *gi += d * xi;
                }
            }
            let w = &self.params[f.w_off..f.b_off];
            let mut back = vec![R::zero(); f.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == R::zero() {
                    continue;
                }
                for (b, &wi) in back.iter_mut().zip(&w[o * f.fan_in..(o + 1) * f.fan_in]) {
                    *b += d * wi;
                }
            }
            if let (Some(m), true) = (masks, j < 2) {
                apply_mask(&mut back, &m.layers[j]);
            }
            if j > 0 {
                for (b, &h) in back.iter_mut().zip(&t.hidden[j - 1]) {
                    if h <= R::zero() {
                        *b = R::zero();
                    }
                }
            }
            delta = back;
        }

        for (l, c) in self.plan.convs.iter().enumerate().rev() {
            let (oc, n, k) = (c.spec.out_channels, c.pixels(), c.fan_in());
            let act = &t.acts[l];
            let mut d_act = if c.spec.pool {
                let mut d = vec![R::zero(); act.len()];
                for (&i, &g) in t.pool_idx[l].iter().zip(&delta) {
                    d[i as usize] += g;
                }
                d
            } else {
                delta
            };
            for (d, &a) in d_act.iter_mut().zip(act) {
                if a <= R::zero() {
                    *d = R::zero();
                }
            }
            for (o, row) in d_act.chunks_exact(n).enumerate() {
                grad[c.b_off + o] += row.iter().copied().sum::<R>();
            }
            let cols = &t.cols[l];
            R::gemm(oc, n, k, R::one(), &d_act, (n, 1), cols, (1, n), R::one(), &mut grad[c.w_off..c.b_off], (k, 1));
            if l == 0 {
                break;
            }
            let w = &self.params[c.w_off..c.b_off];
            let mut dcols = vec![R::zero(); k * n];
            R::gemm(k, oc, n, R::one(), w, (1, k), &d_act, (n, 1), R::zero(), &mut dcols, (n, 1));
            delta = col2im(&dcols, c);
        }
        Ok(loss)
    }

    /// ReLU on/off states and pooling winners for one input: two inputs with
    /// the same pattern lie in the same linear piece of the network.
    pub fn activation_pattern(&self, input: &[f32], masks: Option<&DropoutMasks<R>>) -> Result<Vec<u32>> {
        let t = self.trace(input, masks)?;
        let mut out = Vec::new();
        for (act, idx) in t.acts.iter().zip(&t.pool_idx) {
            out.extend(act.iter().map(|&a| (a > R::zero()) as u32));
            out.extend_from_slice(idx);
        }
        for h in &t.hidden {
            out.extend(h.iter().map(|&a| (a > R::zero()) as u32));
        }
        Ok(out)
    }
}

fn normalize<R: Real>(input: &[f32]) -> Vec<R> {
    input.iter().map(|&v| R::lit(v as f64 - 0.5)).collect()
}

fn relu<R: Real>(x: &mut [R]) {
    for v in x {
        if *v < R::zero() {
            *v = R::zero();
        }
    }
}

fn apply_mask<R: Real>(x: &mut [R], mask: &[R]) {
    for (v, &m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}

pub fn softmax<R: Real>(logits: &[R]) -> [R; NUM_CLASSES] {
    let max = logits.iter().copied().fold(R::neg_infinity(), R::max);
    let mut out = [R::zero(); NUM_CLASSES];
    let mut sum = R::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o = *o / sum;
    }
    out
}

fn im2col<R: Real>(x: &[R], c: &ConvPlan, cols: &mut [R]) {
    let (k, s, p) = (c.spec.kernel, c.spec.stride, c.spec.padding as isize);
    let n = c.pixels();
    for ci in 0..c.in_c {
        let plane = &x[ci * c.in_h * c.in_w..(ci + 1) * c.in_h * c.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..c.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let drow = &mut dst[oy * c.out_w..(oy + 1) * c.out_w];
                    if iy < 0 || iy >= c.in_h as isize {
                        drow.fill(R::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * c.in_w..(iy as usize + 1) * c.in_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix >= 0 && ix < c.in_w as isize { src[ix as usize] } else { R::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<R: Real>(cols: &[R], c: &ConvPlan) -> Vec<R> {
    let (k, s, p) = (c.spec.kernel, c.spec.stride, c.spec.padding as isize);
    let n = c.pixels();
    let mut x = vec![R::zero(); c.in_c * c.in_h * c.in_w];
    for ci in 0..c.in_c {
        let plane = &mut x[ci * c.in_h * c.in_w..(ci + 1) * c.in_h * c.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..c.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= c.in_h as isize {
                        continue;
                    }
                    let row = &mut plane[iy as usize * c.in_w..(iy as usize + 1) * c.in_w];
                    for ox in 0..c.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < c.in_w as isize {
                            row[ix as usize] += src[oy * c.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2x2, stride 2, floor; returns the pooled map and each output's source
/// index (first maximum wins).
fn max_pool<R: Real>(x: &[R], channels: usize, h: usize, w: usize) -> (Vec<R>, Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * ph * pw);
    let mut idx = Vec::with_capacity(channels * ph * pw);
    for c in 0..channels {
        let base = c * h * w;
        for py in 0..ph {
            for px in 0..pw {
                let mut best = base + 2 * py * w + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * py + dy) * w + 2 * px + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// Read access to a labeled patch collection.
pub trait PatchSource: Sync {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> OutcomeClass;
    /// Writes patch `i` (values in [0, 1], row-major) into `out`.
    fn fill(&self, i: usize, out: &mut [f32]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for i in 0..self.len() {
            counts[self.label(i).index()] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-class loss weights; inverse frequency (clamped to [1, 100]) when
    /// absent.
    pub class_weights: Option<[f64; NUM_CLASSES]>,
    /// Draw this many samples (without replacement) per epoch instead of a
    /// full pass.
    pub samples_per_epoch: Option<usize>,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.85,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            class_weights: None,
            samples_per_epoch: None,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train.momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::invalid("train.weight_decay", "weight_decay >= 0 and lr_decay > 0 required"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train.epochs", "epochs and batch_size must be positive"));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid("train.class_weights", "must be finite and non-negative"));
            }
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::invalid("train.samples_per_epoch", "must be positive"));
        }
        Ok(())
    }
}

/// `clamp(N_max / N_c, 1, 100)`; a class with no samples is an error.
pub fn inverse_frequency_weights(counts: [usize; NUM_CLASSES]) -> Result<[f64; NUM_CLASSES]> {
    let max = *counts.iter().max().unwrap() as f64;
    let mut w = [0.0; NUM_CLASSES];
    for (i, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::invalid(
                "train.class_weights",
                format!("no {} samples; supply explicit class weights", OutcomeClass::ALL[i]),
            ));
        }
        w[i] = (max / n as f64).clamp(1.0, 100.0);
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub class_weights: [f64; NUM_CLASSES],
    pub class_counts: [usize; NUM_CLASSES],
}

/// Mini-batch SGD with momentum on the class-weighted cross-entropy
/// (normalized by each batch's total weight), with
/// dropout active. Single-threaded and deterministic given the seed;
/// `on_epoch` sees each epoch's mean loss.
pub fn train(
    net: &mut Network<f32>,
    data: &dyn PatchSource,
    hyper: &TrainParams,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let counts = data.class_counts();
    let weights = match hyper.class_weights {
        Some(w) => w,
        None => inverse_frequency_weights(counts)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = hyper.samples_per_epoch.unwrap_or(data.len()).min(data.len());
    let mut velocity = vec![0.0f32; net.num_params()];
    let mut grad = vec![0.0f32; net.num_params()];
    let mut patch = vec![0.0f32; net.spec.input_len()];
    let mut lr = hyper.learning_rate;
    let mut losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        // partial Fisher-Yates: the first `per_epoch` slots become the sample
        for i in 0..per_epoch {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        let mut total = 0.0f64;
        for (batch, chunk) in order[..per_epoch].chunks(hyper.batch_size).enumerate() {
            grad.fill(0.0);
            // weighted mean: rare classes count more without inflating the step
            let weight_sum: f64 = chunk.iter().map(|&i| weights[data.label(i).index()]).sum();
            if weight_sum == 0.0 {
                continue;
            }
            let mut batch_loss = 0.0f64;
            for &i in chunk {
                data.fill(i, &mut patch);
                let label = data.label(i);
                let masks = net.sample_masks(&mut rng);
                let w = (weights[label.index()] / weight_sum) as f32;
                batch_loss += net.loss_and_grad(&patch, label, w, masks.as_ref(), &mut grad)? as f64;
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            total += batch_loss * chunk.len() as f64;
            let (lr32, mu, wd) = (lr as f32, hyper.momentum as f32, hyper.weight_decay as f32);
            for ((p, v), &g) in net.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = mu * *v - lr32 * (g + wd * *p);
                *p += *v;
            }
        }
        let mean = total / per_epoch as f64;
        losses.push(mean);
        on_epoch(epoch, mean);
        lr *= hyper.lr_decay;
    }
    Ok(TrainReport { epoch_losses: losses, class_weights: weights, class_counts: counts })
}
