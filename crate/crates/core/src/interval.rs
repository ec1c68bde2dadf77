//! Interval bound propagation and certified confidence upper bounds.
//!
//! Two propagation paths share the same semantics:
//!
//! * [`propagate_affine`] / [`propagate_conv`] work on plain tensors with
//!   the weights split by sign, `upper = W⁺u + W⁻l + b`. [`certify`] uses
//!   these. With a fixed batch shape every step is monotone in the input
//!   box even under float rounding, so certified bounds never decrease as
//!   ε grows.
//! * [`training_logit_diff_bounds`] records the center/radius form
//!   `c' = Wc + b`, `r' = |W|r` on an autodiff [`Graph`]. It needs half the
//!   matrix products and agrees with the split form in exact arithmetic.
//!
//! The final affine layer is never bounded on its own. Instead the bounds
//! on every logit difference `f_k − f_l` are taken directly from the
//! penultimate interval, which is tighter.
//!
//! ```
//! use certood::interval::{certify, input_interval};
//! use certood::network::{forward, NetworkSpec, ParamStore};
//! use certood::metrics::confidence;
//! use certood::Tensor;
//!
//! let spec = NetworkSpec::mlp(4, &[8], 3).unwrap();
//! let params = ParamStore::init(&spec, 1);
//! let x = Tensor::new(vec![1, 1, 1, 4], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
//!
//! let clean = confidence(forward(&spec, &params, &x).unwrap().row(0));
//! let at_zero = certify(&spec, &params, &x, 0.0, true).unwrap()[0];
//! let at_tenth = certify(&spec, &params, &x, 0.1, true).unwrap()[0];
//! assert!((clean - at_zero).abs() < 1e-6);
//! assert!(at_tenth >= at_zero);
//! # let _ = input_interval;
//! ```

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels;
use crate::network::{BoundParams, LayerSpec, NetworkSpec, ParamStore};
use crate::tensor::Tensor;

/// Pre-activation magnitudes above this raise [`Error::Numeric`].
pub const OVERFLOW_LIMIT: f32 = 1e30;

/// Elementwise lower and upper bounds of equal shape.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTensor {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalTensor {
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::dim("interval", lower.shape(), upper.shape()));
        }
        if let Some(i) = lower
            .data()
            .iter()
            .zip(upper.data())
            .position(|(l, u)| !(l <= u))
        {
            return Err(Error::Contract(format!(
                "interval entry {i} has lower {} > upper {}",
                lower.data()[i],
                upper.data()[i]
            )));
        }
        Ok(IntervalTensor { lower, upper })
    }

    /// The degenerate interval `[x, x]`.
    pub fn point(x: Tensor) -> Self {
        IntervalTensor {
            lower: x.clone(),
            upper: x,
        }
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    pub fn contains(&self, x: &Tensor) -> bool {
        x.shape() == self.shape()
            && x.data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    fn map_both(self, f: impl Fn(Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(IntervalTensor {
            lower: f(self.lower)?,
            upper: f(self.upper)?,
        })
    }
}

/// `[x − ε, x + ε]`, or its intersection with `[0, 1]` when `clip` is set.
pub fn input_interval(x: &Tensor, epsilon: f32, clip: bool) -> Result<IntervalTensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::Contract(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let (lower, upper) = if clip {
        (
            x.map(|v| (v - epsilon).max(0.0)),
            x.map(|v| (v + epsilon).min(1.0)),
        )
    } else {
        (x.map(|v| v - epsilon), x.map(|v| v + epsilon))
    };
    Ok(IntervalTensor { lower, upper })
}

fn sign_split(w: &Tensor) -> (Tensor, Tensor) {
    (w.map(|v| v.max(0.0)), w.map(|v| v.min(0.0)))
}

fn add(a: Tensor, b: &Tensor) -> Tensor {
    let mut a = a;
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    a
}

fn finish(lower: Tensor, upper: Tensor, relu: bool) -> IntervalTensor {
    if relu {
        IntervalTensor {
            lower: kernels::relu(&lower),
            upper: kernels::relu(&upper),
        }
    } else {
        IntervalTensor { lower, upper }
    }
}

/// Bounds of `σ(W·z + b)` over `z ∈ iv`, with `σ` the ReLU when
/// `apply_relu` is set and the identity otherwise.
pub fn propagate_affine(
    iv: &IntervalTensor,
    weight: &Tensor,
    bias: &Tensor,
    apply_relu: bool,
) -> Result<IntervalTensor> {
    kernels::check_affine(iv.lower(), weight, Some(bias))?;
    let (wp, wn) = sign_split(weight);
    let upper = add(
        kernels::affine(iv.upper(), &wp, Some(bias))?,
        &kernels::affine(iv.lower(), &wn, None)?,
    );
    let lower = add(
        kernels::affine(iv.lower(), &wp, Some(bias))?,
        &kernels::affine(iv.upper(), &wn, None)?,
    );
    Ok(finish(lower, upper, apply_relu))
}

/// As [`propagate_affine`] with a 3×3, padding-1 convolution.
pub fn propagate_conv(
    iv: &IntervalTensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    apply_relu: bool,
) -> Result<IntervalTensor> {
    let (kp, kn) = sign_split(kernel);
    let upper = add(
        kernels::conv2d(iv.upper(), &kp, Some(bias), stride)?,
        &kernels::conv2d(iv.lower(), &kn, None, stride)?,
    );
    let lower = add(
        kernels::conv2d(iv.lower(), &kp, Some(bias), stride)?,
        &kernels::conv2d(iv.upper(), &kn, None, stride)?,
    );
    Ok(finish(lower, upper, apply_relu))
}

/// Upper bounds on all `K²` logit differences of one sample. Entry
/// `(k, l)` bounds `f_k − f_l`; the diagonal is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitDiffBounds {
    classes: usize,
    data: Vec<f32>,
}

impl LogitDiffBounds {
    pub fn new(classes: usize, data: Vec<f32>) -> Result<Self> {
        if classes == 0 || data.len() != classes * classes {
            return Err(Error::dim(
                "logit difference bounds",
                &[data.len()],
                &[classes, classes],
            ));
        }
        Ok(LogitDiffBounds { classes, data })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, k: usize, l: usize) -> f32 {
        self.data[k * self.classes + l]
    }

    /// Row-major `K × K` entries.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Weight and bias rows `W_k − W_l`, `b_k − b_l` for every pair `(k, l)`.
fn pair_differences(weight: &Tensor, bias: &Tensor) -> (Tensor, Tensor) {
    let (k, n) = (weight.shape()[0], weight.shape()[1]);
    let mut dw = Vec::with_capacity(k * k * n);
    let mut db = Vec::with_capacity(k * k);
    for a in 0..k {
        for b in 0..k {
            dw.extend(weight.row(a).iter().zip(weight.row(b)).map(|(p, q)| p - q));
            db.push(bias.data()[a] - bias.data()[b]);
        }
    }
    (
        Tensor::from_parts(vec![k * k, n], dw),
        Tensor::from_parts(vec![k * k], db),
    )
}

/// Logit-difference bounds for each sample of a `[B, n]` penultimate
/// interval (post-activation) and the final affine layer.
pub fn logit_diff_upper_bounds(
    penultimate: &IntervalTensor,
    last_weight: &Tensor,
    last_bias: &Tensor,
) -> Result<Vec<LogitDiffBounds>> {
    kernels::check_affine(penultimate.lower(), last_weight, Some(last_bias))?;
    let k = last_weight.shape()[0];
    let (dw, db) = pair_differences(last_weight, last_bias);
    let (dp, dn) = sign_split(&dw);
    let ub = add(
        kernels::affine(penultimate.upper(), &dp, Some(&db))?,
        &kernels::affine(penultimate.lower(), &dn, None)?,
    );
    Ok((0..ub.batch())
        .map(|b| LogitDiffBounds {
            classes: k,
            data: ub.row(b).to_vec(),
        })
        .collect())
}

/// `max_k −log Σ_l exp(−ub[k, l])`, an upper bound on the log confidence.
pub fn certified_log_conf_upper(bounds: &LogitDiffBounds) -> f64 {
    let k = bounds.classes;
    (0..k)
        .map(|a| {
            let row = &bounds.data[a * k..(a + 1) * k];
            let m = row.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
            let s: f64 = row.iter().map(|&v| (m - v as f64).exp()).sum();
            m - s.ln()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `max_{k,l} ub[k, l]`, the quantity penalized during training.
pub fn training_bound(bounds: &LogitDiffBounds) -> f32 {
    crate::autodiff::first_argmax(&bounds.data).1
}

fn check_overflow(iv: &IntervalTensor, layer: usize) -> Result<()> {
    let worst = iv.lower.max_abs().max(iv.upper.max_abs());
    if !(worst <= OVERFLOW_LIMIT) {
        return Err(Error::Numeric {
            layer,
            detail: format!("interval magnitude {worst:e} exceeds {OVERFLOW_LIMIT:e}"),
        });
    }
    Ok(())
}

/// Propagates a batch interval through every layer but the last and
/// returns the post-activation penultimate interval, flattened to `[B, n]`.
pub fn propagate_to_penultimate(
    spec: &NetworkSpec,
    params: &ParamStore,
    input: IntervalTensor,
) -> Result<IntervalTensor> {
    params.check(spec)?;
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut iv = input;
    let mut p = params.layers.iter();
    for (i, layer) in layers[..last].iter().enumerate() {
        iv = match *layer {
            LayerSpec::Conv { stride, .. } => {
                let l = p.next().expect("validated layer count");
                propagate_conv(&iv, &l.weight, &l.bias, stride, false)?
            }
            LayerSpec::Affine { .. } => {
                let l = p.next().expect("validated layer count");
                propagate_affine(&iv, &l.weight, &l.bias, false)?
            }
            LayerSpec::Relu => finish(iv.lower, iv.upper, true),
            LayerSpec::Flatten => {
                let shape = [iv.shape()[0], iv.lower.item_len()];
                iv.map_both(|t| t.reshape(&shape))?
            }
        };
        if layer.has_params() {
            check_overflow(&iv, i)?;
        }
    }
    if iv.lower.rank() != 2 {
        let shape = [iv.shape()[0], iv.lower.item_len()];
        iv = iv.map_both(|t| t.reshape(&shape))?;
    }
    Ok(iv)
}

/// Logit-difference bounds for every sample of `x` over its ε-box.
pub fn network_logit_diff_bounds(
    spec: &NetworkSpec,
    params: &ParamStore,
    x: &Tensor,
    epsilon: f32,
    clip: bool,
) -> Result<Vec<LogitDiffBounds>> {
    spec.check_batch(x)?;
    let pen = propagate_to_penultimate(spec, params, input_interval(x, epsilon, clip)?)?;
    let last = params.layers.last().expect("at least one layer");
    let bounds = logit_diff_upper_bounds(&pen, &last.weight, &last.bias)?;
    let last_index = spec.layers().len() - 1;
    for b in &bounds {
        if b.data
            .iter()
            .any(|v| !v.is_finite() || v.abs() > OVERFLOW_LIMIT)
        {
            return Err(Error::Numeric {
                layer: last_index,
                detail: "logit difference bound is not finite".into(),
            });
        }
    }
    Ok(bounds)
}

/// Upper bounds on the confidence over the ε-box around each sample of a
/// `[B, C, H, W]` batch. Each value lies in `[1/K, 1]`.
///
/// Bounds are widened by [`CERTIFY_SLACK`] (relative) and rounded upward
/// to cover `f32` rounding in the propagation.
pub fn certify(
    spec: &NetworkSpec,
    params: &ParamStore,
    x: &Tensor,
    epsilon: f32,
    clip: bool,
) -> Result<Vec<f32>> {
    Ok(network_logit_diff_bounds(spec, params, x, epsilon, clip)?
        .iter()
        .map(|b| round_up(certified_log_conf_upper(b).exp() * (1.0 + CERTIFY_SLACK)).min(1.0))
        .collect())
}

/// Relative widening of certified confidences: four `f32` ulps.
pub const CERTIFY_SLACK: f64 = 4.0 * f32::EPSILON as f64;

fn round_up(v: f64) -> f32 {
    let r = v as f32;
    if (r as f64) < v {
        r.next_up()
    } else {
        r
    }
}

/// [`certify`] over a large batch in chunks of `chunk` samples.
pub fn certify_chunked(
    spec: &NetworkSpec,
    params: &ParamStore,
    x: &Tensor,
    epsilon: f32,
    clip: bool,
    chunk: usize,
) -> Result<Vec<f32>> {
    let n = x.batch();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        out.extend(certify(spec, params, &x.select(&idx)?, epsilon, clip)?);
    }
    Ok(out)
}

/// Records IBP on `graph` in center/radius form and returns the `[B, K²]`
/// logit-difference upper bounds node (row-major `(k, l)` per sample).
///
/// The input box is `[x − ε, x + ε]` without clipping. With `ε = 0` the
/// radius is never materialized and the result is the plain logit
/// differences of the forward pass.
pub fn training_logit_diff_bounds(
    graph: &mut Graph,
    spec: &NetworkSpec,
    params: &BoundParams,
    x: NodeId,
    epsilon: f32,
) -> Result<NodeId> {
    spec.check_batch(graph.value(x))?;
    if !(epsilon >= 0.0) {
        return Err(Error::Contract(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut center = x;
    let mut radius =
        (epsilon > 0.0).then(|| graph.constant(Tensor::full(graph.value(x).shape(), epsilon)));
    let mut p = params.layers.iter();
    for (i, layer) in layers[..last].iter().enumerate() {
        match *layer {
            LayerSpec::Conv { stride, .. } => {
                let &(w, b) = p.next().expect("validated layer count");
                center = graph.conv2d(center, w, Some(b), stride)?;
                if let Some(r) = radius {
                    let aw = graph.abs(w);
                    radius = Some(graph.conv2d(r, aw, None, stride)?);
                }
            }
            LayerSpec::Affine { .. } => {
                let &(w, b) = p.next().expect("validated layer count");
                center = graph.affine(center, w, Some(b))?;
                if let Some(r) = radius {
                    let aw = graph.abs(w);
                    radius = Some(graph.affine(r, aw, None)?);
                }
            }
            LayerSpec::Relu => match radius {
                None => center = graph.relu(center),
                Some(r) => {
                    let lo = graph.sub(center, r)?;
                    let hi = graph.add(center, r)?;
                    let (lo, hi) = (graph.relu(lo), graph.relu(hi));
                    let sum = graph.add(hi, lo)?;
                    let diff = graph.sub(hi, lo)?;
                    center = graph.scale(sum, 0.5);
                    radius = Some(graph.scale(diff, 0.5));
                }
            },
            LayerSpec::Flatten => {
                center = graph.flatten(center)?;
                radius = radius.map(|r| graph.flatten(r)).transpose()?;
            }
        }
        if layer.has_params() {
            let mut worst = graph.value(center).max_abs();
            if let Some(r) = radius {
                worst += graph.value(r).max_abs();
            }
            if !(worst <= OVERFLOW_LIMIT) {
                return Err(Error::Numeric {
                    layer: i,
                    detail: format!("interval magnitude {worst:e} exceeds {OVERFLOW_LIMIT:e}"),
                });
            }
        }
    }
    if graph.value(center).rank() != 2 {
        center = graph.flatten(center)?;
        radius = radius.map(|r| graph.flatten(r)).transpose()?;
    }
    let &(w, b) = p.next().expect("validated layer count");
    let dw = graph.pair_diff(w);
    let db = graph.pair_diff(b);
    let mut ub = graph.affine(center, dw, Some(db))?;
    if let Some(r) = radius {
        let adw = graph.abs(dw);
        let spread = graph.affine(r, adw, None)?;
        ub = graph.add(ub, spread)?;
    }
    let worst = graph.value(ub).max_abs();
    if !(worst <= OVERFLOW_LIMIT) {
        return Err(Error::Numeric {
            layer: last,
            detail: format!("logit difference bound {worst:e} exceeds {OVERFLOW_LIMIT:e}"),
        });
    }
    Ok(ub)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::forward;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn input_interval_examples() {
        let x = t(&[1], &[0.99]);
        let iv = input_interval(&x, 0.3, true).unwrap();
        assert!((iv.lower().data()[0] - 0.69).abs() < 1e-6);
        assert_eq!(iv.upper().data()[0], 1.0);

        let iv = input_interval(&t(&[1], &[0.5]), 0.3, false).unwrap();
        assert!((iv.lower().data()[0] - 0.2).abs() < 1e-6);
        assert!((iv.upper().data()[0] - 0.8).abs() < 1e-6);

        let x = t(&[3], &[0.1, 0.5, 0.9]);
        let iv = input_interval(&x, 0.0, true).unwrap();
        assert_eq!(iv.lower(), &x);
        assert_eq!(iv.upper(), &x);
    }

    #[test]
    fn negative_epsilon_is_contract_error() {
        let x = t(&[1], &[0.5]);
        assert!(matches!(
            input_interval(&x, -0.1, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sign_split_example() {
        let iv = IntervalTensor::new(t(&[1, 2], &[0., 0.]), t(&[1, 2], &[1., 1.])).unwrap();
        let w = t(&[1, 2], &[1., -1.]);
        let b = t(&[1], &[0.]);
        let pre = propagate_affine(&iv, &w, &b, false).unwrap();
        assert_eq!((pre.lower().data()[0], pre.upper().data()[0]), (-1.0, 1.0));
        let post = propagate_affine(&iv, &w, &b, true).unwrap();
        assert_eq!((post.lower().data()[0], post.upper().data()[0]), (0.0, 1.0));
    }

    #[test]
    fn degenerate_interval_is_exact_affine() {
        let x = t(&[1, 3], &[0.5, -1.0, 2.0]);
        let w = t(&[2, 3], &[1., 2., 3., -1., 0.5, 0.25]);
        let b = t(&[2], &[0.5, -0.5]);
        let out = propagate_affine(&IntervalTensor::point(x.clone()), &w, &b, false).unwrap();
        let exact = kernels::affine(&x, &w, Some(&b)).unwrap();
        assert_eq!(out.lower(), &exact);
        assert_eq!(out.upper(), &exact);
    }

    #[test]
    fn all_ones_kernel_on_unit_box() {
        let lo = Tensor::zeros(&[1, 1, 4, 4]);
        let hi = Tensor::full(&[1, 1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let out = propagate_conv(
            &IntervalTensor::new(lo.clone(), hi.clone()).unwrap(),
            &k,
            &b,
            1,
            false,
        )
        .unwrap();
        assert_eq!(out.upper(), &kernels::conv2d(&hi, &k, Some(&b), 1).unwrap());
        assert_eq!(out.lower(), &kernels::conv2d(&lo, &k, Some(&b), 1).unwrap());
    }

    #[test]
    fn uniform_bounds_give_minus_log_k() {
        let b = LogitDiffBounds::new(4, vec![0.0; 16]).unwrap();
        assert!((certified_log_conf_upper(&b) + 4f64.ln()).abs() < 1e-12);
        assert_eq!(training_bound(&b), 0.0);
    }

    #[test]
    fn training_bound_picks_dominant_entry() {
        let mut data = vec![0.0; 9];
        data[5] = 3.5;
        data[7] = -2.0;
        assert_eq!(training_bound(&LogitDiffBounds::new(3, data).unwrap()), 3.5);
    }

    #[test]
    fn diagonal_is_exactly_zero() {
        let spec = NetworkSpec::mlp(5, &[6], 4).unwrap();
        let params = ParamStore::init(&spec, 3);
        let x = Tensor::full(&[2, 1, 1, 5], 0.3);
        for b in network_logit_diff_bounds(&spec, &params, &x, 0.2, false).unwrap() {
            for k in 0..4 {
                assert_eq!(b.get(k, k), 0.0);
            }
        }
    }

    #[test]
    fn epsilon_zero_bounds_are_logit_differences() {
        let spec = NetworkSpec::mlp(3, &[5], 3).unwrap();
        let params = ParamStore::init(&spec, 11);
        let x = t(&[1, 1, 1, 3], &[0.2, 0.9, 0.4]);
        let logits = forward(&spec, &params, &x).unwrap();
        let b = &network_logit_diff_bounds(&spec, &params, &x, 0.0, true).unwrap()[0];
        for k in 0..3 {
            for l in 0..3 {
                let d = logits.data()[k] - logits.data()[l];
                assert!((b.get(k, l) - d).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn overflow_reports_layer() {
        let spec = NetworkSpec::mlp(2, &[2], 2).unwrap();
        let mut params = ParamStore::init(&spec, 0);
        params.layers[0].weight = Tensor::full(&[2, 2], 1e30);
        let x = Tensor::full(&[1, 1, 1, 2], 1.0);
        match certify(&spec, &params, &x, 0.5, false) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn training_form_matches_split_form() {
        let spec = NetworkSpec::mlp(4, &[6, 5], 3).unwrap();
        let params = ParamStore::init(&spec, 5);
        let x = t(&[2, 1, 1, 4], &[0.1, 0.2, 0.7, 0.4, 0.9, 0.3, 0.5, 0.0]);
        let split = network_logit_diff_bounds(&spec, &params, &x, 0.05, false).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, false);
        let xn = g.constant(x);
        let ub = training_logit_diff_bounds(&mut g, &spec, &bound, xn, 0.05).unwrap();
        for (b, s) in split.iter().enumerate() {
            for (a, c) in g.value(ub).row(b).iter().zip(s.as_slice()) {
                assert!((a - c).abs() < 1e-5, "{a} vs {c}");
            }
        }
    }
}
