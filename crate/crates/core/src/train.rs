//! Optimizers, ramp schedules and the training loop.
//!
//! Losses are mean-reduced over each half of the batch, so learning rates
//! are not divided by the batch size.
//!
//! ```
//! use certood::train::Schedule;
//!
//! let ramp = Schedule::new(2.0, 10.0, 0.0, 0.3).unwrap();
//! assert_eq!(ramp.value(0, 0.5), 0.0);
//! assert!((ramp.value(6, 0.0) - 0.15).abs() < 1e-6);
//! assert_eq!(ramp.value(12, 0.0), 0.3);
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::data::{assemble, augment_batch, AugmentConfig, Batcher, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    acet_outer_loss, ceda_loss, cross_entropy, good_objective, oe_loss, GoodBatch,
};
use crate::metrics::predictions;
use crate::network::{
    forward_chunked, forward_graph, Architecture, BoundParams, LayerSpec, NetworkSpec, ParamStore,
};
use crate::tensor::Tensor;

/// Linear ramp from `(start_epoch, start_value)` to
/// `(end_epoch, end_value)`, constant outside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub start_epoch: f64,
    pub end_epoch: f64,
    pub start_value: f32,
    pub end_value: f32,
}

impl Schedule {
    pub fn new(start_epoch: f64, end_epoch: f64, start_value: f32, end_value: f32) -> Result<Self> {
        if !(start_epoch <= end_epoch) {
            return Err(Error::Config(format!(
                "schedule start epoch {start_epoch} is after end epoch {end_epoch}"
            )));
        }
        Ok(Schedule {
            start_epoch,
            end_epoch,
            start_value,
            end_value,
        })
    }

    pub fn constant(value: f32) -> Self {
        Schedule {
            start_epoch: 0.0,
            end_epoch: 0.0,
            start_value: value,
            end_value: value,
        }
    }

    /// Value at `epoch + frac`, with `frac ∈ [0, 1)` the position within
    /// the epoch.
    pub fn value(&self, epoch: usize, frac: f64) -> f32 {
        let t = epoch as f64 + frac;
        if t <= self.start_epoch {
            return self.start_value;
        }
        if t >= self.end_epoch {
            return self.end_value;
        }
        let a = (t - self.start_epoch) / (self.end_epoch - self.start_epoch);
        (self.start_value as f64 + a * (self.end_value as f64 - self.start_value as f64)) as f32
    }
}

/// Piecewise-constant learning rate divided by `divisor` at each drop epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f32,
    pub drops: Vec<usize>,
    pub divisor: f32,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f32 {
        let n = self.drops.iter().filter(|&&d| d <= epoch).count();
        self.initial / self.divisor.powi(n as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    SgdNesterov { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: LrSchedule,
    pub weight_decay: f32,
}

/// Nesterov SGD with the l2 penalty added to the gradient:
/// `g += wd·p; v = μv + g; p −= lr·(g + μv)`.
pub fn step_sgd_nesterov(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
}

/// Bias-corrected Adam with the l2 penalty added to the gradient. `t` is
/// the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn step_adam(
    params: &mut [f32],
    grads: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u32,
    lr: f32,
    (beta1, beta2, eps): (f32, f32, f32),
    weight_decay: f32,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        let g = g + weight_decay * *p;
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Optimizer state for every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u32,
}

impl Optimizer {
    pub fn new(config: OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Optimizer {
            config,
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        }
    }

    /// Applies one update; `grads` follow [`ParamStore::tensors`] order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f32) {
        self.steps += 1;
        let wd = self.config.weight_decay;
        for (i, (p, g)) in params.tensors_mut().zip(grads).enumerate() {
            match self.config.kind {
                OptimKind::SgdNesterov { momentum } => {
                    step_sgd_nesterov(p.data_mut(), g.data(), &mut self.first[i], lr, momentum, wd)
                }
                OptimKind::Adam { beta1, beta2, eps } => step_adam(
                    p.data_mut(),
                    g.data(),
                    &mut self.first[i],
                    &mut self.second[i],
                    self.steps,
                    lr,
                    (beta1, beta2, eps),
                    wd,
                ),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Plain,
    Oe,
    Ceda,
    Acet,
    Good,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "plain" => Method::Plain,
            "oe" => Method::Oe,
            "ceda" => Method::Ceda,
            "acet" => Method::Acet,
            "good" => Method::Good,
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Plain => "plain",
            Method::Oe => "oe",
            Method::Ceda => "ceda",
            Method::Acet => "acet",
            Method::Good => "good",
        })
    }
}

/// Network layout named in a config: `L`, `XL`, or a compact list such as
/// `custom:c8s2,c16s2,a64` (conv with out channels and stride, affine with
/// width). ReLUs, the flatten and the final class layer are added.
pub fn parse_architecture(
    text: &str,
    input: [usize; 3],
    classes: usize,
    width_divisor: usize,
) -> Result<NetworkSpec> {
    if let Some(list) = text.strip_prefix("custom:") {
        let bad = |item: &str| Error::Config(format!("bad layer {item:?} in {text:?}"));
        let mut layers = Vec::new();
        let mut flat = false;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if let Some(rest) = item.strip_prefix('c') {
                let (ch, stride) = rest.split_once('s').ok_or_else(|| bad(item))?;
                layers.push(LayerSpec::Conv {
                    out_channels: ch.parse().map_err(|_| bad(item))?,
                    stride: stride.parse().map_err(|_| bad(item))?,
                });
            } else if let Some(width) = item.strip_prefix('a') {
                if !flat {
                    layers.push(LayerSpec::Flatten);
                    flat = true;
                }
                layers.push(LayerSpec::Affine {
                    out_features: width.parse().map_err(|_| bad(item))?,
                });
            } else {
                return Err(bad(item));
            }
            layers.push(LayerSpec::Relu);
        }
        if !flat {
            layers.push(LayerSpec::Flatten);
        }
        layers.push(LayerSpec::Affine {
            out_features: classes,
        });
        return NetworkSpec::new(input, layers, classes);
    }
    let arch: Architecture = text.parse()?;
    NetworkSpec::scaled_architecture(arch, input, classes, width_divisor)
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub q: f64,
    pub epsilon: Schedule,
    pub kappa: Schedule,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub architecture: String,
    pub width_divisor: usize,
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub in_data: String,
    pub in_limit: Option<usize>,
    pub out_data: Vec<String>,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Defaults for the optional keys of a config file.
    pub fn defaults(method: Method, epochs: usize, in_data: String) -> Self {
        TrainConfig {
            method,
            q: 1.0,
            epsilon: Schedule::constant(0.0),
            kappa: Schedule::constant(1.0),
            epochs,
            warmup_epochs: 0,
            batch_size: 128,
            seed: 0,
            architecture: "L".into(),
            width_divisor: 1,
            input_shape: [1, 28, 28],
            classes: 10,
            optim: OptimConfig {
                kind: OptimKind::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                lr: LrSchedule {
                    initial: 1e-3,
                    drops: vec![],
                    divisor: 5.0,
                },
                weight_decay: 0.0,
            },
            augment: AugmentConfig::default(),
            in_data,
            in_limit: None,
            out_data: vec![],
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.q) {
            return bad(format!("q must lie in [0, 1], got {}", self.q));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.optim.lr.initial > 0.0)
            || !(self.optim.weight_decay >= 0.0)
            || !(self.optim.lr.divisor > 0.0)
        {
            return bad("lr and lr_divisor must be positive, weight_decay non-negative".into());
        }
        if self.method != Method::Plain && self.out_data.is_empty() {
            return bad(format!("method {} needs out_data", self.method));
        }
        for (name, s) in [("epsilon", &self.epsilon), ("kappa", &self.kappa)] {
            if s.start_value < 0.0 || s.end_value < 0.0 {
                return bad(format!("{name} schedule values must be non-negative"));
            }
        }
        self.network().map(|_| ())
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        parse_architecture(
            &self.architecture,
            self.input_shape,
            self.classes,
            self.width_divisor,
        )
    }

    /// Parses the flat `key = value` format (`#` starts a comment).
    ///
    /// Required keys: `method`, `epochs`, `in_data`. See the README for
    /// the full list.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            if kv
                .insert(k.trim().to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!("duplicate key {:?}", k.trim())));
            }
        }
        let mut take = |key: &str| kv.remove(key);
        let required = |v: Option<String>, key: &str| {
            v.ok_or_else(|| Error::Config(format!("missing key {key:?}")))
        };
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }

        let method: Method = required(take("method"), "method")?.parse()?;
        let epochs = num("epochs", &required(take("epochs"), "epochs")?)?;
        let in_data = required(take("in_data"), "in_data")?;
        let mut c = TrainConfig::defaults(method, epochs, in_data);

        macro_rules! opt {
            ($key:literal, $field:expr) => {
                if let Some(v) = take($key) {
                    $field = num($key, &v)?;
                }
            };
        }
        opt!("q", c.q);
        opt!("warmup_epochs", c.warmup_epochs);
        opt!("batch_size", c.batch_size);
        opt!("seed", c.seed);
        opt!("width_divisor", c.width_divisor);
        opt!("classes", c.classes);
        opt!("weight_decay", c.optim.weight_decay);
        opt!("lr", c.optim.lr.initial);
        opt!("lr_divisor", c.optim.lr.divisor);
        opt!("crop_pad", c.augment.crop_pad);
        opt!("hflip", c.augment.hflip);
        opt!("checkpoint_every", c.checkpoint_every);
        opt!("eps_start_epoch", c.epsilon.start_epoch);
        opt!("eps_end_epoch", c.epsilon.end_epoch);
        opt!("eps_start", c.epsilon.start_value);
        opt!("eps_end", c.epsilon.end_value);
        opt!("kappa_start_epoch", c.kappa.start_epoch);
        opt!("kappa_end_epoch", c.kappa.end_epoch);
        opt!("kappa_start", c.kappa.start_value);
        opt!("kappa_end", c.kappa.end_value);
        if let Some(v) = take("in_limit") {
            c.in_limit = Some(num("in_limit", &v)?);
        }
        if let Some(v) = take("architecture") {
            c.architecture = v;
        }
        if let Some(v) = take("lr_drops") {
            c.optim.lr.drops = list("lr_drops", &v)?;
        }
        if let Some(v) = take("input_shape") {
            let dims: Vec<usize> = list("input_shape", &v)?;
            c.input_shape = dims
                .try_into()
                .map_err(|_| Error::Config("input_shape needs three values C,H,W".into()))?;
        }
        if let Some(v) = take("out_data") {
            c.out_data = v
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
        }
        let momentum = take("momentum")
            .map(|v| num::<f32>("momentum", &v))
            .transpose()?;
        match take("optimizer").as_deref() {
            None | Some("adam") => {
                if momentum.is_some() {
                    return Err(Error::Config(
                        "momentum applies to optimizer = sgd only".into(),
                    ));
                }
            }
            Some("sgd") => {
                c.optim.kind = OptimKind::SgdNesterov {
                    momentum: momentum.unwrap_or(0.9),
                }
            }
            Some(other) => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        c.validate()?;
        Ok(c)
    }
}

/// Metrics of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce_loss: f64,
    pub ood_loss: f64,
    pub train_accuracy: f64,
    pub epsilon: f32,
    pub kappa: f32,
    pub lr: f32,
}

pub const LOG_HEADER: [&str; 7] = [
    "epoch",
    "ce_loss",
    "ood_loss",
    "train_acc",
    "epsilon",
    "kappa",
    "lr",
];

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let res: csv::Result<()> = (|| {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(LOG_HEADER)?;
        for e in log {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.ce_loss),
                format!("{:.6}", e.ood_loss),
                format!("{:.6}", e.train_accuracy),
                e.epsilon.to_string(),
                e.kappa.to_string(),
                e.lr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| Error::Contract(format!("writing {}: {e}", path.display())))
}

/// Where outputs go and where to start from.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `train_log.csv`, `last.ckpt` and periodic
    /// `epoch_NNNN.ckpt` files.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint (its epoch counter is kept).
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn wrap_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric { layer, detail } => Error::Diverged {
            epoch,
            batch,
            detail: format!("interval overflow at layer {layer}: {detail}"),
        },
        other => other,
    }
}

/// Runs the configured training. `out_ds` may be `None` for `plain`.
pub fn train(
    config: &TrainConfig,
    in_ds: &Dataset,
    out_ds: Option<&Dataset>,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.network()?;
    if in_ds.item_shape() != spec.input_shape() {
        return Err(Error::dim(
            "in-distribution",
            &in_ds.item_shape(),
            &spec.input_shape(),
        ));
    }
    let out_ds = match (config.method, out_ds) {
        (Method::Plain, o) => o,
        (_, Some(o)) => Some(o),
        (m, None) => {
            return Err(Error::Config(format!(
                "method {m} needs an out-distribution dataset"
            )))
        }
    };
    if let Some(o) = out_ds {
        if o.item_shape() != spec.input_shape() {
            return Err(Error::dim(
                "out-distribution",
                &o.item_shape(),
                &spec.input_shape(),
            ));
        }
    }

    let (mut params, start_epoch) = match &options.resume {
        Some(ck) => {
            if ck.spec != spec {
                return Err(Error::Config(
                    "resume checkpoint has a different network".into(),
                ));
            }
            (ck.params.clone(), ck.meta.epoch)
        }
        None => (ParamStore::init(&spec, config.seed), 0),
    };
    let mut optimizer = Optimizer::new(config.optim.clone(), &params);
    let out_len = out_ds.map_or(1, Dataset::len);
    let mut batcher = Batcher::new(in_ds.len(), out_len, config.batch_size, config.seed)?;
    for _ in 0..start_epoch {
        batcher.epoch();
    }
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut log = Vec::new();
    let mut meta = CheckpointMeta {
        epoch: start_epoch,
        q: config.q,
        seed: config.seed,
        ..Default::default()
    };
    for epoch in start_epoch..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let lr = config.optim.lr.lr(epoch);
        let batches = batcher.epoch();
        let nb = batches.len();
        let (mut ce_sum, mut ood_sum, mut correct, mut seen) = (0.0f64, 0.0f64, 0usize, 0usize);
        let (mut eps, mut kappa) = (0.0, 0.0);
        for (bi, (in_idx, out_idx)) in batches.iter().enumerate() {
            let frac = bi as f64 / nb as f64;
            let warm = epoch < config.warmup_epochs;
            eps = if warm {
                0.0
            } else {
                config.epsilon.value(epoch, frac)
            };
            kappa = if warm {
                0.0
            } else {
                config.kappa.value(epoch, frac)
            };

            let batch = match out_ds {
                Some(o) => assemble(in_ds, o, in_idx, out_idx)?,
                None => assemble(in_ds, in_ds, in_idx, in_idx)?,
            };
            let in_images = augment_batch(&batch.in_images, config.augment, &mut rng)?;

            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &params, true);
            let in_x = g.constant(in_images);
            let ood_active = !warm && config.method != Method::Plain;
            let (root, ce_value, ood_value, in_logits) = (|| -> Result<_> {
                if ood_active && config.method == Method::Good {
                    let out_x = g.constant(batch.out_images.clone());
                    let gb = GoodBatch {
                        in_x,
                        in_labels: &batch.in_labels,
                        out_x,
                    };
                    let (root, report) =
                        good_objective(&mut g, &spec, &bound, &gb, eps, kappa, config.q)?;
                    return Ok((
                        root,
                        report.ce_loss as f64,
                        report.ood_loss as f64,
                        report.in_logits,
                    ));
                }
                let logits = forward_graph(&mut g, &spec, &bound, in_x)?;
                let ce = cross_entropy(&mut g, logits, &batch.in_labels)?;
                let ce_value = g.value(ce).data()[0] as f64;
                if !ood_active {
                    return Ok((ce, ce_value, 0.0, logits));
                }
                let ood = match config.method {
                    Method::Oe => {
                        let out_x = g.constant(batch.out_images.clone());
                        let z = forward_graph(&mut g, &spec, &bound, out_x)?;
                        oe_loss(&mut g, z)?
                    }
                    Method::Ceda => {
                        let out_x = g.constant(batch.out_images.clone());
                        let z = forward_graph(&mut g, &spec, &bound, out_x)?;
                        ceda_loss(&mut g, z)?
                    }
                    Method::Acet => {
                        acet_outer_loss(&mut g, &spec, &params, &bound, &batch.out_images, eps)?.0
                    }
                    Method::Plain | Method::Good => unreachable!("handled above"),
                };
                let ood_value = g.value(ood).data()[0] as f64;
                let weighted = g.scale(ood, kappa);
                let root = g.add(ce, weighted)?;
                Ok((root, ce_value, ood_value, logits))
            })()
            .map_err(|e| wrap_divergence(e, epoch, bi))?;

            let total = g.value(root).data()[0];
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    detail: format!("total loss is {total}"),
                });
            }
            let preds = predictions(g.value(in_logits));
            correct += preds
                .iter()
                .zip(&batch.in_labels)
                .filter(|(p, y)| p == y)
                .count();
            seen += preds.len();
            ce_sum += ce_value;
            ood_sum += ood_value;

            let mut grads = g.backward(root)?;
            let grads: Vec<Tensor> = bound
                .ids()
                .zip(params.tensors())
                .map(|(id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            optimizer.step(&mut params, &grads, lr);
        }

        log.push(EpochLog {
            epoch: epoch + 1,
            ce_loss: ce_sum / nb as f64,
            ood_loss: ood_sum / nb as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            epsilon: eps,
            kappa,
            lr,
        });
        meta.epoch = epoch + 1;
        meta.epsilon = eps;
        meta.kappa = kappa;
        if let Some(dir) = &options.out_dir {
            let ck = Checkpoint {
                spec: spec.clone(),
                params: params.clone(),
                meta: meta.clone(),
            };
            save_checkpoint(&dir.join("last.ckpt"), &ck)?;
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)), &ck)?;
            }
            write_log_csv(&dir.join("train_log.csv"), &log)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint { spec, params, meta },
        log,
    })
}

/// Fraction of correctly classified samples.
pub fn accuracy(spec: &NetworkSpec, params: &ParamStore, ds: &Dataset) -> Result<f64> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config(format!("dataset {} has no labels", ds.name)))?;
    let preds = predictions(&forward_chunked(spec, params, &ds.images, 256)?);
    Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}
