//! Fully connected networks and the momentum optimizer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::TrainError;
use crate::overlap::{EngineError, GradientSource, LayerGrads};
use crate::tensor::{derive_seed, matmul, seeded_normal, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Half squared error against one-hot targets.
    Mse,
}

impl FromStr for Activation {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(TrainError::Config(format!("unknown activation {s:?}"))),
        }
    }
}

impl FromStr for LossKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            _ => Err(TrainError::Config(format!("unknown loss {s:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Mse => "mse",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub seed: u64,
}

impl ModelSpec {
    pub fn mlp(widths: Vec<usize>) -> Self {
        Self {
            widths,
            activation: Activation::Relu,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(TrainError::Config(format!(
                "model needs at least an input and an output width, all positive (got {:?})",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Weight `(out, in)` then bias `(out,)` for each layer, input first.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.widths
            .windows(2)
            .flat_map(|w| [vec![w[1], w[0]], vec![w[1]]])
            .collect()
    }
}

pub fn weight_id(layer: usize) -> usize {
    2 * layer
}

pub fn bias_id(layer: usize) -> usize {
    2 * layer + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: ModelSpec,
    params: Vec<Vec<f32>>,
}

/// Activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        self.pre.last().expect("at least one layer")
    }
}

impl Mlp {
    /// He initialization for relu, Xavier-style for tanh; zero biases.
    pub fn new(spec: ModelSpec) -> Result<Self, TrainError> {
        spec.validate()?;
        let mut params = Vec::with_capacity(2 * spec.num_layers());
        for (l, w) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = match spec.activation {
                Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                Activation::Tanh => (1.0 / fan_in as f64).sqrt(),
            } as f32;
            let mut weight = seeded_normal(fan_out, fan_in, derive_seed(spec.seed, &[l as u64]));
            weight.scale(gain);
            params.push(weight.into_data());
            params.push(vec![0.0; fan_out]);
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Vec<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Vec<f32>>) -> Result<(), TrainError> {
        let shapes = self.spec.shapes();
        if params.len() != shapes.len()
            || params
                .iter()
                .zip(&shapes)
                .any(|(p, s)| p.len() != s.iter().product::<usize>())
        {
            return Err(TrainError::Config(
                "parameter shapes do not match the model".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    fn weight(&self, l: usize) -> Matrix {
        let (fan_in, fan_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
        Matrix::new(fan_out, fan_in, self.params[weight_id(l)].clone()).expect("weight shape")
    }

    fn activate(&self, z: &Matrix) -> Matrix {
        let mut a = z.clone();
        for v in a.data_mut() {
            *v = match self.spec.activation {
                Activation::Relu => v.max(0.0),
                Activation::Tanh => v.tanh(),
            };
        }
        a
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache, TrainError> {
        if x.cols() != self.spec.widths[0] {
            return Err(TrainError::Config(format!(
                "input width {} does not match model input {}",
                x.cols(),
                self.spec.widths[0]
            )));
        }
        let layers = self.spec.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut a = x.clone();
        for l in 0..layers {
            let mut z = matmul(&a, &self.weight(l), false, true)?;
            let bias = &self.params[bias_id(l)];
            for row in z.data_mut().chunks_exact_mut(bias.len()) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            let next = if l + 1 < layers {
                self.activate(&z)
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Mean loss over the batch and its gradient with respect to the logits.
    pub fn loss(&self, logits: &Matrix, labels: &[u32]) -> Result<(f64, Matrix), TrainError> {
        let (b, k) = logits.shape();
        if labels.len() != b {
            return Err(TrainError::Config(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(TrainError::Config(format!(
                "label {bad} outside {k} model outputs"
            )));
        }
        let mut grad = Matrix::zeros(b, k);
        let mut total = 0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let g = &mut grad.data_mut()[i * k..(i + 1) * k];
            match self.spec.loss {
                LossKind::CrossEntropy => {
                    let max = row
                        .iter()
                        .map(|&v| f64::from(v))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    total += sum.ln() - (f64::from(row[y as usize]) - max);
                    for (j, e) in exps.iter().enumerate() {
                        let target = if j == y as usize { 1.0 } else { 0.0 };
                        g[j] = ((e / sum - target) / b as f64) as f32;
                    }
                }
                LossKind::Mse => {
                    for j in 0..k {
                        let target = if j == y as usize { 1.0 } else { 0.0 };
                        let d = f64::from(row[j]) - target;
                        total += 0.5 * d * d;
                        g[j] = (d / b as f64) as f32;
                    }
                }
            }
        }
        Ok((total / b as f64, grad))
    }

    /// Weight gradient, bias gradient and the gradient flowing into the
    /// previous layer's pre-activation (none for the first layer).
    pub fn backward_layer(
        &self,
        l: usize,
        dz: &Matrix,
        cache: &ForwardCache,
    ) -> Result<(Vec<f32>, Vec<f32>, Option<Matrix>), TrainError> {
        let dw = matmul(dz, &cache.inputs[l], true, false)?;
        let k = dz.cols();
        let mut db = vec![0f64; k];
        for row in dz.data().chunks_exact(k) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += f64::from(*v);
            }
        }
        let db = db.into_iter().map(|v| v as f32).collect();
        let prev = if l == 0 {
            None
        } else {
            let mut da = matmul(dz, &self.weight(l), false, false)?;
            let z = &cache.pre[l - 1];
            for (d, &zv) in da.data_mut().iter_mut().zip(z.data()) {
                *d *= match self.spec.activation {
                    Activation::Relu => {
                        if zv > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => 1.0 - zv.tanh() * zv.tanh(),
                };
            }
            Some(da)
        };
        Ok((dw.into_data(), db, prev))
    }

    /// Loss and all parameter gradients for one batch.
    pub fn loss_and_gradients(
        &self,
        x: &Matrix,
        labels: &[u32],
    ) -> Result<(f64, Vec<Vec<f32>>), TrainError> {
        let cache = self.forward(x)?;
        let (loss, mut dz) = self.loss(cache.logits(), labels)?;
        let mut grads = vec![Vec::new(); self.params.len()];
        for l in (0..self.spec.num_layers()).rev() {
            let (dw, db, prev) = self.backward_layer(l, &dz, &cache)?;
            grads[weight_id(l)] = dw;
            grads[bias_id(l)] = db;
            if let Some(p) = prev {
                dz = p;
            }
        }
        Ok((loss, grads))
    }

    /// Mean loss and accuracy over a whole dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64), TrainError> {
        const CHUNK: usize = 1024;
        let (mut loss, mut correct) = (0f64, 0usize);
        for start in (0..data.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(data.len());
            let x = Matrix::new(
                end - start,
                data.dim,
                data.features[start * data.dim..end * data.dim].to_vec(),
            )?;
            let labels = &data.labels[start..end];
            let cache = self.forward(&x)?;
            let logits = cache.logits();
            loss += self.loss(logits, labels)?.0 * (end - start) as f64;
            let k = logits.cols();
            for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f32::NEG_INFINITY),
                        |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                    );
                correct += usize::from(best.0 == y as usize);
            }
        }
        Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
    }
}

/// One mini-batch presented to the overlap engine, backward layer by layer.
pub struct BatchSource<'a> {
    model: &'a Mlp,
    x: Matrix,
    labels: Vec<u32>,
    cache: Option<ForwardCache>,
    dz: Option<Matrix>,
    next_layer: Option<usize>,
}

impl<'a> BatchSource<'a> {
    pub fn new(model: &'a Mlp, x: Matrix, labels: Vec<u32>) -> Self {
        Self {
            model,
            x,
            labels,
            cache: None,
            dz: None,
            next_layer: None,
        }
    }
}

fn engine_err(e: TrainError) -> EngineError {
    EngineError::Source(e.to_string())
}

impl GradientSource for BatchSource<'_> {
    fn shapes(&self) -> Vec<Vec<usize>> {
        self.model.spec.shapes()
    }

    fn ready_order(&self) -> Vec<usize> {
        (0..self.model.spec.num_layers())
            .rev()
            .flat_map(|l| [weight_id(l), bias_id(l)])
            .collect()
    }

    fn forward(&mut self) -> Result<f64, EngineError> {
        let cache = self.model.forward(&self.x).map_err(engine_err)?;
        let (loss, dz) = self
            .model
            .loss(cache.logits(), &self.labels)
            .map_err(engine_err)?;
        self.cache = Some(cache);
        self.dz = Some(dz);
        self.next_layer = Some(self.model.spec.num_layers());
        Ok(loss)
    }

    fn backward_next(&mut self) -> Result<Option<LayerGrads>, EngineError> {
        let l = match self.next_layer {
            Some(0) | None => return Ok(None),
            Some(n) => n - 1,
        };
        let cache = self.cache.as_ref().expect("forward ran");
        let dz = self.dz.take().expect("forward ran");
        let (dw, db, prev) = self
            .model
            .backward_layer(l, &dz, cache)
            .map_err(engine_err)?;
        self.dz = prev;
        self.next_layer = Some(l);
        Ok(Some(LayerGrads {
            label: format!("layer{l}"),
            grads: vec![(weight_id(l), dw), (bias_id(l), db)],
        }))
    }
}

/// `v ← momentum·v + g`, then `w ← w − lr·v`. Nothing is written when the
/// gradient holds a non-finite value.
pub fn sgd_momentum_update(
    weights: &mut [f32],
    grad: &[f32],
    lr: f32,
    momentum: f32,
    velocity: &mut [f32],
) -> Result<(), TrainError> {
    if weights.len() != grad.len() || velocity.len() != grad.len() {
        return Err(TrainError::Config(format!(
            "update shapes differ: weights {}, gradient {}, velocity {}",
            weights.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if let Some((i, g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFinite {
            detail: format!("gradient element {i} is {g}"),
        });
    }
    for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(activation: Activation, loss: LossKind) -> Mlp {
        Mlp::new(ModelSpec {
            widths: vec![5, 7, 6, 3],
            activation,
            loss,
            seed: 11,
        })
        .unwrap()
    }

    // central differences in f64 through a scalar-only forward pass
    fn numeric_loss(m: &Mlp, params: &[Vec<f64>], x: &[Vec<f64>], y: &[u32]) -> f64 {
        let w = &m.spec.widths;
        let mut total = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let mut a = row.clone();
            for l in 0..w.len() - 1 {
                let (fi, fo) = (w[l], w[l + 1]);
                let mut z: Vec<f64> = (0..fo)
                    .map(|o| {
                        params[bias_id(l)][o]
                            + (0..fi)
                                .map(|i| params[weight_id(l)][o * fi + i] * a[i])
                                .sum::<f64>()
                    })
                    .collect();
                if l + 2 < w.len() {
                    for v in &mut z {
                        *v = match m.spec.activation {
                            Activation::Relu => v.max(0.0),
                            Activation::Tanh => v.tanh(),
                        };
                    }
                }
                a = z;
            }
            total += match m.spec.loss {
                LossKind::CrossEntropy => {
                    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = a.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                    lse - a[label as usize]
                }
                LossKind::Mse => a
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let t = if j == label as usize { 1.0 } else { 0.0 };
                        0.5 * (v - t) * (v - t)
                    })
                    .sum(),
            };
        }
        total / x.len() as f64
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (act, loss) in [
            (Activation::Relu, LossKind::CrossEntropy),
            (Activation::Tanh, LossKind::Mse),
            (Activation::Tanh, LossKind::CrossEntropy),
        ] {
            let m = model(act, loss);
            let x = seeded_normal(4, 5, 3);
            let y = [0, 2, 1, 2];
            let (l, grads) = m.loss_and_gradients(&x, &y).unwrap();
            let xs: Vec<Vec<f64>> = x
                .data()
                .chunks(5)
                .map(|r| r.iter().map(|&v| f64::from(v)).collect())
                .collect();
            let base: Vec<Vec<f64>> = m
                .params
                .iter()
                .map(|p| p.iter().map(|&v| f64::from(v)).collect())
                .collect();
            assert!((numeric_loss(&m, &base, &xs, &y) - l).abs() < 1e-5);
            let h = 1e-5;
            for t in 0..base.len() {
                for i in 0..base[t].len() {
                    let mut plus = base.clone();
                    plus[t][i] += h;
                    let mut minus = base.clone();
                    minus[t][i] -= h;
                    let fd = (numeric_loss(&m, &plus, &xs, &y) - numeric_loss(&m, &minus, &xs, &y))
                        / (2.0 * h);
                    assert!(
                        (fd - f64::from(grads[t][i])).abs() < 1e-4,
                        "{act} {loss} tensor {t}[{i}]: {fd} vs {}",
                        grads[t][i]
                    );
                }
            }
        }
    }

    #[test]
    fn batch_source_yields_layers_in_reverse() {
        let m = model(Activation::Relu, LossKind::CrossEntropy);
        let x = seeded_normal(4, 5, 3);
        let y = vec![0, 2, 1, 2];
        let (loss, grads) = m.loss_and_gradients(&x, &y).unwrap();
        let mut src = BatchSource::new(&m, x, y);
        assert_eq!(src.ready_order(), vec![4, 5, 2, 3, 0, 1]);
        assert_eq!(src.forward().unwrap(), loss);
        let mut seen = Vec::new();
        while let Some(layer) = src.backward_next().unwrap() {
            for (t, g) in layer.grads {
                assert_eq!(g, grads[t]);
                seen.push(t);
            }
        }
        assert_eq!(seen, src.ready_order());
    }

    #[test]
    fn momentum_examples() {
        let mut w = vec![1.0f32, 2.0];
        let mut v = vec![0.0f32; 2];
        sgd_momentum_update(&mut w, &[0.5, -1.0], 0.1, 0.0, &mut v).unwrap();
        assert_eq!(w, vec![1.0 - 0.05, 2.0 + 0.1]);

        let (lr, g) = (0.1f32, 2.0f32);
        let mut w = vec![0.0f32];
        let mut v = vec![0.0f32];
        sgd_momentum_update(&mut w, &[g], lr, 0.9, &mut v).unwrap();
        sgd_momentum_update(&mut w, &[g], lr, 0.9, &mut v).unwrap();
        assert!((w[0] + lr * g * (1.0 + 1.9)).abs() < 1e-6);

        let mut w = vec![3.0f32];
        sgd_momentum_update(&mut w, &[7.0], 0.0, 0.9, &mut [1.0]).unwrap();
        assert_eq!(w, vec![3.0]);

        let mut w = vec![3.0f32, 1.0];
        let err = sgd_momentum_update(&mut w, &[1.0, f32::NAN], 0.1, 0.9, &mut [0.0, 0.0]);
        assert!(matches!(err, Err(TrainError::NonFinite { .. })));
        assert_eq!(w, vec![3.0, 1.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let a = model(Activation::Relu, LossKind::CrossEntropy);
        let b = model(Activation::Relu, LossKind::CrossEntropy);
        assert_eq!(a, b);
        assert_eq!(
            a.spec().shapes(),
            vec![
                vec![7, 5],
                vec![7],
                vec![6, 7],
                vec![6],
                vec![3, 6],
                vec![3]
            ]
        );
        assert!(Mlp::new(ModelSpec::mlp(vec![3])).is_err());
    }
}
