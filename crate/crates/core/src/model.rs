//! Small differentiable classifiers with cross-entropy loss.
//!
//! Parameters live in a single flat [`ParamVector`]. Layouts:
//!
//! * logistic: `W` (`C x D`, row-major) followed by `b` (`C`).
//! * mlp: `W1` (`H x D`), `b1` (`H`), `W2` (`C x H`), `b2` (`C`); the
//!   hidden activation is `tanh`.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::math::{ParamVector, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            num_classes,
            hidden_dim: 0,
            init_scale: 0.05,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_dim,
            init_scale: 0.05,
        }
    }

    pub fn with_init_scale(mut self, init_scale: f64) -> Self {
        self.init_scale = init_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(FedError::config("model needs num_classes >= 2"));
        }
        if self.input_dim == 0 {
            return Err(FedError::config("model needs input_dim >= 1"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(FedError::config("mlp needs hidden_dim >= 1"));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(FedError::config("init_scale must be finite and >= 0"));
        }
        Ok(())
    }

    /// Number of parameters.
    pub fn param_count(&self) -> usize {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::Logistic => (d + 1) * c,
            ModelKind::Mlp => (d + 1) * h + (h + 1) * c,
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_count() {
            return Err(FedError::DimensionMismatch {
                expected: self.param_count(),
                actual: params.dim(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(FedError::Empty("batch"));
        }
        if batch.input_dim() != self.input_dim {
            return Err(FedError::DimensionMismatch {
                expected: self.input_dim,
                actual: batch.input_dim(),
            });
        }
        if let Some(&bad) = batch.labels().iter().find(|&&l| l >= self.num_classes) {
            return Err(FedError::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Row-major feature matrix plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(FedError::InvalidArgument(
                "input_dim must be positive".into(),
            ));
        }
        if features.len() != input_dim * labels.len() {
            return Err(FedError::InvalidArgument(format!(
                "{} feature values do not form {} rows of width {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Batch {
            features,
            input_dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            features,
            input_dim: self.input_dim,
            labels,
        }
    }

    /// Same features with labels replaced.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Batch> {
        Batch::new(self.features.clone(), self.input_dim, labels)
    }
}

/// Writes class logits for one row into `logits`; `hidden` receives the
/// mlp activations (unused for logistic).
fn forward(spec: &ModelSpec, p: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    match spec.kind {
        ModelKind::Logistic => {
            let (w, b) = p.split_at(c * d);
            for k in 0..c {
                logits[k] = b[k] + dot(&w[k * d..(k + 1) * d], x);
            }
        }
        ModelKind::Mlp => {
            let (w1, rest) = p.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            for u in 0..h {
                hidden[u] = (b1[u] + dot(&w1[u * d..(u + 1) * d], x)).tanh();
            }
            for k in 0..c {
                logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Random uniform weights in `[-init_scale, init_scale]`, zero biases.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> ParamVector {
    let s = spec.init_scale;
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                if s == 0.0 {
                    0.0
                } else {
                    rng.uniform_range(-s, s)
                }
            })
            .collect()
    };
    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    let mut out = Vec::with_capacity(spec.param_count());
    match spec.kind {
        ModelKind::Logistic => {
            out.extend(draw(c * d));
            out.extend(std::iter::repeat_n(0.0, c));
        }
        ModelKind::Mlp => {
            out.extend(draw(h * d));
            out.extend(std::iter::repeat_n(0.0, h));
            out.extend(draw(c * h));
            out.extend(std::iter::repeat_n(0.0, c));
        }
    }
    ParamVector::new(out)
}

/// Mean cross-entropy over the batch.
pub fn loss(params: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let mut hidden = vec![0.0; spec.hidden_dim];
    let mut logits = vec![0.0; spec.num_classes];
    let mut total = 0.0;
    for i in 0..batch.len() {
        forward(
            spec,
            params.as_slice(),
            batch.row(i),
            &mut hidden,
            &mut logits,
        );
        total += log_sum_exp(&logits) - logits[batch.labels[i]];
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`loss`] with respect to the parameters.
pub fn grad(params: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<ParamVector> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    let p = params.as_slice();
    let mut g = vec![0.0; p.len()];
    let mut hidden = vec![0.0; h];
    let mut logits = vec![0.0; c];
    let mut dhidden = vec![0.0; h];
    let inv_n = 1.0 / batch.len() as f64;

    for i in 0..batch.len() {
        let x = batch.row(i);
        forward(spec, p, x, &mut hidden, &mut logits);
        // softmax minus one-hot, scaled by 1/n
        let lse = log_sum_exp(&logits);
        for (k, z) in logits.iter_mut().enumerate() {
            let prob = (*z - lse).exp();
            let target = if k == batch.labels[i] { 1.0 } else { 0.0 };
            *z = (prob - target) * inv_n;
        }
        let delta = &logits;
        match spec.kind {
            ModelKind::Logistic => {
                let (gw, gb) = g.split_at_mut(c * d);
                for k in 0..c {
                    let row = &mut gw[k * d..(k + 1) * d];
                    for (gv, xv) in row.iter_mut().zip(x) {
                        *gv += delta[k] * xv;
                    }
                    gb[k] += delta[k];
                }
            }
            ModelKind::Mlp => {
                let w2 = &p[h * d + h..h * d + h + c * h];
                let (gw1, rest) = g.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                dhidden.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..c {
                    let row = &mut gw2[k * h..(k + 1) * h];
                    for u in 0..h {
                        row[u] += delta[k] * hidden[u];
                        dhidden[u] += w2[k * h + u] * delta[k];
                    }
                    gb2[k] += delta[k];
                }
                for u in 0..h {
                    let dpre = dhidden[u] * (1.0 - hidden[u] * hidden[u]);
                    let row = &mut gw1[u * d..(u + 1) * d];
                    for (gv, xv) in row.iter_mut().zip(x) {
                        *gv += dpre * xv;
                    }
                    gb1[u] += dpre;
                }
            }
        }
    }
    Ok(ParamVector::new(g))
}

/// Index of the largest logit for every row; ties go to the lowest class.
pub fn predict(params: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<Vec<usize>> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let mut hidden = vec![0.0; spec.hidden_dim];
    let mut logits = vec![0.0; spec.num_classes];
    Ok((0..batch.len())
        .map(|i| {
            forward(
                spec,
                params.as_slice(),
                batch.row(i),
                &mut hidden,
                &mut logits,
            );
            let mut best = 0;
            for k in 1..logits.len() {
                if logits[k] > logits[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose predicted class matches the label.
pub fn accuracy(params: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<f64> {
    let preds = predict(params, batch, spec)?;
    let correct = preds
        .iter()
        .zip(batch.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Local optimizer state. For SGD `beta1` is the momentum coefficient and
/// `first_moment` the velocity buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
}

impl OptimizerState {
    pub fn adam(dim: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first_moment: ParamVector::zeros(dim),
            second_moment: ParamVector::zeros(dim),
        }
    }

    /// Adam with the usual defaults (`1e-3`, `0.9`, `0.999`, `1e-8`).
    pub fn adam_default(dim: usize) -> Self {
        Self::adam(dim, 1e-3, 0.9, 0.999, 1e-8)
    }

    pub fn sgd(dim: usize, learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: momentum,
            beta2: 0.0,
            epsilon: 0.0,
            step_count: 0,
            first_moment: ParamVector::zeros(dim),
            second_moment: ParamVector::zeros(0),
        }
    }

    /// Fresh state with the same hyper-parameters.
    pub fn reset(&self) -> Self {
        let dim = self.first_moment.dim();
        match self.kind {
            OptimizerKind::Adam => Self::adam(
                dim,
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
            ),
            OptimizerKind::Sgd => Self::sgd(dim, self.learning_rate, self.beta1),
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        params.check_dim(grad)?;
        params.check_dim(&self.first_moment)?;
        self.step_count += 1;
        let lr = self.learning_rate;
        let x = params.as_mut_slice();
        let g = grad.as_slice();
        match self.kind {
            OptimizerKind::Sgd => {
                if self.beta1 == 0.0 {
                    for (xi, gi) in x.iter_mut().zip(g) {
                        *xi -= lr * gi;
                    }
                } else {
                    let v = self.first_moment.as_mut_slice();
                    for ((xi, gi), vi) in x.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = self.beta1 * *vi + gi;
                        *xi -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let t = self.step_count as i32;
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                let m = self.first_moment.as_mut_slice();
                let v = self.second_moment.as_mut_slice();
                for i in 0..x.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    x[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Runs `steps` optimizer steps on mini-batches drawn from `data`.
///
/// The partition is shuffled at the start of every local epoch; a batch
/// that would run past the end of the epoch starts a new one instead. When
/// `batch_size` covers the whole partition every step uses the full data in
/// its original order and no randomness is consumed.
pub fn local_train(
    params: &ParamVector,
    data: &Batch,
    steps: usize,
    batch_size: usize,
    mut opt: OptimizerState,
    rng: &mut RngStream,
    spec: &ModelSpec,
) -> Result<(ParamVector, OptimizerState)> {
    if data.is_empty() {
        return Err(FedError::Empty("client partition"));
    }
    if steps == 0 || batch_size == 0 {
        return Err(FedError::InvalidArgument(
            "local training needs steps >= 1 and batch_size >= 1".into(),
        ));
    }
    let mut x = params.clone();
    let n = data.len();
    if batch_size >= n {
        for _ in 0..steps {
            let g = grad(&x, data, spec)?;
            opt.step(&mut x, &g)?;
        }
        return Ok((x, opt));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for _ in 0..steps {
        if cursor + batch_size > n {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let mb = data.select(&order[cursor..cursor + batch_size]);
        cursor += batch_size;
        let g = grad(&x, &mb, spec)?;
        opt.step(&mut x, &g)?;
    }
    Ok((x, opt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rng: &mut RngStream, n: usize, d: usize, c: usize) -> Batch {
        let features = (0..n * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let labels = (0..n).map(|_| rng.below(c)).collect();
        Batch::new(features, d, labels).unwrap()
    }

    fn random_params(rng: &mut RngStream, spec: &ModelSpec, scale: f64) -> ParamVector {
        ParamVector::new(
            (0..spec.param_count())
                .map(|_| rng.uniform_range(-scale, scale))
                .collect(),
        )
    }

    /// Straight-line softmax-then-NLL for logistic regression.
    fn oracle_logistic_loss(p: &[f64], b: &Batch, d: usize, c: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..b.len() {
            let mut z = vec![0.0; c];
            for k in 0..c {
                z[k] = p[c * d + k];
                for j in 0..d {
                    z[k] += p[k * d + j] * b.row(i)[j];
                }
            }
            let mut m = z[0];
            for &zk in &z[1..] {
                if zk > m {
                    m = zk;
                }
            }
            let mut s = 0.0;
            for &zk in &z {
                s += (zk - m).exp();
            }
            let prob = (z[b.labels()[i]] - m).exp() / s;
            total += -prob.ln();
        }
        total / b.len() as f64
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::logistic(784, 10).param_count(), 7850);
        assert_eq!(ModelSpec::mlp(20, 16, 10).param_count(), 506);
    }

    #[test]
    fn zero_init_scale_gives_zero_vector() {
        let spec = ModelSpec::mlp(5, 4, 3).with_init_scale(0.0);
        let p = init_params(&spec, &mut RngStream::new(1, 0));
        assert!(p.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_draws_within_scale_and_zero_biases() {
        let spec = ModelSpec::logistic(6, 4).with_init_scale(0.05);
        let p = init_params(&spec, &mut RngStream::new(2, 0));
        assert!(p.as_slice()[..24].iter().all(|v| v.abs() <= 0.05));
        assert!(p.as_slice()[..24].iter().any(|&v| v != 0.0));
        assert!(p.as_slice()[24..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_loss_is_ln_c() {
        let mut rng = RngStream::new(3, 0);
        let b = random_batch(&mut rng, 17, 6, 10);
        let spec = ModelSpec::logistic(6, 10);
        let l = loss(&ParamVector::zeros(spec.param_count()), &b, &spec).unwrap();
        assert!((l - std::f64::consts::LN_10).abs() < 1e-12);
        let spec = ModelSpec::mlp(6, 5, 3);
        let b = random_batch(&mut rng, 9, 6, 3);
        let l = loss(&ParamVector::zeros(spec.param_count()), &b, &spec).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let mut rng = RngStream::new(4, 0);
        for _ in 0..10 {
            let spec = ModelSpec::logistic(7, 5);
            let b = random_batch(&mut rng, 13, 7, 5);
            let p = random_params(&mut rng, &spec, 2.0);
            let ours = loss(&p, &b, &spec).unwrap();
            let oracle = oracle_logistic_loss(p.as_slice(), &b, 7, 5);
            assert!((ours - oracle).abs() < 1e-12, "{ours} vs {oracle}");
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let spec = ModelSpec::logistic(3, 2);
        let b = Batch::new(vec![], 3, vec![]).unwrap();
        let p = ParamVector::zeros(spec.param_count());
        assert!(matches!(loss(&p, &b, &spec), Err(FedError::Empty(_))));
        assert!(grad(&p, &b, &spec).is_err());
        assert!(accuracy(&p, &b, &spec).is_err());
    }

    #[test]
    fn bias_gradient_at_zero_is_uniform_minus_frequency() {
        // balanced over 4 classes, features symmetric around zero
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let features = vec![1., -1., 2., -2., 0.5, -0.5, 3., -3.];
        let b = Batch::new(features, 1, labels).unwrap();
        let spec = ModelSpec::logistic(1, 4);
        let g = grad(&ParamVector::zeros(spec.param_count()), &b, &spec).unwrap();
        for k in 0..4 {
            assert!((g[4 + k] - (0.25 - 0.25)).abs() < 1e-15);
        }
        // unbalanced: class 0 appears 3/4 of the time
        let b = Batch::new(vec![1., -1., 2., -2.], 1, vec![0, 0, 0, 1]).unwrap();
        let spec = ModelSpec::logistic(1, 2);
        let g = grad(&ParamVector::zeros(spec.param_count()), &b, &spec).unwrap();
        assert!((g[2] - (0.5 - 0.75)).abs() < 1e-15);
        assert!((g[3] - (0.5 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let mut rng = RngStream::new(5, 0);
        let spec = ModelSpec::mlp(4, 3, 3);
        let b = random_batch(&mut rng, 6, 4, 3);
        let idx: Vec<usize> = (0..6).chain(0..6).collect();
        let doubled = b.select(&idx);
        let p = random_params(&mut rng, &spec, 1.0);
        let g1 = grad(&p, &b, &spec).unwrap();
        let g2 = grad(&p, &doubled, &spec).unwrap();
        for i in 0..g1.dim() {
            assert!((g1[i] - g2[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn finite_differences_agree_for_both_kinds() {
        let mut rng = RngStream::new(6, 0);
        for spec in [ModelSpec::logistic(5, 4), ModelSpec::mlp(5, 6, 4)] {
            let b = random_batch(&mut rng, 11, 5, 4);
            let p = random_params(&mut rng, &spec, 0.5);
            let g = grad(&p, &b, &spec).unwrap();
            let h = 1e-5;
            for i in 0..spec.param_count() {
                let mut plus = p.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = p.clone();
                minus.as_mut_slice()[i] -= h;
                let fd = (loss(&plus, &b, &spec).unwrap() - loss(&minus, &b, &spec).unwrap())
                    / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(err < 1e-4, "{:?} coord {i}: {fd} vs {}", spec.kind, g[i]);
            }
        }
    }

    #[test]
    fn loss_is_row_permutation_invariant() {
        let mut rng = RngStream::new(7, 0);
        let spec = ModelSpec::logistic(3, 3);
        let b = random_batch(&mut rng, 8, 3, 3);
        let p = random_params(&mut rng, &spec, 1.0);
        let mut idx: Vec<usize> = (0..8).collect();
        rng.shuffle(&mut idx);
        let a = loss(&p, &b, &spec).unwrap();
        let c = loss(&p, &b.select(&idx), &spec).unwrap();
        assert!((a - c).abs() < 1e-14);
    }

    #[test]
    fn small_sgd_step_decreases_loss() {
        let mut rng = RngStream::new(8, 0);
        let spec = ModelSpec::mlp(4, 5, 3);
        let b = random_batch(&mut rng, 20, 4, 3);
        let p = random_params(&mut rng, &spec, 0.5);
        let before = loss(&p, &b, &spec).unwrap();
        let g = grad(&p, &b, &spec).unwrap();
        let mut lr = 1.0;
        let mut decreased = false;
        for _ in 0..20 {
            let mut x = p.clone();
            OptimizerState::sgd(p.dim(), lr, 0.0)
                .step(&mut x, &g)
                .unwrap();
            if loss(&x, &b, &spec).unwrap() < before {
                decreased = true;
                break;
            }
            lr /= 2.0;
        }
        assert!(decreased);
    }

    #[test]
    fn accuracy_tie_break_and_oracle() {
        let b = Batch::new(vec![0.1, 0.2, 0.3, 0.4], 1, vec![0, 1, 0, 2]).unwrap();
        let spec = ModelSpec::logistic(1, 3);
        let acc = accuracy(&ParamVector::zeros(spec.param_count()), &b, &spec).unwrap();
        assert_eq!(acc, 0.5);

        // two points perfectly separated by sign of x
        let b = Batch::new(vec![-1.0, 1.0], 1, vec![0, 1]).unwrap();
        let spec = ModelSpec::logistic(1, 2);
        let p = ParamVector::new(vec![-1.0, 1.0, 0.0, 0.0]);
        assert_eq!(accuracy(&p, &b, &spec).unwrap(), 1.0);

        let mut rng = RngStream::new(9, 0);
        let spec = ModelSpec::logistic(4, 5);
        let b = random_batch(&mut rng, 50, 4, 5);
        let p = random_params(&mut rng, &spec, 1.0);
        let mut correct = 0;
        for i in 0..b.len() {
            let mut best = 0;
            let mut best_z = f64::NEG_INFINITY;
            for k in 0..5 {
                let mut z = p[20 + k];
                for j in 0..4 {
                    z += p[k * 4 + j] * b.row(i)[j];
                }
                if z > best_z {
                    best_z = z;
                    best = k;
                }
            }
            if best == b.labels()[i] {
                correct += 1;
            }
        }
        assert_eq!(accuracy(&p, &b, &spec).unwrap(), correct as f64 / 50.0);
    }

    #[test]
    fn local_train_zero_lr_and_exact_sgd_step() {
        let mut rng = RngStream::new(10, 0);
        let spec = ModelSpec::logistic(3, 3);
        let b = random_batch(&mut rng, 12, 3, 3);
        let p = random_params(&mut rng, &spec, 0.3);

        let opt = OptimizerState::adam(p.dim(), 0.0, 0.9, 0.999, 1e-8);
        let (out, opt) = local_train(&p, &b, 1, 4, opt, &mut rng, &spec).unwrap();
        assert_eq!(out, p);
        assert_eq!(opt.step_count, 1);

        let lr = 0.1;
        let (out, _) = local_train(
            &p,
            &b,
            1,
            12,
            OptimizerState::sgd(p.dim(), lr, 0.0),
            &mut rng,
            &spec,
        )
        .unwrap();
        let g = grad(&p, &b, &spec).unwrap();
        let expected: Vec<f64> = (0..p.dim()).map(|i| p[i] - lr * g[i]).collect();
        assert_eq!(out.as_slice(), expected.as_slice());
    }

    #[test]
    fn local_train_is_deterministic_and_counts_steps() {
        let mut rng = RngStream::new(11, 0);
        let spec = ModelSpec::mlp(3, 4, 3);
        let b = random_batch(&mut rng, 40, 3, 3);
        let p = random_params(&mut rng, &spec, 0.3);
        let run = || {
            local_train(
                &p,
                &b,
                5,
                8,
                OptimizerState::adam_default(p.dim()),
                &mut RngStream::new(77, 2),
                &spec,
            )
            .unwrap()
        };
        let (a, sa) = run();
        let (c, _) = run();
        assert_eq!(a, c);
        assert_eq!(sa.step_count, 5);
        assert_ne!(a, p);
    }

    #[test]
    fn local_train_rejects_empty_partition() {
        let spec = ModelSpec::logistic(2, 2);
        let b = Batch::new(vec![], 2, vec![]).unwrap();
        let p = ParamVector::zeros(spec.param_count());
        let r = local_train(
            &p,
            &b,
            1,
            1,
            OptimizerState::adam_default(p.dim()),
            &mut RngStream::new(0, 0),
            &spec,
        );
        assert!(matches!(r, Err(FedError::Empty(_))));
    }
}
