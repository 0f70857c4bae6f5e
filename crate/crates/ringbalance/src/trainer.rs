//! Desk-scale models and the pieces of the training step: per-sample
//! analytic gradients, gradient accumulation, the SGD update and
//! proportional dataset partitioning.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::domain::{DatasetSpec, GradientBuffer, ModelKind, ModelSpec};

#[derive(Debug, Error, PartialEq)]
pub enum TrainerError {
    #[error("sample has {got} features, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("needed {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("gradient buffer has zero sample count")]
    ZeroSampleCount,
    #[error("dataset of {size} samples is smaller than C = {c}")]
    DatasetTooSmall { size: usize, c: u64 },
    #[error("gradient length {got} does not match {expected} parameters")]
    GradientLengthMismatch { expected: usize, got: usize },
    #[error("bad csv at {path} line {line}: {reason}")]
    CsvParse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("cannot read {path}: {reason}")]
    CsvIo { path: String, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Regression target, or class index stored as a real.
    pub label: f64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A model with a flat parameter vector. Layouts:
/// linear regression `[w(d), b]`; softmax `[W(k×d) row-major, b(k)]`;
/// MLP `[W1(h×d), b1(h), W2(k×h), b2(k)]` with a tanh hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

pub fn param_count(spec: &ModelSpec) -> usize {
    let (d, k, h) = (spec.input_dim, spec.output_dim, spec.hidden_dim);
    match spec.kind {
        ModelKind::LinearRegression => d + 1,
        ModelKind::Softmax => k * (d + 1),
        ModelKind::Mlp => h * d + h + k * h + k,
    }
}

impl Model {
    pub fn init<R: Rng>(spec: ModelSpec, rng: &mut R) -> Model {
        let params = (0..param_count(&spec))
            .map(|_| rng.gen_range(-0.1..0.1))
            .collect();
        Model { spec, params }
    }

    pub fn zeroed(spec: ModelSpec) -> Model {
        let params = vec![0.0; param_count(&spec)];
        Model { spec, params }
    }

    /// Loss at the current parameters for one sample.
    pub fn loss(&self, sample: &Sample) -> Result<f64, TrainerError> {
        let mut scratch = vec![0.0; self.params.len()];
        self.grad_and_loss(sample, &mut scratch)
    }

    /// Analytic gradient added into `grad_out`; returns the sample loss.
    pub fn grad_and_loss(&self, sample: &Sample, grad_out: &mut [f64]) -> Result<f64, TrainerError> {
        let d = self.spec.input_dim;
        if sample.features.len() != d {
            return Err(TrainerError::DimMismatch {
                expected: d,
                got: sample.features.len(),
            });
        }
        if grad_out.len() != self.params.len() {
            return Err(TrainerError::GradientLengthMismatch {
                expected: self.params.len(),
                got: grad_out.len(),
            });
        }
        let x = &sample.features;
        match self.spec.kind {
            ModelKind::LinearRegression => {
                let w = &self.params[..d];
                let b = self.params[d];
                let pred: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
                let err = pred - sample.label;
                for (g, xi) in grad_out[..d].iter_mut().zip(x) {
                    *g += 2.0 * err * xi;
                }
                grad_out[d] += 2.0 * err;
                Ok(err * err)
            }
            ModelKind::Softmax => {
                let k = self.spec.output_dim;
                let y = sample.label as usize;
                let logits = affine(&self.params[..k * d], &self.params[k * d..], x, k, d);
                let p = softmax(&logits);
                for class in 0..k {
                    let delta = p[class] - if class == y { 1.0 } else { 0.0 };
                    for (j, xi) in x.iter().enumerate() {
                        grad_out[class * d + j] += delta * xi;
                    }
                    grad_out[k * d + class] += delta;
                }
                Ok(-p[y].max(f64::MIN_POSITIVE).ln())
            }
            ModelKind::Mlp => {
                let k = self.spec.output_dim;
                let h = self.spec.hidden_dim;
                let y = sample.label as usize;
                let (w1, rest) = self.params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);

                let hidden: Vec<f64> = affine(w1, b1, x, h, d).iter().map(|z| z.tanh()).collect();
                let logits = affine(w2, b2, &hidden, k, h);
                let p = softmax(&logits);

                let dz2: Vec<f64> = (0..k)
                    .map(|class| p[class] - if class == y { 1.0 } else { 0.0 })
                    .collect();
                let (g1, grest) = grad_out.split_at_mut(h * d);
                let (gb1, grest) = grest.split_at_mut(h);
                let (g2, gb2) = grest.split_at_mut(k * h);
                for class in 0..k {
                    for (j, hj) in hidden.iter().enumerate() {
                        g2[class * h + j] += dz2[class] * hj;
                    }
                    gb2[class] += dz2[class];
                }
                for j in 0..h {
                    let dh: f64 = (0..k).map(|class| w2[class * h + j] * dz2[class]).sum();
                    let dz1 = dh * (1.0 - hidden[j] * hidden[j]);
                    for (i, xi) in x.iter().enumerate() {
                        g1[j * d + i] += dz1 * xi;
                    }
                    gb1[j] += dz1;
                }
                Ok(-p[y].max(f64::MIN_POSITIVE).ln())
            }
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(wi, xi)| wi * xi)
                .sum::<f64>()
                + b[r]
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Exact analytic gradient of the loss at the current params for one sample.
pub fn per_sample_gradient(model: &Model, sample: &Sample) -> Result<GradientBuffer, TrainerError> {
    let mut buf = GradientBuffer::zeros(model.params.len());
    model.grad_and_loss(sample, &mut buf.values)?;
    buf.sample_count = 1;
    Ok(buf)
}

/// Sum of per-sample gradients over `w_i * minibatch` samples, with no
/// parameter update. Also returns the summed loss for reporting.
pub fn accumulate_with_loss(
    model: &Model,
    samples: &[Sample],
    minibatch: u64,
    w_i: u64,
) -> Result<(GradientBuffer, f64), TrainerError> {
    let needed = (w_i * minibatch) as usize;
    if samples.len() < needed {
        return Err(TrainerError::InsufficientSamples {
            needed,
            got: samples.len(),
        });
    }
    let mut buf = GradientBuffer::zeros(model.params.len());
    let mut loss_sum = 0.0;
    for sample in &samples[..needed] {
        loss_sum += model.grad_and_loss(sample, &mut buf.values)?;
    }
    buf.sample_count = needed as u64;
    Ok((buf, loss_sum))
}

/// Sum of per-sample gradients over worker `i`'s per-aggregation slice.
pub fn accumulate(
    model: &Model,
    samples: &[Sample],
    minibatch: u64,
    w_i: u64,
) -> Result<GradientBuffer, TrainerError> {
    accumulate_with_loss(model, samples, minibatch, w_i).map(|(buf, _)| buf)
}

/// One SGD update over the aggregated gradient:
/// `params <- params - η·(grad/N + weight_decay·params)`.
pub fn sgd_step(
    model: &mut Model,
    global_grad: &GradientBuffer,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<(), TrainerError> {
    if global_grad.sample_count == 0 {
        return Err(TrainerError::ZeroSampleCount);
    }
    if global_grad.values.len() != model.params.len() {
        return Err(TrainerError::GradientLengthMismatch {
            expected: model.params.len(),
            got: global_grad.values.len(),
        });
    }
    let n = global_grad.sample_count as f64;
    for (p, g) in model.params.iter_mut().zip(&global_grad.values) {
        *p -= learning_rate * (g / n + weight_decay * *p);
    }
    Ok(())
}

/// Per-worker index ranges into a fixed global sample order.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub ranges: Vec<std::ops::Range<usize>>,
}

/// Contiguous slices sized `floor(D·w_i/C)`, leftover samples appended to
/// the highest rank. Slices always tile `[0, D)` exactly; slices may be
/// empty when `D < C`.
pub fn partition(dataset_size: usize, weights: &[u64]) -> Result<Partition, TrainerError> {
    let c: u64 = weights.iter().sum();
    if dataset_size < weights.len() {
        return Err(TrainerError::DatasetTooSmall {
            size: dataset_size,
            c,
        });
    }
    let n = weights.len();
    let mut ranges = Vec::with_capacity(n);
    let mut start = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let len = if i == n - 1 {
            dataset_size - start
        } else {
            (dataset_size as u64 * w / c) as usize
        };
        ranges.push(start..start + len);
        start += len;
    }
    Ok(Partition { ranges })
}

/// Central finite-difference gradient of the loss, the independent oracle
/// for the analytic gradients above.
pub fn finite_difference_gradient(model: &Model, sample: &Sample, eps: f64) -> Vec<f64> {
    let mut probe = model.clone();
    let mut grad = vec![0.0; model.params.len()];
    for i in 0..model.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let up = probe.loss(sample).expect("loss at shifted params");
        probe.params[i] = orig - eps;
        let down = probe.loss(sample).expect("loss at shifted params");
        probe.params[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Max relative error between analytic and finite-difference gradients over
/// `trials` random (params, sample) pairs.
pub fn gradient_check<R: Rng>(
    kind: ModelKind,
    trials: usize,
    rng: &mut R,
) -> Result<f64, TrainerError> {
    let spec = ModelSpec {
        kind,
        input_dim: 5,
        output_dim: if kind == ModelKind::LinearRegression { 1 } else { 3 },
        hidden_dim: 4,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let model = Model::init(spec.clone(), rng);
        let sample = Sample {
            features: (0..spec.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            label: if kind == ModelKind::LinearRegression {
                rng.gen_range(-2.0..2.0)
            } else {
                rng.gen_range(0..spec.output_dim) as f64
            },
        };
        let analytic = per_sample_gradient(&model, &sample)?;
        let numeric = finite_difference_gradient(&model, &sample, 1e-6);
        for (a, n) in analytic.values.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Materialize a dataset from its spec. `input_dim` and the class count come
/// from the model; linear regression uses two clusters labeled 0 and 1.
pub fn build_dataset(spec: &DatasetSpec, model: &ModelSpec) -> Result<Dataset, TrainerError> {
    match spec {
        DatasetSpec::Synthetic {
            seed,
            size,
            separation,
        } => Ok(synthetic_dataset(
            *seed,
            *size,
            *separation,
            model.input_dim,
            classes_for(model),
        )),
        DatasetSpec::Csv { path } => load_csv(path),
    }
}

fn classes_for(model: &ModelSpec) -> usize {
    match model.kind {
        ModelKind::LinearRegression => 2,
        _ => model.output_dim,
    }
}

/// Gaussian class clusters with configurable separation; labels balanced by
/// interleaving classes in the global order.
pub fn synthetic_dataset(
    seed: u64,
    size: usize,
    separation: f64,
    input_dim: usize,
    classes: usize,
) -> Dataset {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..input_dim).map(|_| separation * unit.sample(&mut rng)).collect())
        .collect();
    let samples = (0..size)
        .map(|i| {
            let class = i % classes;
            let features = means[class]
                .iter()
                .map(|m| m + unit.sample(&mut rng))
                .collect();
            Sample {
                features,
                label: class as f64,
            }
        })
        .collect();
    Dataset { samples }
}

/// CSV with a header row; every column is numeric, label in the last column.
pub fn load_csv(path: &str) -> Result<Dataset, TrainerError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainerError::CsvIo {
        path: path.to_string(),
        reason: e.to_string(),
    })?;
    let mut samples = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrainerError::CsvParse {
                path: path.to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        if fields.len() < 2 {
            return Err(TrainerError::CsvParse {
                path: path.to_string(),
                line: idx + 1,
                reason: "need at least one feature and a label".to_string(),
            });
        }
        if *width.get_or_insert(fields.len()) != fields.len() {
            return Err(TrainerError::CsvParse {
                path: path.to_string(),
                line: idx + 1,
                reason: "inconsistent column count".to_string(),
            });
        }
        let (label, features) = fields.split_last().unwrap();
        samples.push(Sample {
            features: features.to_vec(),
            label: *label,
        });
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_spec() -> ModelSpec {
        ModelSpec {
            kind: ModelKind::LinearRegression,
            input_dim: 1,
            output_dim: 1,
            hidden_dim: 0,
        }
    }

    #[test]
    fn linear_gradient_by_hand() {
        let model = Model::zeroed(linear_spec());
        let sample = Sample { features: vec![1.0], label: 2.0 };
        let g = per_sample_gradient(&model, &sample).unwrap();
        assert_eq!(g.values, vec![-4.0, -4.0]);
        assert_eq!(g.sample_count, 1);
    }

    #[test]
    fn softmax_zero_params_uniform() {
        let k = 4;
        let spec = ModelSpec {
            kind: ModelKind::Softmax,
            input_dim: 3,
            output_dim: k,
            hidden_dim: 0,
        };
        let model = Model::zeroed(spec);
        let sample = Sample { features: vec![0.5, -0.5, 1.0], label: 2.0 };
        let g = per_sample_gradient(&model, &sample).unwrap();
        // Bias gradient of the true class is 1/K - 1 under the uniform
        // prediction of an all-zero softmax.
        let bias_true = g.values[k * 3 + 2];
        assert!((bias_true - (1.0 / k as f64 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let model = Model::zeroed(linear_spec());
        let sample = Sample { features: vec![1.0, 2.0], label: 0.0 };
        assert_eq!(
            per_sample_gradient(&model, &sample).unwrap_err(),
            TrainerError::DimMismatch { expected: 1, got: 2 }
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in [ModelKind::LinearRegression, ModelKind::Softmax, ModelKind::Mlp] {
            let worst = gradient_check(kind, 25, &mut rng).unwrap();
            assert!(worst < 1e-4, "{kind:?}: max rel err {worst}");
        }
    }

    #[test]
    fn accumulate_single_sample_equals_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::init(linear_spec(), &mut rng);
        let sample = Sample { features: vec![0.7], label: 1.0 };
        let a = accumulate(&model, std::slice::from_ref(&sample), 1, 1).unwrap();
        let b = per_sample_gradient(&model, &sample).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn accumulate_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::init(linear_spec(), &mut rng);
        let samples: Vec<Sample> = (0..3)
            .map(|i| Sample { features: vec![i as f64], label: 1.0 })
            .collect();
        let acc = accumulate(&model, &samples, 1, 3).unwrap();
        let mut sum = GradientBuffer::zeros(model.params.len());
        for s in &samples {
            sum.add(&per_sample_gradient(&model, s).unwrap());
        }
        assert_eq!(acc, sum);
    }

    #[test]
    fn accumulate_insufficient_samples() {
        let model = Model::zeroed(linear_spec());
        let samples = vec![Sample { features: vec![1.0], label: 0.0 }];
        assert!(matches!(
            accumulate(&model, &samples, 1, 2),
            Err(TrainerError::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn split_gradients_sum_to_whole_batch() {
        // The same 4 samples split [2,2] vs [3,1] across two workers must
        // aggregate to the whole-batch gradient either way.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            input_dim: 3,
            output_dim: 2,
            hidden_dim: 4,
        };
        let model = Model::init(spec, &mut rng);
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                features: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                label: (i % 2) as f64,
            })
            .collect();
        let whole = accumulate(&model, &samples, 1, 4).unwrap();
        for split in [[2u64, 2], [3, 1]] {
            let mut agg = accumulate(&model, &samples[..split[0] as usize], 1, split[0]).unwrap();
            agg.add(&accumulate(&model, &samples[split[0] as usize..], 1, split[1]).unwrap());
            assert_eq!(agg.sample_count, 4);
            for (a, w) in agg.values.iter().zip(&whole.values) {
                assert!((a - w).abs() <= 1e-12 * w.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sgd_step_by_hand() {
        let mut model = Model::zeroed(linear_spec());
        model.params = vec![1.0, -1.0];
        let grad = GradientBuffer { values: vec![2.0, 4.0], sample_count: 2 };
        sgd_step(&mut model, &grad, 0.1, 0.0).unwrap();
        assert_eq!(model.params, vec![0.9, -1.2]);
    }

    #[test]
    fn sgd_zero_gradient_fixed_point() {
        let mut model = Model::zeroed(linear_spec());
        model.params = vec![0.3, 0.4];
        let before = model.params.clone();
        let grad = GradientBuffer { values: vec![0.0, 0.0], sample_count: 5 };
        sgd_step(&mut model, &grad, 0.7, 0.0).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn sgd_rejects_zero_sample_count() {
        let mut model = Model::zeroed(linear_spec());
        let grad = GradientBuffer::zeros(2);
        assert_eq!(
            sgd_step(&mut model, &grad, 0.1, 0.0).unwrap_err(),
            TrainerError::ZeroSampleCount
        );
    }

    #[test]
    fn partition_by_hand() {
        let p = partition(1000, &[7, 13]).unwrap();
        assert_eq!(p.ranges, vec![0..350, 350..1000]);
        let p = partition(100, &[10, 10]).unwrap();
        assert_eq!(p.ranges, vec![0..50, 50..100]);
        let p = partition(10, &[7, 13]).unwrap();
        assert_eq!(p.ranges, vec![0..3, 3..10]);
    }

    #[test]
    fn partition_too_small() {
        assert!(matches!(
            partition(1, &[7, 14]),
            Err(TrainerError::DatasetTooSmall { size: 1, c: 21 })
        ));
    }

    #[test]
    fn partition_tiles_exactly() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(2..6);
            let weights: Vec<u64> = (0..n).map(|_| rng.gen_range(1..20u64)).collect();
            let c: u64 = weights.iter().sum();
            let d = rng.gen_range(c..c * 50) as usize;
            let p = partition(d, &weights).unwrap();
            let mut covered = 0;
            for r in &p.ranges {
                assert_eq!(r.start, covered);
                covered = r.end;
            }
            assert_eq!(covered, d);
        }
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        for kind in [ModelKind::LinearRegression, ModelKind::Softmax, ModelKind::Mlp] {
            let spec = ModelSpec {
                kind,
                input_dim: 4,
                output_dim: if kind == ModelKind::LinearRegression { 1 } else { 2 },
                hidden_dim: 5,
            };
            let data = synthetic_dataset(9, 200, 4.0, 4, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut model = Model::init(spec, &mut rng);
            let mut losses = Vec::new();
            for _ in 0..10 {
                let (grad, loss) = accumulate_with_loss(&model, &data.samples, 1, 200).unwrap();
                losses.push(loss / 200.0);
                sgd_step(&mut model, &grad, 1e-2, 0.0).unwrap();
            }
            assert!(
                losses.last().unwrap() < losses.first().unwrap(),
                "{kind:?}: {losses:?}"
            );
        }
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "f0,f1,label\n1.0,2.0,0\n3.5,-1.0,1\n").unwrap();
        let ds = load_csv(path.to_str().unwrap()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[1].features, vec![3.5, -1.0]);
        assert_eq!(ds.samples[1].label, 1.0);
    }

    #[test]
    fn csv_bad_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,label\n1.0,zero\n").unwrap();
        assert!(matches!(
            load_csv(path.to_str().unwrap()),
            Err(TrainerError::CsvParse { line: 2, .. })
        ));
    }
}
