//! Mean-squared-error training with Adam, per-sample variational dropout,
//! global-norm gradient clipping and best-validation snapshotting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cells::{backward, forward, Family, LayerMasks, NetworkSpec, ParamSet, RecurrentNetwork};
use crate::dataset::WindowedDataset;
use crate::error::{Error, Result};
use crate::numerics::RandomStream;
use crate::scalar::Scalar;

pub use crate::cells::DropoutMasks;

fn check_pair<T>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::Argument(format!(
            "need equal nonzero lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_pair(pred, target)?;
    let sum = pred
        .iter()
        .zip(target)
        .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
    Ok(sum / T::of_usize(pred.len()))
}

pub fn rmse<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    mse(pred, target).map(|m| m.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm threshold; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Sample masks even when both dropout rates are zero.
    #[serde(default)]
    pub force_masks: bool,
}

impl TrainConfig {
    pub fn for_family(family: Family) -> Self {
        Self {
            epochs: 100,
            batch_size: family.default_batch_size(),
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            force_masks: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Argument(format!("{name} {b} outside [0,1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Argument("epsilon must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Argument("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step_count: 0,
        }
    }
}

fn same_layout<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>) -> Result<()> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() {
        return Err(Error::Consistency("parameter sets differ in tensor count".into()));
    }
    for (x, y) in ta.iter().zip(&tb) {
        if x.shape() != y.shape() {
            return Err(Error::shape("adam", x.shape(), y.shape()));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    same_layout(params, grads)?;
    same_layout(params, &state.m)?;
    same_layout(params, &state.v)?;
    state.step_count += 1;
    let t = i32::try_from(state.step_count).unwrap_or(i32::MAX);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.epsilon);
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        let p = p.as_mut_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for (k, &gk) in g.as_slice().iter().enumerate() {
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn bernoulli_mask<T: Scalar>(n: usize, rate: f64, rng: &mut RandomStream) -> Vec<T> {
    if rate == 0.0 {
        return vec![T::one(); n];
    }
    let keep = 1.0 - rate;
    let scale = T::of(1.0 / keep);
    (0..n)
        .map(|_| if rng.next_bernoulli(keep) { scale } else { T::zero() })
        .collect()
}

/// Fresh masks for one sequence. Input masks cover every hidden layer's
/// input; recurrent masks cover `h_{t-1}` of recurrent layers. The output
/// head is never masked. A zero rate yields all-ones masks and draws nothing.
pub fn sample_masks<T: Scalar>(spec: &NetworkSpec, rng: &mut RandomStream) -> DropoutMasks<T> {
    let mut input = spec.first_input_width();
    let recurrent = spec.family.is_recurrent();
    let layers = spec.layer_sizes[..spec.hidden_layer_count()]
        .iter()
        .map(|&out| {
            let lm = LayerMasks {
                input: Some(bernoulli_mask(input, spec.dropout_rate, rng)),
                recurrent: recurrent.then(|| bernoulli_mask(out, spec.recurrent_dropout_rate, rng)),
            };
            input = out;
            lm
        })
        .collect();
    DropoutMasks { layers }
}

/// Loss curves and RMSE summary of one training run. Epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss_curve: Vec<f64>,
    pub val_loss_curve: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub rmse_train: f64,
    pub rmse_test: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    best_epoch: Option<usize>,
    rmse_train: f64,
    rmse_test: Option<f64>,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` rows.
    pub fn write_curve_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for (i, (t, v)) in self.train_loss_curve.iter().zip(&self.val_loss_curve).enumerate() {
            w.write_record([(i + 1).to_string(), t.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Summary {
            best_epoch: self.best_epoch,
            rmse_train: self.rmse_train,
            rmse_test: self.rmse_test,
        })?)
    }
}

fn check_dataset<T: Scalar>(spec: &NetworkSpec, set: &WindowedDataset<T>, name: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Argument(format!("{name} set is empty")));
    }
    if set.lookback != spec.lookback || set.input_width() != spec.input_width {
        return Err(Error::shape(
            "dataset vs network",
            (set.lookback, set.input_width()),
            (spec.lookback, spec.input_width),
        ));
    }
    Ok(())
}

/// Inference-path predictions, one per sample.
pub fn predict_all<T: Scalar>(net: &RecurrentNetwork<T>, set: &WindowedDataset<T>) -> Result<Vec<T>> {
    set.samples.iter().map(|s| net.predict(&s.window)).collect()
}

/// RMSE of inference-path predictions against sample targets.
pub fn evaluate<T: Scalar>(net: &RecurrentNetwork<T>, set: &WindowedDataset<T>) -> Result<T> {
    check_dataset(&net.spec, set, "evaluation")?;
    rmse(&predict_all(net, set)?, &set.targets())
}

/// Sample indices sorted by target date, ties broken by target bits and then window contents.
fn canonical_order<T: Scalar>(set: &WindowedDataset<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    let key = |i: usize| {
        let s = &set.samples[i];
        (s.target_date, s.target.to_f64_lossy().to_bits())
    };
    idx.sort_by(|&a, &b| {
        key(a).cmp(&key(b)).then_with(|| {
            let wa = set.samples[a].window.as_slice().iter().map(|v| v.to_f64_lossy().to_bits());
            let wb = set.samples[b].window.as_slice().iter().map(|v| v.to_f64_lossy().to_bits());
            wa.cmp(wb)
        })
    });
    idx
}

/// Trains `net` and returns the parameters from the epoch with the lowest
/// validation MSE together with the loss curves.
pub fn train<T: Scalar>(
    net: &RecurrentNetwork<T>,
    train_set: &WindowedDataset<T>,
    val_set: &WindowedDataset<T>,
    cfg: &TrainConfig,
) -> Result<(RecurrentNetwork<T>, TrainReport)> {
    cfg.validate()?;
    net.check()?;
    check_dataset(&net.spec, train_set, "training")?;
    check_dataset(&net.spec, val_set, "validation")?;

    let spec = &net.spec;
    let use_masks = cfg.force_masks || spec.dropout_rate > 0.0 || spec.recurrent_dropout_rate > 0.0;
    let mut root = RandomStream::new(cfg.seed);
    let mut shuffle_rng = root.split();
    let mut mask_rng = root.split();
    let canonical = canonical_order(train_set);
    let clip = T::of(cfg.clip_norm);
    let val_targets = val_set.targets();

    let mut current = net.clone();
    let mut adam = AdamState::new(&current.params);
    let mut best: Option<(usize, T, ParamSet<T>)> = None;
    let mut train_curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order = canonical.clone();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = T::zero();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = b + 1;
            let mut grads = current.params.zeros_like();
            for &i in chunk {
                let sample = &train_set.samples[i];
                let masks = use_masks.then(|| sample_masks::<T>(spec, &mut mask_rng));
                let (pred, tape) = forward(&current, &sample.window, masks.as_ref())?;
                let err = pred - sample.target;
                let loss = err * err;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, batch });
                }
                loss_sum += loss;
                let g = backward(&current, &tape, err + err, masks.as_ref())?;
                grads.add_assign(&g)?;
            }
            grads.scale(T::one() / T::of_usize(chunk.len()));
            let norm = grads.norm();
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }
            if norm > clip {
                grads.scale(clip / norm);
            }
            adam_step(&mut current.params, &grads, &mut adam, cfg)?;
            if !current.params.is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }
        }
        let train_loss = loss_sum / T::of_usize(train_set.len());
        let val_loss = mse(&predict_all(&current, val_set)?, &val_targets)?;
        if !val_loss.is_finite() {
            let batches = train_set.len().div_ceil(cfg.batch_size);
            return Err(Error::Divergence { epoch, batch: batches });
        }
        train_curve.push(train_loss.to_f64_lossy());
        val_curve.push(val_loss.to_f64_lossy());
        if best.as_ref().is_none_or(|(_, v, _)| val_loss < *v) {
            best = Some((epoch, val_loss, current.params.clone()));
        }
        log::debug!("epoch {epoch}: train {train_loss} val {val_loss}");
    }

    let (best_epoch, trained) = match best {
        Some((epoch, _, params)) => (
            Some(epoch),
            RecurrentNetwork {
                spec: net.spec.clone(),
                params,
            },
        ),
        None => (None, net.clone()),
    };
    let rmse_train = evaluate(&trained, train_set)?.to_f64_lossy();
    Ok((
        trained,
        TrainReport {
            train_loss_curve: train_curve,
            val_loss_curve: val_curve,
            best_epoch,
            rmse_train,
            rmse_test: None,
        },
    ))
}

/// [`train`] followed by test-set evaluation of the selected parameters.
pub fn train_and_evaluate<T: Scalar>(
    net: &RecurrentNetwork<T>,
    train_set: &WindowedDataset<T>,
    val_set: &WindowedDataset<T>,
    test_set: &WindowedDataset<T>,
    cfg: &TrainConfig,
) -> Result<(RecurrentNetwork<T>, TrainReport)> {
    let (trained, mut report) = train(net, train_set, val_set, cfg)?;
    report.rmse_test = Some(evaluate(&trained, test_set)?.to_f64_lossy());
    Ok((trained, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Layer;
    use approx::assert_abs_diff_eq;

    fn scalar_set(g: f64) -> (ParamSet<f64>, ParamSet<f64>) {
        let spec = NetworkSpec::new(Family::GRU1, 1, 1)
            .unwrap()
            .with_layer_sizes(vec![1, 1])
            .unwrap();
        let net = RecurrentNetwork::<f64>::zeros(spec).unwrap();
        let mut grads = net.params.zeros_like();
        if let Layer::Dense(p) = &mut grads.layers[1] {
            p.b.as_mut_slice()[0] = g;
        }
        (net.params, grads)
    }

    fn head_bias(p: &ParamSet<f64>) -> f64 {
        match &p.layers[1] {
            Layer::Dense(d) => d.b.get(0, 0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn mse_and_rmse_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert_eq!(mse(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5);
        assert_abs_diff_eq!(rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 3.535534, epsilon = 1e-6);
        assert!(mse::<f64>(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let (mut params, grads) = scalar_set(0.0);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &TrainConfig::for_family(Family::GRU1)).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let (mut params, grads) = scalar_set(0.5);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &TrainConfig::for_family(Family::GRU1)).unwrap();
        assert_abs_diff_eq!(head_bias(&params), -0.001 * 0.5 / (0.5 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn adam_two_steps_match_hand_trace() {
        let cfg = TrainConfig::for_family(Family::GRU1);
        let (mut params, grads) = scalar_set(1.0);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();

        let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.001 * mh / (vh.sqrt() + 1e-8);
        }
        assert_abs_diff_eq!(head_bias(&params), theta, epsilon = 1e-12);
    }

    #[test]
    fn adam_rejects_mismatched_layouts() {
        let (mut params, _) = scalar_set(0.0);
        let other = RecurrentNetwork::<f64>::zeros(NetworkSpec::new(Family::GRU1, 1, 2).unwrap()).unwrap();
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &other.params, &mut state, &TrainConfig::for_family(Family::GRU1)).is_err());
    }

    #[test]
    fn zero_rate_masks_are_ones_and_draw_nothing() {
        let spec = NetworkSpec::new(Family::GRU2Dropout, 5, 3).unwrap().with_dropout(0.0, 0.0).unwrap();
        let mut rng = RandomStream::new(1);
        let masks = sample_masks::<f64>(&spec, &mut rng);
        assert_eq!(masks.layers.len(), 2);
        for lm in &masks.layers {
            assert!(lm.input.as_ref().unwrap().iter().all(|&v| v == 1.0));
            assert!(lm.recurrent.as_ref().unwrap().iter().all(|&v| v == 1.0));
        }
        assert_eq!(rng.next_u64(), RandomStream::new(1).next_u64());
    }

    #[test]
    fn mask_keep_fraction_concentrates() {
        let mut rng = RandomStream::new(5);
        let m = bernoulli_mask::<f64>(100_000, 0.1, &mut rng);
        let scale = 1.0 / 0.9;
        assert!(m.iter().all(|&v| v == 0.0 || v == scale));
        let kept = m.iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((0.895..=0.905).contains(&kept), "{kept}");
    }

    #[test]
    fn mask_sizes_follow_layer_inputs() {
        let spec = NetworkSpec::new(Family::GRU2Dropout, 5, 3).unwrap();
        let masks = sample_masks::<f64>(&spec, &mut RandomStream::new(2));
        assert_eq!(masks.layers[0].input.as_ref().unwrap().len(), 3);
        assert_eq!(masks.layers[0].recurrent.as_ref().unwrap().len(), 50);
        assert_eq!(masks.layers[1].input.as_ref().unwrap().len(), 50);
        assert_eq!(masks.layers[1].recurrent.as_ref().unwrap().len(), 10);
        let nn = NetworkSpec::new(Family::SimpleNN, 5, 3).unwrap();
        let masks = sample_masks::<f64>(&nn, &mut RandomStream::new(2));
        assert_eq!(masks.layers[0].input.as_ref().unwrap().len(), 15);
        assert!(masks.layers[0].recurrent.is_none());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::for_family(Family::SimpleNN);
        assert_eq!(cfg.batch_size, 125);
        assert_eq!(TrainConfig::for_family(Family::GRU1).batch_size, 100);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn report_serialization() {
        let r = TrainReport {
            train_loss_curve: vec![0.5, 0.25],
            val_loss_curve: vec![0.75, 0.125],
            best_epoch: Some(2),
            rmse_train: 0.1,
            rmse_test: Some(0.2),
        };
        let mut buf = Vec::new();
        r.write_curve_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_loss\n1,0.5,0.75\n2,0.25,0.125\n");
        let v: serde_json::Value = serde_json::from_str(&r.summary_json().unwrap()).unwrap();
        assert_eq!(v["best_epoch"], 2);
        assert_eq!(v["rmse_test"], 0.2);
    }
}
