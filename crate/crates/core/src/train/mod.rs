//! Mini-batch SGD with momentum over the total loss.
//!
//! Each sample gets its own tape. Per-sample gradients are summed in sample
//! index order and then divided by the batch length, so the result is the
//! same for any worker count.

pub mod checkpoint;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, Term};
use crate::model::{ClassSelect, WsolNet};

pub use checkpoint::Checkpoint;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Total epoch count. Training resumed at epoch `e` runs `e..epochs`.
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
    pub shuffle: bool,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every`
    /// epochs; 0 keeps it constant.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    /// Worker threads for the per-sample passes.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            shuffle: true,
            lr_decay_every: 0,
            lr_decay: 0.1,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum = {} must lie in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config(format!("lr_decay = {} must be positive", self.lr_decay)));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.learning_rate,
            k => self.learning_rate * self.lr_decay.powi((epoch / k) as i32),
        }
    }
}

/// `v ← mu·v + g; p ← p − lr·v`, elementwise.
pub fn sgd_momentum_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, mu: f64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Dimension(format!(
            "sgd step: parameter {:?}, gradient {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Everything needed to continue training: parameters, momentum buffers,
/// completed epochs and the shuffle seed.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: WsolNet,
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(net: WsolNet, seed: u64) -> Self {
        let velocity = net.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        TrainState { net, velocity, epoch: 0, seed }
    }
}

/// Per-epoch means over all samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Indexed like [`Term::ALL`].
    pub terms: [f64; 7],
    pub total: f64,
    /// Samples whose background term was skipped.
    pub bas_skipped: usize,
    /// Training classification accuracy, measured before each update.
    pub accuracy: f64,
    pub learning_rate: f64,
}

impl EpochLog {
    pub fn term(&self, t: Term) -> f64 {
        self.terms[Term::ALL.iter().position(|&x| x == t).expect("term in ALL")]
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {}", self.epoch)?;
        for (t, v) in Term::ALL.iter().zip(self.terms) {
            write!(f, " {t} {v:.6}")?;
        }
        write!(f, " total {:.6} skipped {} acc {:.4}", self.total, self.bas_skipped, self.accuracy)
    }
}

struct SampleOut {
    grads: Vec<Tensor>,
    terms: [f64; 7],
    total: f64,
    skipped: usize,
    correct: bool,
}

fn sample_pass(net: &WsolNet, sample: &Sample, loss: &LossConfig) -> Result<SampleOut> {
    let s = net.config().input_size;
    let image = sample.image.clone().reshape([1, 3, s, s]).map_err(|_| {
        Error::Dimension(format!("expected a 3x{s}x{s} image, got {:?}", sample.image.shape()))
    })?;
    let labels = [sample.label];
    let tape = Tape::new();
    let bound = net.bind(&tape);
    let bundle = bound.forward(tape.constant(image), ClassSelect::GroundTruth(&labels))?;
    let total = total_loss(&bundle, &labels, &bound, loss)?;
    let bd = total.breakdown;
    if let Some(term) = bd.first_non_finite() {
        return Err(Error::Numerical { term });
    }
    let grads = tape.backward(total.loss)?;
    let probs = bundle.probs.value();
    let best = crate::eval::ranked_classes(probs.data())[0];
    Ok(SampleOut {
        grads: bound.vars().iter().map(|&v| grads.wrt(v)).collect(),
        terms: Term::ALL.map(|t| bd.term(t)),
        total: bd.total,
        skipped: bd.skipped_count(),
        correct: best == sample.label,
    })
}

fn batch_passes(net: &WsolNet, batch: &[&Sample], loss: &LossConfig, threads: usize) -> Result<Vec<SampleOut>> {
    if threads <= 1 || batch.len() <= 1 {
        return batch.iter().map(|s| sample_pass(net, s, loss)).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| sample_pass(net, s, loss)).collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            for r in h.join().expect("training worker panicked") {
                out.push(r?);
            }
        }
        Ok(out)
    })
}

/// Sample order for `epoch`. Depends only on the seed and the epoch, so a
/// resumed run sees the same order as an uninterrupted one.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Trains from `state.epoch` up to `config.epochs`, calling `on_epoch` after
/// each epoch. Only images and labels are read from `samples`.
pub fn train_epochs(
    state: &mut TrainState,
    samples: &[Sample],
    config: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    loss.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training needs at least one sample".into()));
    }
    let classes = state.net.config().num_classes;
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(Error::Index(format!("label {} but the network has {classes} classes", s.label)));
    }
    state.seed = config.seed;
    let mut logs = Vec::new();
    while state.epoch < config.epochs {
        let lr = config.learning_rate_at(state.epoch);
        let order = epoch_order(samples.len(), config.seed, state.epoch, config.shuffle);
        let mut terms = [0.0; 7];
        let (mut total, mut skipped, mut correct) = (0.0, 0, 0);
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let outs = batch_passes(&state.net, &batch, loss, config.threads)?;
            let mut sum: Vec<Tensor> = outs[0].grads.clone();
            for o in &outs[1..] {
                for (acc, g) in sum.iter_mut().zip(&o.grads) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / outs.len() as f64;
            for ((p, g), v) in state.net.params_mut().iter_mut().zip(&mut sum).zip(&mut state.velocity) {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
                sgd_momentum_step(&mut p.value, g, v, lr, config.momentum)?;
            }
            for o in &outs {
                for (t, v) in terms.iter_mut().zip(o.terms) {
                    *t += v;
                }
                total += o.total;
                skipped += o.skipped;
                correct += o.correct as usize;
            }
        }
        state.epoch += 1;
        let n = samples.len() as f64;
        let log = EpochLog {
            epoch: state.epoch,
            terms: terms.map(|t| t / n),
            total: total / n,
            bas_skipped: skipped,
            accuracy: correct as f64 / n,
            learning_rate: lr,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Trains a fresh copy of `net` for `config.epochs` epochs.
pub fn train(
    net: WsolNet,
    samples: &[Sample],
    config: &TrainConfig,
    loss: &LossConfig,
) -> Result<(WsolNet, Vec<EpochLog>)> {
    let mut state = TrainState::new(net, config.seed);
    let logs = train_epochs(&mut state, samples, config, loss, |_| {})?;
    Ok((state.net, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, strip_boxes, DatasetSpec};
    use crate::model::ModelConfig;

    #[test]
    fn momentum_step_examples() {
        let mut p = Tensor::scalar(1.0);
        let mut v = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert_eq!((p.data()[0], v.data()[0]), (0.9, 1.0));
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert_eq!(v.data()[0], 1.9);
        assert!((p.data()[0] - 0.71).abs() < 1e-15);

        let mut p = Tensor::new([2], vec![1.0, -2.0]).unwrap();
        let mut v = Tensor::new([2], vec![5.0, 5.0]).unwrap();
        let g = Tensor::new([2], vec![0.5, -0.25]).unwrap();
        sgd_momentum_step(&mut p, &g, &mut v, 0.5, 0.0).unwrap();
        assert_eq!(p.data(), &[0.75, -1.875]);

        let mut bad = Tensor::zeros([3]);
        assert!(matches!(sgd_momentum_step(&mut bad, &g, &mut v, 0.1, 0.9), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        let step = TrainConfig { lr_decay_every: 2, lr_decay: 0.5, ..Default::default() };
        assert_eq!(step.learning_rate_at(1), 0.001);
        assert_eq!(step.learning_rate_at(2), 0.0005);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 1, true);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 1, true));
        assert_ne!(a, epoch_order(50, 3, 2, true));
        assert_eq!(epoch_order(5, 3, 1, false), vec![0, 1, 2, 3, 4]);
    }

    fn tiny() -> (WsolNet, Vec<Sample>) {
        let spec = DatasetSpec { num_classes: 2, samples_per_class: 3, image_size: 32, ..Default::default() };
        let model = ModelConfig { input_size: 32, num_classes: 2, feature_channels: 8, ..Default::default() };
        (WsolNet::init(model).unwrap(), generate(&spec).unwrap())
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 4, learning_rate: 0.01, ..Default::default() }
    }

    fn flat(net: &WsolNet) -> Vec<f64> {
        net.params().iter().flat_map(|p| p.value.data().to_vec()).collect()
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (net, data) = tiny();
        let before = flat(&net);
        let (after, logs) = train(net, &data, &TrainConfig { epochs: 0, ..quick() }, &LossConfig::default()).unwrap();
        assert!(logs.is_empty());
        assert_eq!(flat(&after), before);
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let (net, data) = tiny();
        let (a, la) = train(net.clone(), &data, &quick(), &LossConfig::default()).unwrap();
        let (b, lb) = train(net.clone(), &data, &quick(), &LossConfig::default()).unwrap();
        let (c, lc) = train(net, &data, &TrainConfig { threads: 3, ..quick() }, &LossConfig::default()).unwrap();
        assert_eq!(flat(&a), flat(&b));
        assert_eq!(flat(&a), flat(&c));
        assert_eq!(la, lb);
        assert_eq!(la, lc);
        assert_eq!(la.len(), 2);
        assert!(la.iter().all(|l| l.total.is_finite()));
    }

    #[test]
    fn boxes_do_not_influence_training() {
        let (net, data) = tiny();
        let (a, _) = train(net.clone(), &data, &quick(), &LossConfig::default()).unwrap();
        let (b, _) = train(net, &strip_boxes(&data), &quick(), &LossConfig::default()).unwrap();
        assert_eq!(flat(&a), flat(&b));
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let (mut net, data) = tiny();
        let bias = net.params_mut().iter_mut().find(|p| p.name == "classifier.1.bias").unwrap();
        bias.value.data_mut()[0] = f64::NAN;
        let err = train(net, &data, &TrainConfig { shuffle: false, ..quick() }, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical { term: "cls" }), "{err}");
    }

    #[test]
    fn bad_labels_are_rejected() {
        let (net, mut data) = tiny();
        data[0].label = 5;
        assert!(matches!(train(net, &data, &quick(), &LossConfig::default()), Err(Error::Index(_))));
    }

    #[test]
    fn log_line_lists_every_term() {
        let (net, data) = tiny();
        let (_, logs) = train(net, &data, &TrainConfig { epochs: 1, ..quick() }, &LossConfig::default()).unwrap();
        let line = logs[0].to_string();
        for t in Term::ALL {
            assert!(line.contains(&format!(" {t} ")), "{line}");
        }
        assert!(line.contains("skipped"));
    }
}
