//! Finite-difference verification of every loss term against the tape's
//! backward pass, on a small two-class network.
//!
//! The losses are piecewise smooth: relus, threshold masks and the
//! background skip rule all switch branches. Perturbed evaluations replay
//! the branch decisions of the unperturbed pass, so both sides of a central
//! difference lie on the piece whose derivative the backward pass computes.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BranchLog, Tape, Tensor};
use crate::data::{generate, DatasetSpec};
use crate::error::Result;
use crate::losses::{term_loss, LossBreakdown, LossConfig, Term};
use crate::model::{ClassSelect, ModelConfig, WsolNet};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Central difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Break the backward pass on purpose, to show the check notices.
    pub corrupt_backward: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { seed: 0, step: 1e-5, tolerance: 1e-4, floor: 1e-6, corrupt_backward: false }
    }
}

/// The network checked: two classes, 64×64 input, 8×8 features.
pub fn toy_model(seed: u64) -> ModelConfig {
    ModelConfig { input_size: 64, num_classes: 2, feature_channels: 4, feature_stride: 8, backbone_blocks: 3, seed }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermReport {
    pub term: Term,
    pub worst_relative_error: f64,
    /// `name[index]` of the worst entry.
    pub worst_at: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Entries whose step would have crossed a kink or threshold; these are
    /// compared on the branch taken at the unperturbed point.
    pub straddling: usize,
    /// Largest analytic gradient magnitude. Zero means the term had nothing
    /// to check and counts as a failure.
    pub max_gradient: f64,
}

impl TermReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst_relative_error < tolerance && self.max_gradient > 0.0
    }
}

impl fmt::Display for TermReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.max_gradient == 0.0 {
            return write!(f, "{:<7} gradient is identically zero, nothing checked", self.term.name());
        }
        write!(
            f,
            "{:<7} worst rel err {:.3e} at {} (analytic {:.6e}, numeric {:.6e}, {} entries, {} straddling a kink)",
            self.term.name(),
            self.worst_relative_error,
            self.worst_at,
            self.analytic,
            self.numeric,
            self.checked,
            self.straddling
        )
    }
}

struct Problem {
    images: Tensor,
    labels: Vec<usize>,
    loss: LossConfig,
}

/// The midpoint of the widest gap between sorted foreground values near
/// quantile `q`, so that a parameter step cannot move a cell across it.
fn gap_threshold(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let centre = ((n - 1) as f64 * q) as usize;
    let window = (n / 10).max(1);
    let lo = centre.saturating_sub(window);
    let hi = (centre + window).min(n - 2);
    let k = (lo..=hi)
        .max_by(|&a, &b| (sorted[a + 1] - sorted[a]).total_cmp(&(sorted[b + 1] - sorted[b])))
        .expect("non-empty window");
    0.5 * (sorted[k] + sorted[k + 1])
}

impl Problem {
    /// Builds the inputs and the network. Biases are drawn at random so
    /// that no relu input sits exactly on its kink, the final classifier
    /// bias is raised so the clamped class scores stay away from zero, and
    /// thresholds sit inside the range of the initial foreground values so
    /// every mask is non-trivial.
    fn new(seed: u64) -> Result<(Self, WsolNet)> {
        let spec = DatasetSpec { num_classes: 2, samples_per_class: 2, image_size: 64, seed, ..Default::default() };
        let samples = generate(&spec)?;
        let mut data = Vec::new();
        for s in &samples {
            data.extend_from_slice(s.image.data());
        }
        // The background ratio is checked as a function of every parameter,
        // so its classifier path stays attached here.
        let loss = LossConfig { bas_detach_classifier: false, ..LossConfig::default() };
        let mut problem = Problem {
            images: Tensor::new([samples.len(), 3, 64, 64], data)?,
            labels: samples.iter().map(|s| s.label).collect(),
            loss,
        };
        let mut net = WsolNet::init(toy_model(seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last_bias = net.params().iter().rposition(|p| p.name.starts_with("classifier.") && p.name.ends_with(".bias"));
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            if p.name.ends_with(".bias") {
                let base = if Some(i) == last_bias { 1.0 } else { 0.0 };
                p.value.data_mut().iter_mut().for_each(|b| *b = base + rng.random_range(-0.1..0.1));
            }
        }

        let tape = Tape::new();
        let bound = net.bind(&tape);
        let b = bound.forward(tape.constant(problem.images.clone()), ClassSelect::GroundTruth(&problem.labels))?;
        let mut fg = b.foreground.value().data().to_vec();
        fg.sort_by(f64::total_cmp);
        let th = &mut problem.loss.thresholds;
        th.t1 = gap_threshold(&fg, 0.8);
        th.t2 = gap_threshold(&fg, 0.7);
        th.t3 = gap_threshold(&fg, 0.6);
        th.t4 = gap_threshold(&fg, 0.2);
        Ok((problem, net))
    }

    fn value(&self, net: &WsolNet, term: Term, branches: &BranchLog) -> Result<(f64, bool)> {
        let tape = Tape::new();
        tape.replay_branches(branches.clone());
        let bound = net.bind(&tape);
        let b = bound.forward(tape.constant(self.images.clone()), ClassSelect::GroundTruth(&self.labels))?;
        let v = term_loss(term, &b, &self.labels, &bound, &self.loss, &mut LossBreakdown::default())?.item();
        Ok((v, tape.overridden_branches() > 0))
    }

    /// Analytic gradient plus the branch decisions taken at `net`.
    fn gradient(&self, net: &WsolNet, term: Term, corrupt: bool) -> Result<(Vec<Tensor>, BranchLog)> {
        let tape = Tape::new();
        tape.record_branches();
        if corrupt {
            tape.inject_backward_fault();
        }
        let bound = net.bind(&tape);
        let b = bound.forward(tape.constant(self.images.clone()), ClassSelect::GroundTruth(&self.labels))?;
        let loss = term_loss(term, &b, &self.labels, &bound, &self.loss, &mut LossBreakdown::default())?;
        let g = tape.backward(loss)?;
        Ok((bound.vars().iter().map(|&v| g.wrt(v)).collect(), tape.branch_log()))
    }
}

/// Compares analytic and central-difference gradients on every parameter
/// entry, for each of the seven terms.
pub fn run(config: &GradcheckConfig) -> Result<Vec<TermReport>> {
    let (problem, mut net) = Problem::new(config.seed)?;
    let h = config.step;
    let mut reports = Vec::new();
    for term in Term::ALL {
        let (analytic, branches) = problem.gradient(&net, term, config.corrupt_backward)?;
        let mut report = TermReport {
            term,
            worst_relative_error: 0.0,
            worst_at: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            straddling: 0,
            max_gradient: 0.0,
        };
        for (pi, grad) in analytic.iter().enumerate() {
            for j in 0..grad.len() {
                let orig = net.params()[pi].value.data()[j];
                net.params_mut()[pi].value.data_mut()[j] = orig + h;
                let (plus, kink_plus) = problem.value(&net, term, &branches)?;
                net.params_mut()[pi].value.data_mut()[j] = orig - h;
                let (minus, kink_minus) = problem.value(&net, term, &branches)?;
                report.straddling += (kink_plus || kink_minus) as usize;
                net.params_mut()[pi].value.data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = grad.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
                report.checked += 1;
                report.max_gradient = report.max_gradient.max(a.abs());
                if !(rel <= report.worst_relative_error) {
                    report.worst_relative_error = rel;
                    report.worst_at = format!("{}[{j}]", net.params()[pi].name);
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// True when every term is within tolerance.
pub fn passed(reports: &[TermReport], config: &GradcheckConfig) -> bool {
    reports.iter().all(|r| r.passed(config.tolerance))
}
