//! Central finite-difference verification of the reverse-mode gradients,
//! group by group, through the full model loss plus the dynamic magnitude
//! regularizer.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::params::ParameterVector;
use crate::tensor::Graph;
use crate::vrm::FisherVector;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradcheckSettings {
    pub model: ModelConfig,
    pub seq_len: usize,
    pub seed: u64,
    /// Test fixture: perturb the analytic gradient of the first group so the
    /// comparison must fail.
    pub corrupt: bool,
}

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < GRADCHECK_TOLERANCE
    }

    pub fn offenders(&self) -> Vec<&GroupCheck> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err >= GRADCHECK_TOLERANCE)
            .collect()
    }
}

/// Relative error with the denominator floored so exact zeros compare sanely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Check every parameter element of every layer group: analytic gradients of
/// `rec_loss + L_DML` against central finite differences.
pub fn run_gradcheck(settings: &GradcheckSettings) -> Result<GradcheckReport> {
    let model = Model::new(settings.model.clone())?;
    let mut rng = ChaCha12Rng::seed_from_u64(settings.seed);
    let params = model.init_parameters(settings.seed);
    let layout = Arc::clone(model.layout());

    // One random example drives the recommendation loss; random anchors and
    // normalized Fisher weights make the regularizer's gradient nonzero for
    // every element, the padding row included.
    let vocab = settings.model.vocab_size;
    let seq: Vec<u32> = (0..settings.seq_len)
        .map(|_| rng.random_range(1..=vocab))
        .collect();
    let target: u32 = rng.random_range(1..=vocab);
    let d_theta = layout.total_len();
    let prev = random_params(&params, &mut rng, 0.2);
    let glob = random_params(&params, &mut rng, 0.2);
    let i_hat = FisherVector::new((0..d_theta).map(|_| rng.random::<f64>()).collect(), true)?;
    let loss_cfg = LossConfig::default();

    let loss_at = |theta: &ParameterVector| -> Result<f64> {
        let mut graph = Graph::new();
        let leaves = model.leaves(&mut graph, theta)?;
        let loss = model.example_loss(&mut graph, &leaves, &seq, target, false, None)?;
        let rec = graph.value(loss).item()?;
        let dml = losses::dynamic_magnitude_loss(theta, &prev, &glob, &i_hat, &loss_cfg)?;
        Ok(rec + dml)
    };

    // Analytic gradient at the initial point.
    let mut analytic = vec![0.0; d_theta];
    {
        let mut graph = Graph::new();
        let leaves = model.leaves(&mut graph, &params)?;
        let loss = model.example_loss(&mut graph, &leaves, &seq, target, false, None)?;
        graph.backward(loss)?;
        model.accumulate_grads(&graph, &leaves, &mut analytic)?;
        losses::dynamic_magnitude_grad(&params, &prev, &glob, &i_hat, &loss_cfg, &mut analytic)?;
    }
    if settings.corrupt {
        let g = &layout.groups()[0];
        for v in analytic[g.offset..g.offset + g.len].iter_mut() {
            *v += 1e-2;
        }
    }

    let mut theta = params.clone();
    let mut groups = Vec::with_capacity(layout.groups().len());
    for group in layout.groups() {
        let mut max_rel = 0.0f64;
        #[allow(clippy::needless_range_loop)]
        for m in group.offset..group.offset + group.len {
            let orig = theta.values()[m];
            theta.values_mut()[m] = orig + FD_STEP;
            let up = loss_at(&theta)?;
            theta.values_mut()[m] = orig - FD_STEP;
            let down = loss_at(&theta)?;
            theta.values_mut()[m] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic[m], fd));
        }
        groups.push(GroupCheck {
            group: group.name.clone(),
            max_rel_err: max_rel,
        });
    }
    Ok(GradcheckReport { groups })
}

fn random_params(like: &ParameterVector, rng: &mut ChaCha12Rng, scale: f64) -> ParameterVector {
    let values = (0..like.len())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    ParameterVector::new(Arc::clone(like.layout()), values).expect("matching layout")
}
