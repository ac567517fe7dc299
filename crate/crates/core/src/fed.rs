//! Federated orchestration: the per-round protocol (download, Fisher, mask,
//! mix, local SGD, upload, aggregate) and the multi-round training driver.
//!
//! Clients within a round run concurrently; each owns its state, graph, and
//! an RNG stream derived from (seed, client, round), and aggregation waits
//! for every sampled client, so results are independent of scheduling.

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{self, EvalMode, MetricReport};
use crate::losses::{self, LossConfig};
use crate::model::Model;
use crate::params::{self, ParameterVector};
use crate::vrm::{self, VrmConfig};

#[derive(Clone, Debug)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: u64,
    pub local_epochs: usize,
    pub client_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 8,
            rounds: 10,
            local_epochs: 1,
            client_fraction: 1.0,
            learning_rate: 1e-2,
            batch_size: 512,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "client_fraction must be in (0, 1], got {}",
                self.client_fraction
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One next-item training example: the prefix `train(user)[..end]` predicts
/// `train(user)[end]`.
#[derive(Clone, Copy, Debug)]
pub struct Example {
    pub user: u32,
    pub end: usize,
}

/// All (prefix, target) pairs of the given users' train sequences.
pub fn build_examples(split: &SplitDataset, users: &[u32]) -> Vec<Example> {
    let mut examples = Vec::new();
    for &user in users {
        for end in 1..split.train(user).len() {
            examples.push(Example { user, end });
        }
    }
    examples
}

/// One simulated edge device.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub users: Vec<u32>,
    /// Parameters retained from the previous round (theta_n^{t-1}).
    pub retained: ParameterVector,
    /// Base of this client's per-round RNG streams.
    pub seed: u64,
    pub round: u64,
    examples: Vec<Example>,
}

impl ClientState {
    pub fn new(
        id: usize,
        users: Vec<u32>,
        split: &SplitDataset,
        retained: ParameterVector,
        global_seed: u64,
    ) -> Self {
        let examples = build_examples(split, &users);
        ClientState {
            id,
            users,
            retained,
            seed: derive_seed(&[global_seed, 0xC11E57, id as u64]),
            round: 0,
            examples,
        }
    }

    pub fn num_examples(&self) -> usize {
        self.examples.len()
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub params: ParameterVector,
    pub round: u64,
}

/// Shared references for one training run.
pub struct TrainContext<'a> {
    pub model: &'a Model,
    pub split: &'a SplitDataset,
    pub fed: &'a FedConfig,
    pub vrm: &'a VrmConfig,
    pub loss: &'a LossConfig,
}

/// Result of one client's local round.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub upload: ParameterVector,
    pub samples: usize,
    /// Mean training loss (recommendation + regularizer) per local epoch.
    pub epoch_losses: Vec<f64>,
    pub frac_p1: f64,
    pub group_retention: Vec<(String, f64)>,
}

impl ClientUpdate {
    /// Loss reported in round logs: the last epoch's mean, NaN when no
    /// training steps ran.
    pub fn train_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Summed gradient and summed loss of the batch recommendation loss at
/// `params`. The batch objective is the batch log-likelihood, a sum of
/// per-example losses, matching the dataset-level likelihood the Fisher
/// estimate differentiates.
fn batch_gradient(
    model: &Model,
    params: &ParameterVector,
    batch: &[Example],
    split: &SplitDataset,
    mut dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::Contract("batch_gradient: empty batch".into()));
    }
    let mut grad = vec![0.0; params.len()];
    let mut loss_sum = 0.0;
    for ex in batch {
        let seq = split.train(ex.user);
        let prefix = &seq[..ex.end];
        let target = seq[ex.end];
        let mut graph = crate::tensor::Graph::new();
        let leaves = model.leaves(&mut graph, params)?;
        let train_mode = dropout_rng.is_some();
        let loss = model.example_loss(
            &mut graph,
            &leaves,
            prefix,
            target,
            train_mode,
            dropout_rng.as_deref_mut(),
        )?;
        loss_sum += graph.value(loss).item()?;
        graph.backward(loss)?;
        model.accumulate_grads(&graph, &leaves, &mut grad)?;
    }
    Ok((grad, loss_sum))
}

/// The local protocol, without mutating the client: Fisher at the retained
/// parameters, layer-wise normalization, threshold masks, local/global
/// mixing, then `local_epochs` of mini-batch SGD on the regularized loss.
pub fn compute_client_update(
    client: &ClientState,
    theta_global: &ParameterVector,
    ctx: &TrainContext<'_>,
    round: u64,
) -> Result<ClientUpdate> {
    if client.examples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "client {} has no training examples",
            client.id
        )));
    }
    if !client.retained.same_layout(theta_global) {
        return Err(Error::Contract(
            "client and global parameters use different layer maps".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(&[client.seed, round]));
    let layout = Arc::clone(client.retained.layout());

    let mut order: Vec<usize> = (0..client.examples.len()).collect();
    order.shuffle(&mut rng);
    let fisher_batches: Vec<Vec<Example>> = order
        .chunks(ctx.fed.batch_size)
        .take(ctx.vrm.fisher_batches)
        .map(|chunk| chunk.iter().map(|&i| client.examples[i]).collect())
        .collect();
    let fisher = vrm::fisher_values(&client.retained, &fisher_batches, |p, b| {
        batch_gradient(ctx.model, p, b, ctx.split, None).map(|(g, _)| g)
    })?;
    let i_hat = vrm::layerwise_normalize(fisher, &layout)?;
    let masks = vrm::build_masks(&i_hat, ctx.vrm.lambda)?;
    let mut theta = vrm::mix_parameters(&client.retained, theta_global, &masks)?;

    let prev = &client.retained;
    let mut epoch_losses = Vec::with_capacity(ctx.fed.local_epochs);
    for _ in 0..ctx.fed.local_epochs {
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0;
        for chunk in order.chunks(ctx.fed.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| client.examples[i]).collect();
            // Step objective: the batch log-likelihood (a sum over examples)
            // plus the parameter-space regularizer, entering once per step.
            let (mut grad, rec_sum) =
                batch_gradient(ctx.model, &theta, &batch, ctx.split, Some(&mut rng))?;
            let dml = losses::dynamic_magnitude_loss(&theta, prev, theta_global, &i_hat, ctx.loss)?;
            losses::dynamic_magnitude_grad(
                &theta,
                prev,
                theta_global,
                &i_hat,
                ctx.loss,
                &mut grad,
            )?;
            let lr = ctx.fed.learning_rate;
            for (t, g) in theta.values_mut().iter_mut().zip(&grad) {
                *t -= lr * g;
            }
            weighted_loss += rec_sum + dml;
        }
        epoch_losses.push(weighted_loss / client.examples.len() as f64);
    }

    Ok(ClientUpdate {
        upload: theta,
        samples: client.examples.len(),
        epoch_losses,
        frac_p1: masks.frac_retained(),
        group_retention: masks.group_retention(&layout),
    })
}

/// Run the local protocol and store the result as the client's new retained
/// parameters.
pub fn client_local_update(
    client: &mut ClientState,
    theta_global: &ParameterVector,
    ctx: &TrainContext<'_>,
    round: u64,
) -> Result<ClientUpdate> {
    let update = compute_client_update(client, theta_global, ctx, round)?;
    client.retained = update.upload.clone();
    client.round = round;
    Ok(update)
}

/// Sample-count-weighted elementwise average of the uploads.
///
/// Uploads are brought into a canonical order and averaged as
/// `base + sum_i w_i (v_i - base)`, which recovers a lone upload exactly,
/// returns the common vector bit-for-bit when all uploads agree, and makes
/// the result independent of upload order.
pub fn aggregate(uploads: &[(ParameterVector, usize)]) -> Result<ParameterVector> {
    let Some(first) = uploads.first() else {
        return Err(Error::Contract("aggregate: no uploads".into()));
    };
    if uploads.iter().any(|(p, _)| !p.same_layout(&first.0)) {
        return Err(Error::Contract(
            "aggregate: uploads use different layer maps".into(),
        ));
    }
    let mut order: Vec<usize> = (0..uploads.len()).collect();
    order.sort_by(|&i, &j| {
        uploads[i]
            .1
            .cmp(&uploads[j].1)
            .then_with(|| cmp_values(uploads[i].0.values(), uploads[j].0.values()))
    });
    let total: f64 = uploads.iter().map(|&(_, n)| n as f64).sum();
    if total <= 0.0 {
        return Err(Error::Contract("aggregate: zero total sample count".into()));
    }
    let base = &uploads[order[0]].0;
    let mut acc = base.values().to_vec();
    for &i in &order[1..] {
        let (v, n) = &uploads[i];
        let w = *n as f64 / total;
        for (a, (x, b)) in acc.iter_mut().zip(v.values().iter().zip(base.values())) {
            *a += w * (x - b);
        }
    }
    ParameterVector::new(Arc::clone(base.layout()), acc)
}

fn cmp_values(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

#[derive(Clone, Debug)]
pub struct ClientRoundRecord {
    pub client_id: usize,
    pub train_loss: f64,
    pub frac_p1: f64,
    pub samples: usize,
    pub group_retention: Vec<(String, f64)>,
    pub epoch_losses: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: u64,
    pub clients: Vec<ClientRoundRecord>,
}

/// One global round: sample clients, run their local updates concurrently,
/// aggregate the uploads, advance the server. Client failures are recorded
/// in the report; the round fails only if nobody uploads.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    ctx: &TrainContext<'_>,
    global_seed: u64,
) -> Result<RoundReport> {
    let round = server.round + 1;
    let n = clients.len();
    if n == 0 {
        return Err(Error::Contract("run_round: no clients".into()));
    }
    let m = ((ctx.fed.client_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut sampled: Vec<usize> = (0..n).collect();
    if m < n {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(&[global_seed, 0x5A3B1E, round]));
        sampled.shuffle(&mut rng);
        sampled.truncate(m);
        sampled.sort_unstable();
    }

    let results: Vec<(usize, Result<ClientUpdate>)> = sampled
        .par_iter()
        .map(|&i| {
            (
                i,
                compute_client_update(&clients[i], &server.params, ctx, round),
            )
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut uploads = Vec::new();
    for (i, result) in results {
        match result {
            Ok(update) => {
                records.push(ClientRoundRecord {
                    client_id: clients[i].id,
                    train_loss: update.train_loss(),
                    frac_p1: update.frac_p1,
                    samples: update.samples,
                    group_retention: update.group_retention.clone(),
                    epoch_losses: update.epoch_losses.clone(),
                    error: None,
                });
                clients[i].retained = update.upload.clone();
                clients[i].round = round;
                uploads.push((update.upload, update.samples));
            }
            Err(err) => records.push(ClientRoundRecord {
                client_id: clients[i].id,
                train_loss: f64::NAN,
                frac_p1: f64::NAN,
                samples: 0,
                group_retention: Vec::new(),
                epoch_losses: Vec::new(),
                error: Some(err.to_string()),
            }),
        }
    }
    if uploads.is_empty() {
        return Err(Error::Contract(
            "run_round: every sampled client failed".into(),
        ));
    }
    server.params = aggregate(&uploads)?;
    server.round = round;
    Ok(RoundReport {
        round,
        clients: records,
    })
}

/// Whose parameters a metric row was computed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Global,
    Client(usize),
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scope::Global => write!(f, "global"),
            Scope::Client(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub round: u64,
    pub scope: Scope,
    pub mode: EvalMode,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Evaluate every this many rounds (0 = final round only).
    pub eval_interval: usize,
    /// Checkpoint every this many rounds (0 = final round only).
    pub checkpoint_interval: usize,
    /// Where to write checkpoints; none disables them.
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct TrainingOutput {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub rounds: Vec<RoundReport>,
    pub metrics: Vec<MetricRow>,
}

/// Initialize once, replicate to every client, run the configured rounds,
/// and evaluate each client's retained parameters on its own users plus the
/// global parameters on everyone.
pub fn run_training(
    ctx: &TrainContext<'_>,
    partition: Vec<Vec<u32>>,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainingOutput> {
    ctx.fed.validate()?;
    ctx.vrm.validate()?;
    ctx.loss.validate()?;
    if partition.len() != ctx.fed.num_clients {
        return Err(Error::Contract(format!(
            "partition has {} groups for {} clients",
            partition.len(),
            ctx.fed.num_clients
        )));
    }
    let initial = ctx.model.init_parameters(seed);
    let mut server = ServerState {
        params: initial.clone(),
        round: 0,
    };
    let mut clients: Vec<ClientState> = partition
        .into_iter()
        .enumerate()
        .map(|(id, users)| ClientState::new(id, users, ctx.split, initial.clone(), seed))
        .collect();

    let mut rounds = Vec::new();
    let mut metrics = Vec::new();
    for t in 1..=ctx.fed.rounds {
        rounds.push(run_round(&mut server, &mut clients, ctx, seed)?);
        let last = t == ctx.fed.rounds;
        if last || (opts.eval_interval > 0 && t % opts.eval_interval as u64 == 0) {
            metrics.extend(evaluate_round(ctx, &server, &clients, t)?);
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if last || (opts.checkpoint_interval > 0 && t % opts.checkpoint_interval as u64 == 0) {
                write_checkpoints(dir, t, &server, &clients)?;
            }
        }
    }
    Ok(TrainingOutput {
        server,
        clients,
        rounds,
        metrics,
    })
}

fn evaluate_round(
    ctx: &TrainContext<'_>,
    server: &ServerState,
    clients: &[ClientState],
    round: u64,
) -> Result<Vec<MetricRow>> {
    let all_users: Vec<u32> = clients
        .iter()
        .flat_map(|c| c.users.iter().copied())
        .collect();
    let mut tasks: Vec<(Scope, &ParameterVector, &[u32])> =
        vec![(Scope::Global, &server.params, &all_users)];
    for client in clients {
        tasks.push((Scope::Client(client.id), &client.retained, &client.users));
    }
    let rows: Vec<Result<Vec<MetricRow>>> = tasks
        .par_iter()
        .map(|&(scope, params, users)| {
            let mut out = Vec::with_capacity(2);
            for mode in [EvalMode::Validation, EvalMode::Test] {
                let report = eval::evaluate(ctx.model, params, ctx.split, users, mode)?;
                out.push(MetricRow {
                    round,
                    scope,
                    mode,
                    report,
                });
            }
            Ok(out)
        })
        .collect();
    let mut metrics = Vec::new();
    for row in rows {
        metrics.extend(row?);
    }
    Ok(metrics)
}

fn write_checkpoints(
    dir: &std::path::Path,
    round: u64,
    server: &ServerState,
    clients: &[ClientState],
) -> Result<()> {
    let round_dir = dir.join(format!("round_{round:04}"));
    params::save_checkpoint(&round_dir.join("global.pfsr"), &server.params)?;
    for client in clients {
        params::save_checkpoint(
            &round_dir.join(format!("client_{}.pfsr", client.id)),
            &client.retained,
        )?;
    }
    Ok(())
}

/// Stable seed mixing for per-client, per-round RNG streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
