use rand::seq::{index, SliceRandom};

use super::messages::{ClientUpdate, FeaturePair, ServerBroadcast, Shells};
use super::RunMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{GradientSet, GroupMask};
use crate::model::SplitModel;
use crate::optim::{Adam, AdamConfig};
use crate::resolve::Resolver;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Per-round knobs every client shares.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientSettings {
    pub mode: RunMode,
    pub inner_epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub resolver: Resolver,
    pub upload_cap: usize,
    pub exclude_self: bool,
    pub learning_rate: f64,
    pub seed: u64,
}

/// A participant: its model, optimizer state and the indices of its
/// training shard.
#[derive(Clone, Debug)]
pub struct Client {
    pub id: usize,
    pub model: SplitModel<f32>,
    pub optimizer: Adam,
    pub shard: Vec<usize>,
}

impl Client {
    pub fn new(id: usize, model: SplitModel<f32>, shard: Vec<usize>, adam: AdamConfig) -> Self {
        let optimizer = Adam::new(&model, adam);
        Self {
            id,
            model,
            optimizer,
            shard,
        }
    }
}

/// Cross-entropy gradient over every group for one batch, plus the
/// `(s_in, s_out)` pairs seen on the way. The model is not updated.
pub fn client_local_step(
    model: &SplitModel<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    client_id: usize,
    round: usize,
) -> Result<(GradientSet, Vec<FeaturePair>, f32)> {
    if labels.is_empty() {
        return Err(Error::validation("local step needs a non-empty batch"));
    }
    let pass = model.local_pass(x, labels)?;
    let pairs = (0..pass.s_in.rows())
        .map(|i| FeaturePair {
            s_in: pass.s_in.row(i).to_vec(),
            s_out: pass.s_out.row(i).to_vec(),
            client_id,
            round,
        })
        .collect();
    Ok((pass.grads, pairs, pass.loss))
}

/// MSE between the intermediate layers' output on each `s_in` and its
/// `s_out`. Only the intermediate group of the gradient is non-zero.
pub fn client_in_step(model: &SplitModel<f32>, feature_batch: &[&FeaturePair]) -> Result<(GradientSet, f32)> {
    let Some(first) = feature_batch.first() else {
        return Err(Error::validation("IN step needs a non-empty feature batch"));
    };
    let (din, dout) = (first.s_in.len(), first.s_out.len());
    let arch = model.arch();
    if din != arch.feature_dim_in || dout != arch.feature_dim_out {
        return Err(Error::validation(format!(
            "feature widths ({din}, {dout}) do not match the model's ({}, {})",
            arch.feature_dim_in, arch.feature_dim_out
        )));
    }
    let mut s_in = Vec::with_capacity(feature_batch.len() * din);
    let mut s_out = Vec::with_capacity(feature_batch.len() * dout);
    for p in feature_batch {
        if p.s_in.len() != din || p.s_out.len() != dout {
            return Err(Error::validation("feature batch has inconsistent widths"));
        }
        s_in.extend_from_slice(&p.s_in);
        s_out.extend_from_slice(&p.s_out);
    }
    let n = feature_batch.len();
    model.intermediate_pass(&Tensor::new(vec![n, din], s_in)?, &Tensor::new(vec![n, dout], s_out)?)
}

/// Cycles through the broadcast sample one batch at a time.
struct RoundRobin<'a> {
    pool: Vec<&'a FeaturePair>,
    cursor: usize,
}

impl<'a> RoundRobin<'a> {
    fn next_batch(&mut self, size: usize) -> Vec<&'a FeaturePair> {
        let n = size.min(self.pool.len());
        let out = (0..n).map(|j| self.pool[(self.cursor + j) % self.pool.len()]).collect();
        self.cursor = (self.cursor + n) % self.pool.len();
        out
    }
}

/// One client's share of a round: adopt the broadcast weights, train
/// for the configured epochs and report back.
pub fn client_round(
    client: &mut Client,
    broadcast: &ServerBroadcast,
    data: &Dataset,
    settings: &ClientSettings,
) -> Result<ClientUpdate> {
    let mode = settings.mode;
    let round = broadcast.round;
    if settings.batch_size == 0 {
        return Err(Error::validation("batch_size must be at least 1"));
    }
    if let (Some(shells), true) = (&broadcast.shells, mode.installs_broadcast()) {
        shells.install(&mut client.model)?;
        let reset = if shells.intermediate.is_some() { GroupMask::ALL } else { GroupMask::SHELLS };
        client.optimizer.reset(reset);
    }

    let pool: Vec<&FeaturePair> = if mode.uses_in_training() {
        broadcast
            .sample
            .iter()
            .filter(|p| !(settings.exclude_self && p.client_id == client.id))
            .collect()
    } else {
        Vec::new()
    };
    let mut feed = RoundRobin { pool, cursor: 0 };

    let lr = settings.learning_rate;
    let mut captured = Vec::new();
    let (mut local_sum, mut in_sum, mut steps, mut in_steps) = (0.0f64, 0.0f64, 0usize, 0usize);
    for epoch in 0..settings.inner_epochs {
        let mut order = client.shard.clone();
        order.shuffle(&mut rng::stream(
            settings.seed,
            &[tag::SHUFFLE, client.id as u64, round as u64, epoch as u64],
        ));
        for chunk in order.chunks(settings.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let (g_local, pairs, loss) = client_local_step(&client.model, &x, &y, client.id, round)?;
            local_sum += f64::from(loss);
            steps += 1;
            if mode.uses_in_training() {
                captured.extend(pairs);
            }
            if feed.pool.is_empty() {
                client.optimizer.step(&mut client.model, &g_local, lr, GroupMask::ALL)?;
                continue;
            }
            let fb = feed.next_batch(settings.batch_size);
            let in_loss = match mode {
                RunMode::FedinIgnoreDivergence => {
                    client.optimizer.step(&mut client.model, &g_local, lr, GroupMask::ALL)?;
                    let (g_in, in_loss) = client_in_step(&client.model, &fb)?;
                    client.optimizer.step(&mut client.model, &g_in, lr, GroupMask::INTERMEDIATE)?;
                    in_loss
                }
                _ => {
                    let (g_in, in_loss) = client_in_step(&client.model, &fb)?;
                    let z = settings.resolver.resolve(&g_in, &g_local, settings.lambda)?;
                    client.optimizer.step(&mut client.model, &z, lr, GroupMask::ALL)?;
                    in_loss
                }
            };
            in_sum += f64::from(in_loss);
            in_steps += 1;
        }
    }

    let amount = settings.upload_cap.min(captured.len());
    let mut keep = index::sample(
        &mut rng::stream(settings.seed, &[tag::UPLOAD, client.id as u64, round as u64]),
        captured.len(),
        amount,
    )
    .into_vec();
    keep.sort_unstable();
    let pairs = keep.into_iter().map(|i| captured[i].clone()).collect();

    Ok(ClientUpdate {
        client_id: client.id,
        shells: Shells::from_model(&client.model, mode == RunMode::Fedavg),
        pairs,
        local_loss: if steps == 0 { 0.0 } else { (local_sum / steps as f64) as f32 },
        in_loss: (in_steps > 0).then(|| (in_sum / in_steps as f64) as f32),
        num_samples: client.shard.len(),
    })
}
