//! Federated averaging over the EEM and lumen model pair.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::DEFAULT_OMEGA;
use crate::nn::AdamHyper;
use crate::par;
use crate::params::ModelParams;
use crate::phantom::PhantomCase;
use crate::pipeline::PipelineConfig;
use crate::seed;
use crate::tensor::Tensor;
use crate::transport::{self, ClientHello, ClientOptions, ServerOptions};
use crate::unet::{init_params, Optimizer, UNetConfig, UNetModel};

pub const EEM_PREFIX: &str = "eem/";
pub const LUMEN_PREFIX: &str = "lumen/";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub n_clients: usize,
    pub rounds: u32,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub omega: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            n_clients: 3,
            rounds: 10,
            local_epochs: 1,
            batch_size: 4,
            learning_rate: 1e-5,
            l2_lambda: 1e-4,
            omega: DEFAULT_OMEGA,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("n_clients, local_epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.l2_lambda >= 0.0) {
            return Err(Error::config("learning rate and L2 weight must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::config(format!("loss weight {} outside [0, 1]", self.omega)));
        }
        Ok(())
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper { learning_rate: self.learning_rate, l2_lambda: self.l2_lambda, ..AdamHyper::default() }
    }
}

/// Joins the two model streams into one parameter set.
pub fn combine_pair(eem: &ModelParams, lumen: &ModelParams) -> Result<ModelParams> {
    let mut out = eem.prefixed(EEM_PREFIX);
    out.extend(lumen.prefixed(LUMEN_PREFIX))?;
    Ok(out)
}

pub fn split_pair(params: &ModelParams) -> (ModelParams, ModelParams) {
    (params.strip_prefix(EEM_PREFIX), params.strip_prefix(LUMEN_PREFIX))
}

/// Seeded initial weights for both models.
pub fn init_pair(unet: &UNetConfig, seed: u64) -> Result<ModelParams> {
    let model_seed = seed::derive(seed, seed::TAG_MODEL);
    let eem = init_params(&UNetConfig { seed: seed::derive(model_seed, 0), ..*unet })?;
    let lumen = init_params(&UNetConfig { seed: seed::derive(model_seed, 1), ..*unet })?;
    combine_pair(&eem, &lumen)
}

/// Both models with weights taken from a combined parameter set.
pub fn build_pair(unet: &UNetConfig, params: &ModelParams) -> Result<(UNetModel, UNetModel)> {
    let (eem, lumen) = split_pair(params);
    Ok((UNetModel::with_params(*unet, eem)?, UNetModel::with_params(*unet, lumen)?))
}

/// Training frames in model space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalDataset {
    pub inputs: Vec<Tensor>,
    pub eem_targets: Vec<BinaryMask>,
    pub lumen_targets: Vec<BinaryMask>,
}

impl LocalDataset {
    pub fn from_cases<'a>(cases: impl IntoIterator<Item = &'a PhantomCase>, pipeline: &PipelineConfig) -> Result<Self> {
        let mut d = LocalDataset::default();
        for case in cases {
            for i in 0..case.frame_count() {
                d.inputs.push(pipeline.model_input(&case.frames[i])?);
                d.eem_targets.push(pipeline.model_target(&case.eem_masks[i])?);
                d.lumen_targets.push(pipeline.model_target(&case.lumen_masks[i])?);
            }
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<BinaryMask>, Vec<BinaryMask>)> {
        let inputs: Vec<Tensor> = idx.iter().map(|&i| self.inputs[i].clone()).collect();
        Ok((
            Tensor::stack(&inputs)?,
            idx.iter().map(|&i| self.eem_targets[i].clone()).collect(),
            idx.iter().map(|&i| self.lumen_targets[i].clone()).collect(),
        ))
    }
}

/// FedAvg: coordinate-wise mean weighted by `counts`, accumulated in f64.
pub fn aggregate(client_params: &[ModelParams], counts: &[u64]) -> Result<ModelParams> {
    let Some(first) = client_params.first() else {
        return Err(Error::config("nothing to aggregate"));
    };
    if counts.len() != client_params.len() {
        return Err(Error::config(format!(
            "{} parameter sets but {} sample counts",
            client_params.len(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::config("every client must hold at least one sample"));
    }
    for p in &client_params[1..] {
        first.check_layout(p)?;
    }
    let total: u64 = counts.iter().sum();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut acc = vec![0f64; first.param_count()];
    for (p, &wt) in client_params.iter().zip(&weights) {
        for (a, v) in acc.iter_mut().zip(p.tensors().flat_map(|t| t.data().iter())) {
            *a += wt * *v as f64;
        }
    }
    let flat: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    ModelParams::unflatten(&first.layout(), &flat)
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub params: ModelParams,
    pub sample_count: u64,
    /// Mean batch loss over the local epochs, per model.
    pub eem_loss: f64,
    pub lumen_loss: f64,
}

fn train_model(
    unet: &UNetConfig,
    start: ModelParams,
    data: &LocalDataset,
    order: &[Vec<usize>],
    fed: &FedConfig,
    targets: fn(&(Tensor, Vec<BinaryMask>, Vec<BinaryMask>)) -> &[BinaryMask],
) -> Result<(ModelParams, f64)> {
    let mut model = UNetModel::with_params(*unet, start)?;
    model.reset_optimizer(fed.adam_hyper());
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for epoch in order {
        for idx in epoch.chunks(fed.batch_size) {
            let b = data.batch(idx)?;
            loss_sum += model.train_batch(&b.0, targets(&b), fed.omega, fed.optimizer)?;
            batches += 1;
        }
    }
    Ok((model.into_params(), loss_sum / batches as f64))
}

/// Local update for one round: fresh optimizer state, `local_epochs` passes
/// over a seeded shuffle, both models trained side by side.
pub fn client_update(client_id: u32, round: u32, global: &ModelParams, data: &LocalDataset, unet: &UNetConfig, fed: &FedConfig) -> Result<ClientUpdate> {
    fed.validate()?;
    if data.is_empty() {
        return Err(Error::config(format!("client {client_id} has no training frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_path(
        fed.seed,
        &[seed::TAG_SHUFFLE, client_id as u64, round as u64],
    ));
    let order: Vec<Vec<usize>> = (0..fed.local_epochs)
        .map(|_| {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let (eem, lumen) = split_pair(global);
    let (e, l) = par::join(
        || train_model(unet, eem, data, &order, fed, |b| &b.1),
        || train_model(unet, lumen, data, &order, fed, |b| &b.2),
    );
    let ((eem, eem_loss), (lumen, lumen_loss)) = (e?, l?);
    Ok(ClientUpdate {
        params: combine_pair(&eem, &lumen)?,
        sample_count: data.len() as u64,
        eem_loss,
        lumen_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub sample_counts: Vec<u64>,
    /// Mean of the EEM and lumen training losses, per client.
    pub client_losses: Vec<f64>,
    pub global_metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    #[default]
    InProcess,
    /// Real framed messages over loopback TCP.
    Wire,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedOutcome {
    pub params: ModelParams,
    pub logs: Vec<RoundLog>,
}

/// Optional per-round evaluation of the global weights.
pub type RoundEvaluator<'a> = dyn Fn(u32, &ModelParams) -> Result<BTreeMap<String, f64>> + Sync + 'a;

fn check_run(datasets: &[LocalDataset], unet: &UNetConfig, fed: &FedConfig) -> Result<()> {
    fed.validate()?;
    unet.validate()?;
    if datasets.len() != fed.n_clients {
        return Err(Error::config(format!(
            "{} client datasets for n_clients = {}",
            datasets.len(),
            fed.n_clients
        )));
    }
    if let Some(i) = datasets.iter().position(LocalDataset::is_empty) {
        return Err(Error::config(format!("client {i} has no training frames")));
    }
    Ok(())
}

fn evaluate(evaluator: Option<&RoundEvaluator>, round: u32, params: &ModelParams) -> Result<BTreeMap<String, f64>> {
    evaluator.map_or(Ok(BTreeMap::new()), |f| f(round, params))
}

/// Runs all rounds. Client `j` is `datasets[j]`; updates are aggregated in
/// client order so both transports give bit-identical weights.
pub fn server_run(datasets: &[LocalDataset], unet: &UNetConfig, fed: &FedConfig, mode: TransportMode, evaluator: Option<&RoundEvaluator>) -> Result<FedOutcome> {
    check_run(datasets, unet, fed)?;
    let initial = init_pair(unet, fed.seed)?;
    match mode {
        TransportMode::InProcess => run_in_process(datasets, unet, fed, initial, evaluator),
        TransportMode::Wire => run_over_loopback(datasets, unet, fed, initial, evaluator),
    }
}

fn run_in_process(datasets: &[LocalDataset], unet: &UNetConfig, fed: &FedConfig, initial: ModelParams, evaluator: Option<&RoundEvaluator>) -> Result<FedOutcome> {
    let mut global = initial;
    let mut logs = Vec::with_capacity(fed.rounds as usize);
    for round in 1..=fed.rounds {
        let updates = par::map_range(datasets.len(), |j| client_update(j as u32, round, &global, &datasets[j], unet, fed))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let counts: Vec<u64> = updates.iter().map(|u| u.sample_count).collect();
        let client_losses = updates.iter().map(|u| 0.5 * (u.eem_loss + u.lumen_loss)).collect();
        let params: Vec<ModelParams> = updates.into_iter().map(|u| u.params).collect();
        global = aggregate(&params, &counts)?;
        logs.push(RoundLog {
            round,
            sample_counts: counts,
            client_losses,
            global_metrics: evaluate(evaluator, round, &global)?,
        });
    }
    Ok(FedOutcome { params: global, logs })
}

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

fn run_over_loopback(datasets: &[LocalDataset], unet: &UNetConfig, fed: &FedConfig, initial: ModelParams, evaluator: Option<&RoundEvaluator>) -> Result<FedOutcome> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let losses: Arc<Mutex<BTreeMap<(u32, u32), f64>>> = Arc::default();
    let opts = ServerOptions {
        n_clients: fed.n_clients,
        rounds: fed.rounds,
        handshake_timeout: HANDSHAKE_TIMEOUT,
        io_timeout: None,
    };
    thread::scope(|s| {
        let clients: Vec<_> = datasets
            .iter()
            .enumerate()
            .map(|(j, data)| {
                let losses = Arc::clone(&losses);
                s.spawn(move || {
                    let hello = ClientHello { client_id: j as u32, sample_count: data.len() as u64 };
                    transport::run_client(addr, hello, &ClientOptions::default(), |round, global| {
                        let u = client_update(j as u32, round, &global, data, unet, fed)?;
                        losses.lock().unwrap().insert((round, j as u32), 0.5 * (u.eem_loss + u.lumen_loss));
                        Ok(u.params)
                    })
                })
            })
            .collect();
        let mut logs = Vec::new();
        let served = transport::run_server(&listener, &opts, initial, |round, hellos, updates| {
            let counts: Vec<u64> = hellos.iter().map(|h| h.sample_count).collect();
            let global = aggregate(&updates, &counts)?;
            let table = losses.lock().unwrap();
            logs.push(RoundLog {
                round,
                client_losses: hellos.iter().map(|h| table.get(&(round, h.client_id)).copied().unwrap_or(f64::NAN)).collect(),
                sample_counts: counts,
                global_metrics: evaluate(evaluator, round, &global)?,
            });
            Ok(global)
        });
        let mut client_error = None;
        for c in clients {
            if let Err(e) = c.join().expect("client thread panicked") {
                client_error.get_or_insert(e);
            }
        }
        match (served, client_error) {
            (Ok(params), None) => Ok(FedOutcome { params, logs }),
            (Err(e), _) | (Ok(_), Some(e)) => Err(e),
        }
    })
}

/// Pooled training on one dataset with the same seed schedule as client 0.
/// Returns the weights after every round.
pub fn train_centralized(data: &LocalDataset, unet: &UNetConfig, fed: &FedConfig) -> Result<Vec<ModelParams>> {
    fed.validate()?;
    let mut params = init_pair(unet, fed.seed)?;
    let mut history = Vec::with_capacity(fed.rounds as usize);
    for round in 1..=fed.rounds {
        params = client_update(0, round, &params, data, unet, fed)?.params;
        history.push(params.clone());
    }
    Ok(history)
}
