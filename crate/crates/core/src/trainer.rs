//! Stochastic-gradient training of the generative model and inference
//! network, with KL annealing, validation early stopping and resumable
//! checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::Tape;
use crate::data::{Sequence, SequenceBatch};
use crate::elbo::{anneal_weight, elbo, elbo_graph};
use crate::error::{Error, Result};
use crate::gssm::{GenerativeModel, ModelConfig};
use crate::infnet::{InfNetConfig, InferenceNetwork};
use crate::params::{AdamConfig, ParamStore};
use crate::rng::{stream, Rng, RngState, Stream};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many parameter updates even mid-epoch.
    pub max_updates: Option<u64>,
    pub lr: f64,
    pub anneal_horizon: u64,
    pub n_samples: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub train_model: bool,
    pub train_net: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 20,
            epochs: 10,
            max_updates: None,
            lr: AdamConfig::default().lr,
            anneal_horizon: 5000,
            n_samples: 1,
            seed: 0,
            patience: 10,
            train_model: true,
            train_net: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::contract("patience must be at least 1"));
        }
        if self.anneal_horizon == 0 {
            return Err(Error::contract("anneal_horizon must be at least 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::contract("n_samples must be at least 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::contract("learning rate must be nonnegative"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: u64,
    pub epoch: u64,
    pub objective: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub anneal: f64,
    /// Set on the last update of an epoch when a validation set is used.
    pub valid_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Mean training objective over the epoch's updates.
    pub train_bound: f64,
    pub valid_bound: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub updates: Vec<UpdateRecord>,
    pub epochs: Vec<EpochRecord>,
    pub elapsed_secs: f64,
}

impl PartialEq for TrainLog {
    /// Wall-clock time is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.updates == other.updates && self.epochs == other.epochs
    }
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("update,epoch,objective,recon,kl,anneal,valid_bound\n");
        for r in &self.updates {
            let vb = r.valid_bound.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{},{},{},{}", r.update, r.epoch, r.objective, r.reconstruction, r.kl, r.anneal, vb)
                .expect("write to string");
        }
        s
    }

    pub fn best_valid(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.valid_bound).reduce(f64::max)
    }
}

#[derive(Clone, Debug)]
struct Best {
    bound: f64,
    model: ParamStore,
    net: ParamStore,
}

/// Training state; advance with [`Trainer::step`] or [`Trainer::run`].
pub struct Trainer<'d> {
    pub model: GenerativeModel,
    pub net: InferenceNetwork,
    cfg: TrainConfig,
    train: &'d SequenceBatch,
    valid: Option<&'d SequenceBatch>,
    update: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    shuffle_rng: Rng,
    noise_rng: Rng,
    valid_rng: Rng,
    best: Option<Best>,
    bad_epochs: usize,
    epoch_sum: f64,
    epoch_updates: u64,
    stopped: bool,
    pub log: TrainLog,
}

/// Checks that a model, network and dataset agree on every width.
pub fn check_compatible(model: &GenerativeModel, net: &InferenceNetwork, data: &SequenceBatch) -> Result<()> {
    let c = net.config();
    for (what, found, expected) in [
        ("inference network latent width", c.latent_dim, model.latent_dim()),
        ("inference network observation width", c.obs_dim, model.obs_dim()),
        ("dataset observation width", data.obs_dim, model.obs_dim()),
        ("dataset action width", data.action_dim, model.action_dim()),
        ("inference network action width", c.action_dim, model.action_dim()),
    ] {
        if found != expected {
            return Err(Error::Dim { what, found, expected });
        }
    }
    Ok(())
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: GenerativeModel,
        net: InferenceNetwork,
        train: &'d SequenceBatch,
        valid: Option<&'d SequenceBatch>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        check_compatible(&model, &net, train)?;
        if let Some(v) = valid {
            if v.is_empty() {
                return Err(Error::contract("validation set is empty"));
            }
            check_compatible(&model, &net, v)?;
        }
        Ok(Trainer {
            shuffle_rng: stream(cfg.seed, Stream::Shuffle),
            noise_rng: stream(cfg.seed, Stream::Noise),
            valid_rng: stream(cfg.seed, Stream::Validation),
            model,
            net,
            cfg,
            train,
            valid,
            update: 0,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            best: None,
            bad_epochs: 0,
            epoch_sum: 0.0,
            epoch_updates: 0,
            stopped: false,
            log: TrainLog::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn updates(&self) -> u64 {
        self.update
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Whether the epoch budget, update budget or patience is exhausted.
    pub fn finished(&self) -> bool {
        self.stopped
            || self.epoch as usize >= self.cfg.epochs
            || self.cfg.max_updates.is_some_and(|m| self.update >= m)
    }

    /// One parameter update on the next minibatch. A non-finite objective
    /// or gradient aborts before any parameter changes.
    pub fn step(&mut self) -> Result<UpdateRecord> {
        let n = self.train.len();
        if self.cursor == 0 {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.shuffle_rng);
        }
        let end = (self.cursor + self.cfg.batch_size).min(n);
        let seqs: Vec<&Sequence> = self.order[self.cursor..end].iter().map(|&i| &self.train.sequences[i]).collect();
        let anneal = anneal_weight(self.update, self.cfg.anneal_horizon);
        let tape = Tape::new();
        let (bm, bn) = (self.model.bind(&tape), self.net.bind(&tape));
        let g = elbo_graph(&bm, &bn, &seqs, anneal, self.cfg.n_samples, &mut self.noise_rng)?;
        let bd = g.breakdown;
        if !bd.objective.is_finite() {
            return Err(Error::Numerical {
                step: self.update as usize,
                msg: format!("objective is {}", bd.objective),
            });
        }
        let mut wanted: Vec<String> = Vec::new();
        if self.cfg.train_model {
            wanted.extend(self.model.trainable_ids());
        }
        if self.cfg.train_net {
            wanted.extend(self.net.params().ids().map(String::from));
        }
        let refs: Vec<&str> = wanted.iter().map(String::as_str).collect();
        let grads = tape.gradient(g.objective, &refs)?;
        drop(bn);
        drop(bm);
        if let Some((id, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Numerical {
                step: self.update as usize,
                msg: format!("non-finite gradient for `{id}`"),
            });
        }
        // Ascend the objective: hand the optimizer the negated gradient.
        let (mut gm, mut gn): (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) = (BTreeMap::new(), BTreeMap::new());
        for (id, t) in grads {
            let neg = t.map(|v| -v);
            if self.model.params().contains(&id) {
                gm.insert(id, neg);
            } else {
                gn.insert(id, neg);
            }
        }
        let adam = self.cfg.adam();
        if !gm.is_empty() {
            self.model.params_mut().adam_step(&gm, &adam)?;
        }
        if !gn.is_empty() {
            self.net.params_mut().adam_step(&gn, &adam)?;
        }
        let mut rec = UpdateRecord {
            update: self.update,
            epoch: self.epoch,
            objective: bd.objective,
            reconstruction: bd.reconstruction,
            kl: bd.kl_t1 + bd.kl_rest,
            anneal,
            valid_bound: None,
        };
        self.update += 1;
        self.cursor = end;
        self.epoch_sum += bd.objective;
        self.epoch_updates += 1;
        if self.cursor >= n {
            rec.valid_bound = self.end_epoch()?;
        }
        self.log.updates.push(rec.clone());
        Ok(rec)
    }

    fn end_epoch(&mut self) -> Result<Option<f64>> {
        let valid_bound = match self.valid {
            Some(v) => {
                let seqs: Vec<&Sequence> = v.sequences.iter().collect();
                let b = elbo(&self.model, &self.net, &seqs, 1.0, self.cfg.n_samples, &mut self.valid_rng)?.objective;
                if !b.is_finite() {
                    return Err(Error::Numerical {
                        step: self.update as usize,
                        msg: format!("validation bound is {b}"),
                    });
                }
                if self.best.as_ref().is_none_or(|best| b > best.bound) {
                    self.best = Some(Best {
                        bound: b,
                        model: self.model.params().clone(),
                        net: self.net.params().clone(),
                    });
                    self.bad_epochs = 0;
                } else {
                    self.bad_epochs += 1;
                    if self.bad_epochs >= self.cfg.patience {
                        self.stopped = true;
                    }
                }
                Some(b)
            }
            None => None,
        };
        self.log.epochs.push(EpochRecord {
            epoch: self.epoch,
            train_bound: self.epoch_sum / self.epoch_updates.max(1) as f64,
            valid_bound,
        });
        self.epoch += 1;
        self.cursor = 0;
        self.epoch_sum = 0.0;
        self.epoch_updates = 0;
        Ok(valid_bound)
    }

    /// Trains until [`Self::finished`].
    pub fn run(&mut self) -> Result<()> {
        let start = Instant::now();
        while !self.finished() {
            self.step()?;
        }
        self.log.elapsed_secs += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Best validation bound seen so far.
    pub fn best_bound(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.bound)
    }

    /// Consumes the trainer, returning the parameters with the best
    /// validation bound (or the final ones without a validation set).
    pub fn into_best(self) -> (GenerativeModel, InferenceNetwork, TrainLog) {
        let (mut model, mut net) = (self.model, self.net);
        if let Some(best) = self.best {
            *model.params_mut() = best.model;
            *net.params_mut() = best.net;
        }
        (model, net, self.log)
    }

    pub fn checkpoint(&self) -> Result<Value> {
        let best = match &self.best {
            Some(b) => json!({
                "bound": b.bound,
                "model": b.model.to_json()?,
                "net": b.net.to_json()?,
            }),
            None => Value::Null,
        };
        Ok(json!({
            "format_version": CHECKPOINT_VERSION,
            "model": model_json(&self.model)?,
            "net": net_json(&self.net)?,
            "train_config": self.cfg,
            "update": self.update,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "order": self.order,
            "rng": {
                "shuffle": RngState::capture(&self.shuffle_rng),
                "noise": RngState::capture(&self.noise_rng),
                "validation": RngState::capture(&self.valid_rng),
            },
            "best": best,
            "bad_epochs": self.bad_epochs,
            "epoch_sum": self.epoch_sum,
            "epoch_updates": self.epoch_updates,
            "stopped": self.stopped,
            "log": self.log,
        }))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.checkpoint()?)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Resumes from a checkpoint document over the same datasets.
    pub fn resume(doc: &Value, train: &'d SequenceBatch, valid: Option<&'d SequenceBatch>) -> Result<Self> {
        check_version(doc)?;
        let (model, net) = load_pair(doc)?;
        let field = |k: &str| doc.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint missing `{k}`")));
        let cfg: TrainConfig = serde_json::from_value(field("train_config")?)?;
        let mut t = Trainer::new(model, net, train, valid, cfg)?;
        t.update = serde_json::from_value(field("update")?)?;
        t.epoch = serde_json::from_value(field("epoch")?)?;
        t.cursor = serde_json::from_value(field("cursor")?)?;
        t.order = serde_json::from_value(field("order")?)?;
        if t.cursor > 0 && (t.order.len() != train.len() || t.order.iter().any(|&i| i >= train.len())) {
            return Err(Error::Format("checkpoint batch order does not fit the training set".into()));
        }
        let rng = field("rng")?;
        let state = |k: &str| -> Result<Rng> {
            let s: RngState = serde_json::from_value(rng.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint missing rng `{k}`")))?)?;
            s.restore()
        };
        t.shuffle_rng = state("shuffle")?;
        t.noise_rng = state("noise")?;
        t.valid_rng = state("validation")?;
        t.best = match field("best")? {
            Value::Null => None,
            b => Some(Best {
                bound: b["bound"].as_f64().ok_or_else(|| Error::Format("invalid best bound".into()))?,
                model: ParamStore::from_json(b["model"].clone())?,
                net: ParamStore::from_json(b["net"].clone())?,
            }),
        };
        t.bad_epochs = serde_json::from_value(field("bad_epochs")?)?;
        t.epoch_sum = serde_json::from_value(field("epoch_sum")?)?;
        t.epoch_updates = serde_json::from_value(field("epoch_updates")?)?;
        t.stopped = serde_json::from_value(field("stopped")?)?;
        if let Some(log) = doc.get("log") {
            t.log = serde_json::from_value(log.clone())?;
        }
        Ok(t)
    }
}

fn check_version(doc: &Value) -> Result<()> {
    let found = doc
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format("missing format_version".into()))?;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(())
}

pub fn model_json(model: &GenerativeModel) -> Result<Value> {
    Ok(json!({ "config": model.config(), "params": model.params().to_json()? }))
}

pub fn net_json(net: &InferenceNetwork) -> Result<Value> {
    Ok(json!({ "config": net.config(), "params": net.params().to_json()? }))
}

fn load_pair(doc: &Value) -> Result<(GenerativeModel, InferenceNetwork)> {
    let part = |k: &str| doc.get(k).ok_or_else(|| Error::Format(format!("checkpoint missing `{k}`")));
    let (m, n) = (part("model")?, part("net")?);
    let mcfg: ModelConfig = serde_json::from_value(m["config"].clone())?;
    let ncfg: InfNetConfig = serde_json::from_value(n["config"].clone())?;
    let model = GenerativeModel::from_parts(mcfg, ParamStore::from_json(m["params"].clone())?)?;
    let net = InferenceNetwork::from_parts(ncfg, ParamStore::from_json(n["params"].clone())?)?;
    Ok((model, net))
}

/// Reads the model and inference network from a checkpoint file. When the
/// checkpoint holds a best-validation snapshot, those parameters are used.
pub fn load_checkpoint(path: &Path) -> Result<(GenerativeModel, InferenceNetwork)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text)?;
    check_version(&doc)?;
    let (mut model, mut net) = load_pair(&doc)?;
    if let Some(b) = doc.get("best").filter(|b| !b.is_null()) {
        *model.params_mut() = ParamStore::from_json(b["model"].clone())?;
        *net.params_mut() = ParamStore::from_json(b["net"].clone())?;
    }
    Ok((model, net))
}

/// Writes a checkpoint holding only a model and network (no optimizer
/// progress), e.g. for a model that was never trained.
pub fn save_pair(model: &GenerativeModel, net: &InferenceNetwork, path: &Path) -> Result<()> {
    let doc = json!({
        "format_version": CHECKPOINT_VERSION,
        "model": model_json(model)?,
        "net": net_json(net)?,
        "best": Value::Null,
    });
    std::fs::write(path, serde_json::to_string(&doc)?).map_err(|e| Error::io(path, e))
}

/// Full training loop; returns the best-validation parameters and the log.
pub fn train(
    model: GenerativeModel,
    net: InferenceNetwork,
    train_set: &SequenceBatch,
    valid_set: Option<&SequenceBatch>,
    cfg: &TrainConfig,
) -> Result<(GenerativeModel, InferenceNetwork, TrainLog)> {
    let mut t = Trainer::new(model, net, train_set, valid_set, cfg.clone())?;
    t.run()?;
    Ok(t.into_best())
}
