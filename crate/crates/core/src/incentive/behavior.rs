//! Behavioral incentives: a recurrent encoder turns each observed entity's
//! recent track into a slowly drifting latent, and a recurrent decoder
//! conditioned on that latent predicts the entity's next states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{HistoryBuffer, Observation};
use crate::features::{FeatureScale, STATE_DIM};
use crate::numerics::{
    adam_update, gru_step, AdamConfig, AdamState, Graph, GruParams, Linear, NumericsError,
    ParamStore, Tensor, Var,
};

use super::{masked_l1, Latents};

/// Width of one encoder input step: state plus a validity flag.
pub const STEP_DIM: usize = STATE_DIM + 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum UpdateMode {
    /// `beta = eta * e + (1 - eta) * prev` every tick.
    Soft,
    /// The encoder output is adopted outright at ticks `t` with
    /// `(t + 1) % interval == 0` and held otherwise.
    Hard { interval: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub eta: f64,
    pub update: UpdateMode,
    pub dropout: f64,
    pub lr: f64,
    pub t_h: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            encoder_hidden: 32,
            decoder_hidden: 64,
            eta: 0.1,
            update: UpdateMode::Soft,
            dropout: 0.1,
            lr: 1e-4,
            t_h: 10,
        }
    }
}

impl BehaviorConfig {
    /// Blend weight given to the fresh encoder output at tick `t`.
    pub fn adopt_weight(&self, t: usize) -> f64 {
        match self.update {
            UpdateMode::Soft => self.eta,
            UpdateMode::Hard { interval } => {
                if (t + 1) % interval == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `w * e + (1 - w) * prev`, elementwise.
pub fn soft_update(encoded: &[f64], prev: &[f64], w: f64) -> Vec<f64> {
    encoded.iter().zip(prev).map(|(e, p)| w * e + (1.0 - w) * p).collect()
}

/// History windows of every entity an agent sees at one tick (ego first,
/// then present neighbor slots), expressed relative to the ego's current
/// position.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowRows {
    pub ids: Vec<u32>,
    /// `t_h` blocks, each `rows x STEP_DIM`, oldest first.
    pub steps: Vec<Vec<f64>>,
    /// Most recent valid state per row (zeros when the window is empty).
    pub last: Vec<f64>,
}

impl WindowRows {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn build(history: &HistoryBuffer, obs: &Observation, t: usize, scale: &FeatureScale) -> Self {
        let t_h = history.t_h();
        let origin = obs.ego.position;
        let ids: Vec<u32> = std::iter::once(obs.ego.id)
            .chain(obs.neighbors.iter().zip(&obs.present).filter(|(_, p)| **p).map(|(n, _)| n.id))
            .collect();
        let mut steps = vec![Vec::with_capacity(ids.len() * STEP_DIM); t_h];
        let mut last = Vec::with_capacity(ids.len() * STATE_DIM);
        for &id in &ids {
            let w = history.window(id, t);
            let mut recent = [0.0; STATE_DIM];
            for (k, (s, &v)) in w.states.iter().zip(&w.valid).enumerate() {
                if v {
                    let f = scale.state(s, origin);
                    steps[k].extend_from_slice(&f);
                    steps[k].push(1.0);
                    recent = f;
                } else {
                    steps[k].extend_from_slice(&[0.0; STEP_DIM]);
                }
            }
            last.extend_from_slice(&recent);
        }
        Self { ids, steps, last }
    }
}

/// Decoder targets for the rows of one tick.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureTargets {
    /// `t_h` blocks, each `rows x STATE_DIM`.
    pub states: Vec<Vec<f64>>,
    /// `t_h` blocks of `rows` flags.
    pub valid: Vec<Vec<bool>>,
}

impl FutureTargets {
    /// States of `ids` at ticks `t..t + t_h` as seen in `observations`,
    /// relative to the ego position at `t`.
    pub fn build(observations: &[Observation], ids: &[u32], t: usize, t_h: usize, scale: &FeatureScale) -> Self {
        let origin = observations[t].ego.position;
        let mut states = Vec::with_capacity(t_h);
        let mut valid = Vec::with_capacity(t_h);
        for k in 0..t_h {
            let mut s = Vec::with_capacity(ids.len() * STATE_DIM);
            let mut v = Vec::with_capacity(ids.len());
            let obs = observations.get(t + k);
            for &id in ids {
                let found = obs.and_then(|o| o.absolute_entities().find(|e| e.id == id));
                match found {
                    Some(e) => {
                        s.extend_from_slice(&scale.state(&e, origin));
                        v.push(true);
                    }
                    None => {
                        s.extend_from_slice(&[0.0; STATE_DIM]);
                        v.push(false);
                    }
                }
            }
            states.push(s);
            valid.push(v);
        }
        Self { states, valid }
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().flatten().any(|&v| v)
    }
}

/// One stacked training batch over many (tick, entity) rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BehaviorBatch {
    pub rows: usize,
    pub steps: Vec<Vec<f64>>,
    pub last: Vec<f64>,
    pub prev: Vec<f64>,
    pub adopt: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub target_valid: Vec<Vec<bool>>,
}

impl BehaviorBatch {
    pub fn new(t_h: usize) -> Self {
        Self {
            steps: vec![Vec::new(); t_h],
            targets: vec![Vec::new(); t_h],
            target_valid: vec![Vec::new(); t_h],
            ..Default::default()
        }
    }

    pub fn push(&mut self, rows: &WindowRows, prev: &[f64], adopt: f64, targets: &FutureTargets) {
        self.rows += rows.rows();
        for (dst, src) in self.steps.iter_mut().zip(&rows.steps) {
            dst.extend_from_slice(src);
        }
        self.last.extend_from_slice(&rows.last);
        self.prev.extend_from_slice(prev);
        self.adopt.extend(std::iter::repeat_n(adopt, rows.rows()));
        for (dst, src) in self.targets.iter_mut().zip(&targets.states) {
            dst.extend_from_slice(src);
        }
        for (dst, src) in self.target_valid.iter_mut().zip(&targets.valid) {
            dst.extend_from_slice(src);
        }
    }

    pub fn valid_count(&self) -> usize {
        self.target_valid.iter().flatten().filter(|&&v| v).count()
    }
}

/// Result of replaying an agent's episode through the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorReplay {
    /// Per tick: the latents of every tracked entity after that tick's update.
    pub latents: Vec<Latents>,
    pub batch: BehaviorBatch,
}

#[derive(Clone, Debug)]
pub struct BehaviorModule {
    pub config: BehaviorConfig,
    pub store: ParamStore,
    encoder: GruParams,
    project: Linear,
    decoder: GruParams,
    readout: Linear,
    optimizer: AdamState,
}

impl BehaviorModule {
    pub fn new<R: Rng + ?Sized>(config: BehaviorConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = GruParams::new(&mut store, "behavior/encoder", STEP_DIM, c.encoder_hidden, rng);
        let project = Linear::new(
            &mut store,
            "behavior/project",
            c.encoder_hidden + c.latent_dim,
            c.latent_dim,
            rng,
        );
        let decoder = GruParams::new(
            &mut store,
            "behavior/decoder",
            STEP_DIM + c.latent_dim,
            c.decoder_hidden,
            rng,
        );
        let readout = Linear::new(&mut store, "behavior/readout", c.decoder_hidden, STATE_DIM, rng);
        let optimizer = AdamState::new(AdamConfig::with_lr(c.lr), &store);
        Self {
            config,
            store,
            encoder,
            project,
            decoder,
            readout,
            optimizer,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        self.optimizer.config.lr = lr;
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// Encoder output `e` for `rows` windows given their previous latents.
    pub fn encode(&self, g: &mut Graph, steps: &[Vec<f64>], rows: usize, prev: Var) -> Result<Var, NumericsError> {
        if steps.len() != self.config.t_h {
            return Err(NumericsError::Shape(format!(
                "expected {} window steps, got {}",
                self.config.t_h,
                steps.len()
            )));
        }
        let mut h = g.constant(Tensor::zeros(rows, self.config.encoder_hidden));
        for s in steps {
            if s.len() != rows * STEP_DIM {
                return Err(NumericsError::Shape("window step width".into()));
            }
            let x = g.constant(Tensor::matrix(rows, STEP_DIM, s.clone()));
            h = gru_step(g, &self.store, &self.encoder, x, h)?;
        }
        let z = g.concat_cols(&[h, prev])?;
        let z = self.project.forward(g, &self.store, z)?;
        Ok(g.tanh(z))
    }

    /// Autoregressive prediction of the next `t_h` states, one `rows x 4`
    /// node per step.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        steps: &[Vec<f64>],
        last: &[f64],
        rows: usize,
        beta: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>, NumericsError> {
        let mut h = g.constant(Tensor::zeros(rows, self.config.decoder_hidden));
        for s in steps {
            let x = g.constant(Tensor::matrix(rows, STEP_DIM, s.clone()));
            let x = g.concat_cols(&[x, beta])?;
            h = gru_step(g, &self.store, &self.decoder, x, h)?;
        }
        let ones = g.constant(Tensor::filled(rows, 1, 1.0));
        let mut state = g.constant(Tensor::matrix(rows, STATE_DIM, last.to_vec()));
        let mut out = Vec::with_capacity(self.config.t_h);
        for k in 0..self.config.t_h {
            if k > 0 {
                let x = g.concat_cols(&[state, ones, beta])?;
                h = gru_step(g, &self.store, &self.decoder, x, h)?;
            }
            let d = g.dropout(h, self.config.dropout, training, rng)?;
            let delta = self.readout.forward(g, &self.store, d)?;
            state = g.add(state, delta)?;
            out.push(state);
        }
        Ok(out)
    }

    /// Inference-mode latent update for one tick's rows.
    pub fn infer(&self, rows: &WindowRows, prev: &[f64], t: usize) -> Result<Vec<f64>, NumericsError> {
        let mut g = Graph::no_grad();
        let p = g.constant(Tensor::matrix(rows.rows(), self.config.latent_dim, prev.to_vec()));
        let e = self.encode(&mut g, &rows.steps, rows.rows(), p)?;
        Ok(soft_update(g.value(e).data(), prev, self.config.adopt_weight(t)))
    }

    /// Updates `latents` for every entity in `rows` (ego included).
    pub fn update(&self, rows: &WindowRows, latents: &mut Latents, t: usize) -> Result<(), NumericsError> {
        let prev = latents.gather(&rows.ids, self.config.latent_dim);
        let next = self.infer(rows, &prev, t)?;
        latents.scatter(&rows.ids, &next, self.config.latent_dim);
        Ok(())
    }

    /// Replays the latent recurrence over an agent's observation sequence
    /// with the current parameters, collecting training rows. `ticks` is the
    /// number of decision ticks the agent acted in.
    pub fn replay(
        &self,
        observations: &[Observation],
        ticks: usize,
        scale: &FeatureScale,
    ) -> Result<BehaviorReplay, NumericsError> {
        let t_h = self.config.t_h;
        let mut history = HistoryBuffer::new(t_h);
        let mut latents = Latents::default();
        let mut per_tick = Vec::with_capacity(ticks);
        let mut batch = BehaviorBatch::new(t_h);
        for t in 0..ticks {
            let obs = &observations[t];
            let rows = WindowRows::build(&history, obs, t, scale);
            let prev = latents.gather(&rows.ids, self.config.latent_dim);
            let next = self.infer(&rows, &prev, t)?;
            let targets = FutureTargets::build(observations, &rows.ids, t, t_h, scale);
            if targets.any_valid() {
                batch.push(&rows, &prev, self.config.adopt_weight(t), &targets);
            }
            latents.scatter(&rows.ids, &next, self.config.latent_dim);
            per_tick.push(latents.clone());
            history.push(t, obs);
        }
        Ok(BehaviorReplay {
            latents: per_tick,
            batch,
        })
    }

    /// Masked-mean L1 prediction loss of a batch, with the latent blend
    /// computed inside the graph so the encoder receives gradient.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &BehaviorBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Option<Var>, NumericsError> {
        if batch.valid_count() == 0 {
            return Ok(None);
        }
        let (rows, d) = (batch.rows, self.config.latent_dim);
        let prev_t = Tensor::matrix(rows, d, batch.prev.clone());
        let prev = g.constant(prev_t.clone());
        let e = self.encode(g, &batch.steps, rows, prev)?;
        let mut w = Vec::with_capacity(rows * d);
        let mut keep = Vec::with_capacity(rows * d);
        for (r, &a) in batch.adopt.iter().enumerate() {
            for k in 0..d {
                w.push(a);
                keep.push((1.0 - a) * prev_t.data()[r * d + k]);
            }
        }
        let fresh = g.mul_const(e, Tensor::matrix(rows, d, w))?;
        let held = g.constant(Tensor::matrix(rows, d, keep));
        let beta = g.add(fresh, held)?;
        let preds = self.decode(g, &batch.steps, &batch.last, rows, beta, training, rng)?;
        masked_l1(g, &preds, &batch.targets, &batch.target_valid, STATE_DIM).map(Some)
    }

    /// One Adam step on a batch. Returns `None` (and leaves the parameters
    /// alone) when no row has a target.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &BehaviorBatch,
        rng: &mut R,
    ) -> Result<Option<f64>, NumericsError> {
        let mut g = Graph::new();
        let Some(loss) = self.loss(&mut g, batch, true, rng)? else {
            return Ok(None);
        };
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        adam_update(&mut self.store, &mut grads, &mut self.optimizer)?;
        Ok(Some(value))
    }

    /// Evaluation-mode loss (dropout off), no parameter change.
    pub fn eval_loss(&self, batch: &BehaviorBatch) -> Result<Option<f64>, NumericsError> {
        let mut g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.loss(&mut g, batch, false, &mut rng)?.map(|l| g.value(l).item()))
    }
}
