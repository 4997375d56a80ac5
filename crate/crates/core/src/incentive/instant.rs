//! Instant incentives: graph attention over the current neighborhood (each
//! node carrying its behavioral latent), pooled into a recurrent state that
//! seeds an autoregressive trajectory decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::features::{slot_ids, slot_states, FeatureScale, STATE_DIM};
use crate::numerics::{
    adam_update, gat_forward, gru_step, masked_group_mean, AdamConfig, AdamState, GatParams,
    Graph, GruParams, Linear, NumericsError, ParamStore, Tensor, Var,
};

use super::masked_l1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstantConfig {
    pub gat_hidden: usize,
    /// Size of the latent, which is also the decoder's hidden size.
    pub hidden: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub lr: f64,
    pub t_p: usize,
}

impl Default for InstantConfig {
    fn default() -> Self {
        Self {
            gat_hidden: 32,
            hidden: 32,
            leaky_slope: 0.2,
            dropout: 0.1,
            lr: 2e-5,
            t_p: 5,
        }
    }
}

/// Graph inputs of one tick: `nodes = capacity + 1` slots, ego first.
#[derive(Clone, Debug, PartialEq)]
pub struct InstantFrame {
    /// `nodes x (STATE_DIM + latent_dim)`.
    pub features: Vec<f64>,
    pub present: Vec<bool>,
    /// `nodes x STATE_DIM`, relative to the ego.
    pub states: Vec<f64>,
}

impl InstantFrame {
    /// `beta_slots` holds one behavioral latent per slot (`nodes x latent_dim`).
    pub fn build(obs: &Observation, beta_slots: &[f64], latent_dim: usize, scale: &FeatureScale) -> Self {
        let states = slot_states(obs, scale);
        let (_, present) = slot_ids(obs);
        let mut features = Vec::with_capacity(states.len() * (STATE_DIM + latent_dim));
        for (k, s) in states.iter().enumerate() {
            features.extend_from_slice(s);
            features.extend_from_slice(&beta_slots[k * latent_dim..(k + 1) * latent_dim]);
        }
        Self {
            features,
            present,
            states: states.into_iter().flatten().collect(),
        }
    }
}

/// Future slot states of one tick.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotTargets {
    /// `t_p` blocks of `nodes x STATE_DIM`.
    pub states: Vec<Vec<f64>>,
    /// `t_p` blocks of `nodes` flags; the ego slot is never valid.
    pub valid: Vec<Vec<bool>>,
}

impl SlotTargets {
    /// Where each neighbor present at `t` is at ticks `t+1..=t+t_p`,
    /// relative to the ego position at `t`, matched by id.
    pub fn build(observations: &[Observation], t: usize, t_p: usize, scale: &FeatureScale) -> Self {
        let now = &observations[t];
        let origin = now.ego.position;
        let (ids, present) = slot_ids(now);
        let mut states = Vec::with_capacity(t_p);
        let mut valid = Vec::with_capacity(t_p);
        for k in 1..=t_p {
            let future = observations.get(t + k);
            let mut s = Vec::with_capacity(ids.len() * STATE_DIM);
            let mut v = Vec::with_capacity(ids.len());
            for (slot, (&id, &p)) in ids.iter().zip(&present).enumerate() {
                let found = if slot == 0 || !p {
                    None
                } else {
                    future.and_then(|o| o.absolute_entities().find(|e| e.id == id))
                };
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

/// Stacked ticks for one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstantBatch {
    pub groups: usize,
    pub features: Vec<f64>,
    pub present: Vec<bool>,
    pub states: Vec<f64>,
    pub prev: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub target_valid: Vec<Vec<bool>>,
}

impl InstantBatch {
    pub fn new(t_p: usize) -> Self {
        Self {
            targets: vec![Vec::new(); t_p],
            target_valid: vec![Vec::new(); t_p],
            ..Default::default()
        }
    }

    pub fn push(&mut self, frame: &InstantFrame, prev: &[f64], targets: &SlotTargets) {
        self.groups += 1;
        self.features.extend_from_slice(&frame.features);
        self.present.extend_from_slice(&frame.present);
        self.states.extend_from_slice(&frame.states);
        self.prev.extend_from_slice(prev);
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

#[derive(Clone, Debug, PartialEq)]
pub struct InstantReplay {
    /// Latent after each tick's update.
    pub latents: Vec<Vec<f64>>,
    pub batch: InstantBatch,
}

#[derive(Clone, Debug)]
pub struct InstantModule {
    pub config: InstantConfig,
    pub store: ParamStore,
    nodes: usize,
    latent_dim: usize,
    gat: GatParams,
    encoder: GruParams,
    decoder: GruParams,
    readout: Linear,
    optimizer: AdamState,
}

impl InstantModule {
    /// `capacity` neighbor slots plus the ego; `latent_dim` is the width of
    /// the behavioral latent attached to each node.
    pub fn new<R: Rng + ?Sized>(config: InstantConfig, capacity: usize, latent_dim: usize, rng: &mut R) -> Self {
        let nodes = capacity + 1;
        let mut store = ParamStore::new();
        let c = &config;
        let gat = GatParams::new(
            &mut store,
            "instant/gat",
            STATE_DIM + latent_dim,
            c.gat_hidden,
            c.leaky_slope,
            rng,
        );
        let encoder = GruParams::new(&mut store, "instant/encoder", c.gat_hidden, c.hidden, rng);
        let decoder = GruParams::new(&mut store, "instant/decoder", nodes * (STATE_DIM + 1), c.hidden, rng);
        let readout = Linear::new(&mut store, "instant/readout", c.hidden, nodes * STATE_DIM, rng);
        let optimizer = AdamState::new(AdamConfig::with_lr(c.lr), &store);
        Self {
            config,
            store,
            nodes,
            latent_dim,
            gat,
            encoder,
            decoder,
            readout,
            optimizer,
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        self.optimizer.config.lr = lr;
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// New latent (`groups x hidden`) and attention (`groups*nodes x nodes`).
    pub fn encode(
        &self,
        g: &mut Graph,
        features: &[f64],
        present: &[bool],
        prev: Var,
    ) -> Result<(Var, Var), NumericsError> {
        let width = STATE_DIM + self.latent_dim;
        let rows = present.len();
        if features.len() != rows * width || rows % self.nodes != 0 {
            return Err(NumericsError::Shape("instant encoder inputs".into()));
        }
        let x = g.constant(Tensor::matrix(rows, width, features.to_vec()));
        let out = gat_forward(g, &self.store, &self.gat, x, present, self.nodes)?;
        let pooled = masked_group_mean(g, out.nodes, present, self.nodes)?;
        let zeta = gru_step(g, &self.store, &self.encoder, pooled, prev)?;
        Ok((zeta, out.attention))
    }

    /// `t_p` predicted frames, each `groups x (nodes * STATE_DIM)`. Frame
    /// `k + 1` is fed the output of frame `k`; absent slots never move.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        states: &[f64],
        present: &[bool],
        zeta: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>, NumericsError> {
        let groups = present.len() / self.nodes;
        let width = self.nodes * STATE_DIM;
        let mask: Vec<f64> = present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        let mask_var = g.constant(Tensor::matrix(groups, self.nodes, mask.clone()));
        let slot_mask = Tensor::matrix(
            groups,
            width,
            mask.iter().flat_map(|&m| std::iter::repeat_n(m, STATE_DIM)).collect(),
        );
        let mut frame = g.constant(Tensor::matrix(groups, width, states.to_vec()));
        let mut h = zeta;
        let mut out = Vec::with_capacity(self.config.t_p);
        for _ in 0..self.config.t_p {
            let x = g.concat_cols(&[frame, mask_var])?;
            h = gru_step(g, &self.store, &self.decoder, x, h)?;
            let d = g.dropout(h, self.config.dropout, training, rng)?;
            let delta = self.readout.forward(g, &self.store, d)?;
            let delta = g.mul_const(delta, slot_mask.clone())?;
            frame = g.add(frame, delta)?;
            out.push(frame);
        }
        Ok(out)
    }

    /// Inference-mode update for one tick. Returns the new latent and the
    /// `nodes x nodes` attention matrix.
    pub fn infer(&self, frame: &InstantFrame, prev: &[f64]) -> Result<(Vec<f64>, Tensor), NumericsError> {
        let mut g = Graph::no_grad();
        let p = g.constant(Tensor::row(prev.to_vec()));
        let (z, a) = self.encode(&mut g, &frame.features, &frame.present, p)?;
        Ok((g.value(z).data().to_vec(), g.take_value(a)))
    }

    /// Predicted frames in inference mode for one tick.
    pub fn predict(&self, frame: &InstantFrame, zeta: &[f64]) -> Result<Vec<Vec<f64>>, NumericsError> {
        let mut g = Graph::no_grad();
        let z = g.constant(Tensor::row(zeta.to_vec()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frames = self.decode(&mut g, &frame.states, &frame.present, z, false, &mut rng)?;
        Ok(frames.iter().map(|f| g.value(*f).data().to_vec()).collect())
    }

    /// Replays the latent recurrence over an agent's observations using the
    /// behavioral latents recorded per tick (`beta_slots[t]`).
    pub fn replay(
        &self,
        observations: &[Observation],
        beta_slots: &[Vec<f64>],
        ticks: usize,
        scale: &FeatureScale,
    ) -> Result<InstantReplay, NumericsError> {
        let mut zeta = vec![0.0; self.config.hidden];
        let mut latents = Vec::with_capacity(ticks);
        let mut batch = InstantBatch::new(self.config.t_p);
        for t in 0..ticks {
            let frame = InstantFrame::build(&observations[t], &beta_slots[t], self.latent_dim, scale);
            let (next, _) = self.infer(&frame, &zeta)?;
            let targets = SlotTargets::build(observations, t, self.config.t_p, scale);
            if targets.any_valid() {
                batch.push(&frame, &zeta, &targets);
            }
            zeta = next;
            latents.push(zeta.clone());
        }
        Ok(InstantReplay { latents, batch })
    }

    pub fn loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &InstantBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Option<Var>, NumericsError> {
        if batch.valid_count() == 0 {
            return Ok(None);
        }
        let prev = g.constant(Tensor::matrix(batch.groups, self.config.hidden, batch.prev.clone()));
        let (zeta, _) = self.encode(g, &batch.features, &batch.present, prev)?;
        let preds = self.decode(g, &batch.states, &batch.present, zeta, training, rng)?;
        masked_l1(g, &preds, &batch.targets, &batch.target_valid, STATE_DIM).map(Some)
    }

    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &InstantBatch, rng: &mut R) -> Result<Option<f64>, NumericsError> {
        let mut g = Graph::new();
        let Some(loss) = self.loss(&mut g, batch, true, rng)? else {
            return Ok(None);
        };
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        adam_update(&mut self.store, &mut grads, &mut self.optimizer)?;
        Ok(Some(value))
    }

    pub fn eval_loss(&self, batch: &InstantBatch) -> Result<Option<f64>, NumericsError> {
        let mut g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.loss(&mut g, batch, false, &mut rng)?.map(|l| g.value(l).item()))
    }

    /// Average displacement error (world units) over valid future slots,
    /// and the mean true displacement of those slots from their current position.
    pub fn displacement_errors(&self, batch: &InstantBatch, scale: &FeatureScale) -> Result<(f64, f64), NumericsError> {
        let mut g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prev = g.constant(Tensor::matrix(batch.groups, self.config.hidden, batch.prev.clone()));
        let (zeta, _) = self.encode(&mut g, &batch.features, &batch.present, prev)?;
        let preds = self.decode(&mut g, &batch.states, &batch.present, zeta, false, &mut rng)?;
        let (mut err, mut disp, mut n) = (0.0, 0.0, 0usize);
        for (k, p) in preds.iter().enumerate() {
            let pd = g.value(*p).data();
            for (slot, &v) in batch.target_valid[k].iter().enumerate() {
                if !v {
                    continue;
                }
                let o = slot * STATE_DIM;
                let pred = scale.unscale_position([pd[o], pd[o + 1]]);
                let truth = scale.unscale_position([batch.targets[k][o], batch.targets[k][o + 1]]);
                let now = scale.unscale_position([batch.states[o], batch.states[o + 1]]);
                err += ((pred[0] - truth[0]).powi(2) + (pred[1] - truth[1]).powi(2)).sqrt();
                disp += ((now[0] - truth[0]).powi(2) + (now[1] - truth[1]).powi(2)).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            return Err(NumericsError::Shape("no valid targets".into()));
        }
        Ok((err / n as f64, disp / n as f64))
    }
}
