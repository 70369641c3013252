use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{clip_grad_norm, composite_loss, lr_at, AdamState, CompositeLoss, Mode, StepMetrics, TrainConfig, TrainError};
use crate::adapters::{lora_forward, svd_forward, AdapterId, FrozenLinear, LoraAdapter, SvdAdapter};
use crate::checkpoint::KvFile;
use crate::hypernet::{HyperBackend, HyperNet, HyperRole};
use crate::init::{normal_param, zero_param};
use crate::rank_allocator::{
    apply_prune, collect_scores, select_prune, should_prune, total_effective_rank, PruneEvent, PruneSchedule,
};
use crate::tensor::{Result as TResult, Tensor, TensorError};

/// Stream of the ChaCha generator used for parameter initialization; data
/// generators use other streams of the same seed.
pub const INIT_STREAM: u64 = 1;

const RECENT: usize = 10;

/// How the adapted layers are wired into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    /// Every layer reads the same input: `y_l = layer_l(x)`. The loss is the
    /// squared error summed over outputs, averaged over samples and layers.
    Regression,
    /// `logits = layer_1(tanh(layer_0(x)))` with mean cross-entropy.
    Classifier,
}

/// Column-major batch: one sample per column of `x`.
#[derive(Debug, Clone)]
pub enum Batch {
    Regression { x: Tensor, targets: Vec<Tensor> },
    Classification { x: Tensor, labels: Vec<usize> },
}

impl Batch {
    pub fn input(&self) -> &Tensor {
        match self {
            Batch::Regression { x, .. } | Batch::Classification { x, .. } => x,
        }
    }
}

impl Network {
    /// Outputs of every layer for regression, the logits for classification.
    pub fn outputs(
        &self,
        layers: usize,
        apply: &dyn Fn(usize, &Tensor) -> TResult<Tensor>,
        x: &Tensor,
    ) -> TResult<Vec<Tensor>> {
        match self {
            Network::Regression => (0..layers).map(|l| apply(l, x)).collect(),
            Network::Classifier => {
                if layers != 2 {
                    return Err(TensorError::Contract(format!("classifier needs 2 layers, got {layers}")));
                }
                let h = apply(0, x)?.tanh();
                Ok(vec![apply(1, &h)?])
            }
        }
    }

    pub fn task_loss(
        &self,
        layers: usize,
        apply: &dyn Fn(usize, &Tensor) -> TResult<Tensor>,
        batch: &Batch,
    ) -> TResult<Tensor> {
        let outs = self.outputs(layers, apply, batch.input())?;
        match (self, batch) {
            (Network::Regression, Batch::Regression { targets, .. }) => {
                if targets.len() != outs.len() {
                    return Err(TensorError::Contract(format!(
                        "{} targets for {} layers",
                        targets.len(),
                        outs.len()
                    )));
                }
                let mut loss = Tensor::scalar(0.0);
                for (y, t) in outs.iter().zip(targets) {
                    let mse = y.sub(t)?.frobenius_sq().scale(1.0 / y.cols() as f64);
                    loss = loss.add(&mse)?;
                }
                Ok(loss.scale(1.0 / outs.len() as f64))
            }
            (Network::Classifier, Batch::Classification { labels, .. }) => {
                outs[0].transpose()?.cross_entropy(labels)
            }
            _ => Err(TensorError::Contract("batch kind does not match the network".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub enum AdapterState {
    Lora(Vec<LoraAdapter>),
    /// SVD form. In hyper modes these tensors are plain buffers overwritten
    /// each step; for hyper LoRA they hold `B`, a gate vector and `A`.
    Svd(Vec<SvdAdapter>),
}

impl AdapterState {
    pub fn tensors(&self) -> Vec<Tensor> {
        match self {
            AdapterState::Lora(v) => v.iter().flat_map(|a| [a.a.clone(), a.b.clone()]).collect(),
            AdapterState::Svd(v) => v
                .iter()
                .flat_map(|a| [a.p.clone(), a.lambda.clone(), a.q.clone()])
                .collect(),
        }
    }

    pub fn svd(&self) -> Option<&[SvdAdapter]> {
        match self {
            AdapterState::Svd(v) => Some(v),
            AdapterState::Lora(_) => None,
        }
    }

    pub fn lora(&self) -> Option<&[LoraAdapter]> {
        match self {
            AdapterState::Lora(v) => Some(v),
            AdapterState::Svd(_) => None,
        }
    }

    pub fn effective_rank(&self) -> usize {
        match self {
            AdapterState::Lora(v) => v.iter().map(LoraAdapter::rank).sum(),
            AdapterState::Svd(v) => total_effective_rank(v),
        }
    }
}

/// One hypernetwork per role, shared by every adapter.
#[derive(Debug, Clone)]
pub struct HyperSet {
    pub p: HyperNet,
    pub lambda: HyperNet,
    pub q: HyperNet,
}

impl HyperSet {
    pub fn new<R: Rng + ?Sized>(backend: &HyperBackend, init_std: f64, rank: usize, rng: &mut R) -> Result<Self, TrainError> {
        let mut build = |role, zero_output| HyperNet::new(role, backend.clone(), init_std, zero_output, rng.random());
        let mut set = Self {
            p: build(HyperRole::P, true)?,
            lambda: build(HyperRole::Lambda, true)?,
            q: build(HyperRole::Q, true)?,
        };
        set.p.register_shape(rank)?;
        set.lambda.register_shape(1)?;
        set.q.register_shape(rank)?;
        Ok(set)
    }

    pub fn nets(&self) -> [&HyperNet; 3] {
        [&self.p, &self.lambda, &self.q]
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.nets().iter().flat_map(|h| h.params()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|h| h.param_count()).sum()
    }

    /// Generated factors for `ad`, differentiable in the hypernetwork weights.
    pub fn generate(&self, ad: &SvdAdapter) -> Result<SvdAdapter, TrainError> {
        let p = self.p.generate(&ad.p, None)?;
        let lambda = self.lambda.generate(&ad.lambda, Some(&ad.mask))?;
        let q = self.q.generate(&ad.q, None)?;
        Ok(ad.with_factors(p, lambda, q)?)
    }
}

/// Fresh adapter state (and hypernetworks in hyper modes) for layers of the
/// given `(d1, d2)` shapes.
///
/// Normal(0, init_std²) for P, Q, LoRA A and hypernetwork weights; zero for Λ
/// and LoRA B. The Λ-role output projection starts at zero, so every mode
/// begins with ΔW = 0.
pub fn init_params(
    cfg: &TrainConfig,
    shapes: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<(AdapterState, Option<HyperSet>), TrainError> {
    let r = cfg.rank;
    let std = cfg.init_std;
    let ids = (0u32..).map(AdapterId);
    let state = match cfg.mode {
        Mode::Lora => AdapterState::Lora(
            shapes
                .iter()
                .zip(ids)
                .map(|(&(d1, d2), id)| LoraAdapter::new(id, normal_param(rng, &[r, d2], std), zero_param(&[d1, r])))
                .collect::<TResult<_>>()?,
        ),
        mode => {
            let hyper = mode.is_hyper();
            let mut out = Vec::with_capacity(shapes.len());
            for (&(d1, d2), id) in shapes.iter().zip(ids) {
                if mode == Mode::HyperLora && 2 * r > d1.min(d2) {
                    return Err(TrainError::Config(format!(
                        "rank: {r} too large for a {d1}x{d2} layer (at most half the smaller side)"
                    )));
                }
                let mut p = normal_param(rng, &[d1, r], std);
                let mut lambda = zero_param(&[r]);
                let mut q = normal_param(rng, &[r, d2], std);
                if hyper {
                    p = p.detach();
                    lambda = lambda.detach();
                    q = q.detach();
                }
                out.push(SvdAdapter::new(id, p, lambda, q)?);
            }
            AdapterState::Svd(out)
        }
    };
    let hyper = match cfg.hyper_backend() {
        Some(backend) => Some(HyperSet::new(&backend, std, r, rng)?),
        None => None,
    };
    Ok((state, hyper))
}

/// Float counts behind `peak_param_bytes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub frozen: usize,
    pub adapter_state: usize,
    pub hypernet: usize,
    pub optimizer_moments: usize,
}

impl ParamCounts {
    pub fn total_floats(&self) -> usize {
        self.frozen + self.adapter_state + self.hypernet + self.optimizer_moments
    }

    pub fn bytes(&self) -> u64 {
        8 * self.total_floats() as u64
    }
}

/// Frozen layers, their adapters, optional hypernetworks and optimizer state.
#[derive(Debug)]
pub struct Model {
    cfg: TrainConfig,
    network: Network,
    layers: Vec<FrozenLinear>,
    state: AdapterState,
    hyper: Option<HyperSet>,
    adam: AdamState,
    schedule: Option<PruneSchedule>,
    recent: VecDeque<StepMetrics>,
    prune_events: Vec<PruneEvent>,
}

/// Factors actually used in one forward pass.
enum Active {
    Lora(Vec<LoraAdapter>),
    Svd(Vec<SvdAdapter>),
}

impl Model {
    pub fn new(cfg: TrainConfig, network: Network, layers: Vec<FrozenLinear>) -> Result<Self, TrainError> {
        cfg.validate()?;
        if layers.is_empty() {
            return Err(TrainError::Config("model needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let shapes: Vec<_> = layers.iter().map(FrozenLinear::dims).collect();
        let (state, hyper) = init_params(&cfg, &shapes, &mut rng)?;
        if let Some(h) = &hyper {
            log::info!(
                "hypernetworks ({}): {} parameters, core {} per role",
                h.p.backend().kind(),
                h.param_count(),
                h.p.core_param_count()
            );
        }
        let schedule = cfg.prune_schedule();
        Ok(Self {
            cfg,
            network,
            layers,
            state,
            hyper,
            adam: AdamState::default(),
            schedule,
            recent: VecDeque::with_capacity(RECENT),
            prune_events: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[FrozenLinear] {
        &self.layers
    }

    pub fn state(&self) -> &AdapterState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut AdapterState {
        &mut self.state
    }

    pub fn hyper(&self) -> Option<&HyperSet> {
        self.hyper.as_ref()
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn schedule(&self) -> Option<&PruneSchedule> {
        self.schedule.as_ref()
    }

    pub fn effective_rank(&self) -> usize {
        self.state.effective_rank()
    }

    /// Tensors the optimizer updates: adapter factors in direct modes, the
    /// hypernetwork weights in hyper modes.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        match &self.hyper {
            Some(h) => h.params(),
            None => self.state.tensors(),
        }
    }

    pub fn param_counts(&self) -> ParamCounts {
        let frozen = self
            .layers
            .iter()
            .map(|l| l.weight().numel() + l.bias().map_or(0, Tensor::numel))
            .sum();
        let adapter_state = self.state.tensors().iter().map(Tensor::numel).sum();
        let hypernet = self.hyper.as_ref().map_or(0, HyperSet::param_count);
        let trainable: usize = self.trainable_params().iter().map(Tensor::numel).sum();
        ParamCounts {
            frozen,
            adapter_state,
            hypernet,
            optimizer_moments: 2 * trainable,
        }
    }

    pub fn peak_param_bytes(&self) -> u64 {
        self.param_counts().bytes()
    }

    fn active(&self) -> Result<Active, TrainError> {
        Ok(match (&self.state, &self.hyper) {
            (AdapterState::Lora(v), _) => Active::Lora(v.clone()),
            (AdapterState::Svd(v), None) => Active::Svd(v.clone()),
            (AdapterState::Svd(v), Some(h)) => Active::Svd(v.iter().map(|a| h.generate(a)).collect::<Result<_, _>>()?),
        })
    }

    fn apply<'a>(&'a self, active: &'a Active) -> impl Fn(usize, &Tensor) -> TResult<Tensor> + 'a {
        move |i, x| match active {
            Active::Lora(v) => lora_forward(&self.layers[i], &v[i], x),
            Active::Svd(v) => svd_forward(&self.layers[i], &v[i], x),
        }
    }

    fn loss_for(&self, active: &Active, batch: &Batch) -> Result<CompositeLoss, TrainError> {
        let task = self.network.task_loss(self.layers.len(), &self.apply(active), batch)?;
        let penalized: &[SvdAdapter] = match active {
            Active::Svd(v) if self.cfg.mode.is_svd() => v,
            _ => &[],
        };
        Ok(composite_loss(task, penalized, self.cfg.gamma)?)
    }

    /// Composite loss of the current state, generating factors in hyper modes.
    pub fn loss(&self, batch: &Batch) -> Result<CompositeLoss, TrainError> {
        self.loss_for(&self.active()?, batch)
    }

    /// Network outputs with the adapters (hyper modes: freshly generated factors).
    pub fn outputs(&self, x: &Tensor) -> Result<Vec<Tensor>, TrainError> {
        let active = self.active()?;
        let apply = self.apply(&active);
        let outs = self.network.outputs(self.layers.len(), &apply, x)?;
        Ok(outs)
    }

    /// Network outputs of the frozen layers alone.
    pub fn frozen_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>, TrainError> {
        let apply = |i: usize, x: &Tensor| self.layers[i].forward(x);
        Ok(self.network.outputs(self.layers.len(), &apply, x)?)
    }

    pub fn zero_grad(&self) {
        for t in self.trainable_params() {
            t.zero_grad();
        }
        for t in self.state.tensors() {
            t.zero_grad();
        }
    }

    /// One optimization step.
    ///
    /// Hyper modes: generate P, Λ, Q from the stored buffers, forward, backward
    /// into the hypernetworks, Adam on the hypernetworks, overwrite the buffers
    /// with the generated values, then prune. Direct modes run the same loss
    /// and schedule on the adapter tensors themselves.
    ///
    /// Gradients stay populated until the next step so they can be inspected.
    pub fn train_step(&mut self, batch: &Batch, step: u64) -> Result<StepMetrics, TrainError> {
        let started = Instant::now();
        let lr = lr_at(step, &self.cfg)?;
        let prune_now = self.schedule.is_some_and(|s| should_prune(step, &s));
        self.zero_grad();

        let active = self.active().map_err(|e| self.non_finite(step, e))?;
        let loss = self.loss_for(&active, batch).map_err(|e| self.non_finite(step, e))?;
        let (task, penalty, total) = (loss.task.item(), loss.penalty.item(), loss.total.item());
        if !(task.is_finite() && total.is_finite()) {
            return Err(self.nan_abort(step));
        }
        loss.total.backward()?;

        let lambda_grads = if prune_now {
            Some(self.lambda_grads(&active)?)
        } else {
            None
        };
        let params = self.trainable_params();
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(&params, c);
        }
        match &self.hyper {
            Some(h) => {
                let core: Vec<_> = h.nets().iter().flat_map(|n| n.core_params()).collect();
                let projections: Vec<_> = h.nets().iter().flat_map(|n| n.projection_params()).collect();
                for net in h.nets() {
                    net.clear_outputs();
                }
                let core_lr = lr * self.cfg.core_lr_scale();
                self.adam.step_groups(&[(&core, core_lr), (&projections, lr)]);
            }
            None => self.adam.step(&params, lr),
        }

        if let (Active::Svd(generated), Some(_)) = (&active, &self.hyper) {
            let AdapterState::Svd(stored) = &self.state else {
                unreachable!("hyper modes store SVD factors")
            };
            for (buf, gen) in stored.iter().zip(generated) {
                buf.p.set_data(gen.p.to_vec());
                buf.lambda.set_data(gen.lambda.to_vec());
                buf.q.set_data(gen.q.to_vec());
            }
        }

        if let Some(grads) = lambda_grads {
            self.prune(step, &grads)?;
        }

        let metrics = StepMetrics {
            step,
            task_loss: task,
            orth_penalty_value: penalty,
            total_loss: total,
            lr,
            effective_rank_total: self.effective_rank(),
            wall_clock_ms: if self.cfg.record_wall_clock {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
            peak_param_bytes: self.peak_param_bytes(),
        };
        if self.recent.len() == RECENT {
            self.recent.pop_front();
        }
        self.recent.push_back(metrics.clone());
        Ok(metrics)
    }

    /// Runs steps `0..total_steps`, pulling one batch per step.
    pub fn run(
        &mut self,
        mut next_batch: impl FnMut(u64) -> Batch,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>, TrainError> {
        let mut out = Vec::with_capacity(self.cfg.total_steps as usize);
        for step in 0..self.cfg.total_steps {
            let m = self.train_step(&next_batch(step), step)?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }

    fn nan_abort(&self, step: u64) -> TrainError {
        TrainError::NonFinite {
            step,
            recent: self.recent.iter().cloned().collect(),
        }
    }

    fn non_finite(&self, step: u64, e: TrainError) -> TrainError {
        let numeric = matches!(
            &e,
            TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Hyper(crate::hypernet::HyperError::Tensor(TensorError::NonFinite { .. }))
        );
        if numeric {
            self.nan_abort(step)
        } else {
            e
        }
    }

    /// dL/dλ per adapter: at the generated Λ in hyper modes, at the stored Λ otherwise.
    fn lambda_grads(&self, active: &Active) -> Result<BTreeMap<AdapterId, Vec<f64>>, TrainError> {
        let Active::Svd(v) = active else {
            return Ok(BTreeMap::new());
        };
        Ok(v.iter()
            .filter_map(|ad| ad.lambda.grad().map(|g| (ad.id, g)))
            .collect())
    }

    fn prune(&mut self, step: u64, grads: &BTreeMap<AdapterId, Vec<f64>>) -> Result<(), TrainError> {
        let Some(schedule) = self.schedule else { return Ok(()) };
        let direct = self.hyper.is_none();
        let AdapterState::Svd(adapters) = &mut self.state else {
            return Ok(());
        };
        let budget = schedule.budget(total_effective_rank(adapters));
        if budget == 0 {
            return Ok(());
        }
        let records = collect_scores(adapters, grads)?;
        let selection = select_prune(&records, budget);
        apply_prune(adapters, &selection, direct)?;
        if direct {
            for &(id, j) in &selection {
                let ad = adapters.iter().find(|a| a.id == id).expect("selected adapter exists");
                self.adam.reset_entry(&ad.lambda, j);
            }
        }
        let event = PruneEvent::new(step, &records, &selection, total_effective_rank(adapters));
        log::debug!("prune {}", event.to_json_line());
        self.prune_events.push(event);
        Ok(())
    }

    pub fn prune_events(&self) -> &[PruneEvent] {
        &self.prune_events
    }

    /// Adapter tensors under `adapter{n}/{P|lambda|Q|mask}` (`A`/`B` for LoRA).
    pub fn adapters_checkpoint(&self) -> KvFile {
        let dims: Vec<_> = self.layers.iter().map(FrozenLinear::dims).collect();
        let mut kv = KvFile::new(json!({
            "r": self.cfg.rank,
            "d1": dims.iter().map(|d| d.0).collect::<Vec<_>>(),
            "d2": dims.iter().map(|d| d.1).collect::<Vec<_>>(),
            "mode": self.cfg.mode.as_str(),
        }));
        match &self.state {
            AdapterState::Lora(v) => {
                for a in v {
                    kv.insert_f64(format!("{}/A", a.id), a.a.shape(), a.a.to_vec());
                    kv.insert_f64(format!("{}/B", a.id), a.b.shape(), a.b.to_vec());
                }
            }
            AdapterState::Svd(v) => {
                for a in v {
                    kv.insert_f64(format!("{}/P", a.id), a.p.shape(), a.p.to_vec());
                    kv.insert_f64(format!("{}/lambda", a.id), a.lambda.shape(), a.lambda.to_vec());
                    kv.insert_f64(format!("{}/Q", a.id), a.q.shape(), a.q.to_vec());
                    kv.insert_mask(format!("{}/mask", a.id), &a.mask);
                }
            }
        }
        kv
    }

    pub fn hyper_checkpoint(&self) -> Option<KvFile> {
        let h = self.hyper.as_ref()?;
        let mut kv = KvFile::new(json!({
            "mode": self.cfg.mode.as_str(),
            "backend": h.p.backend(),
            "r": self.cfg.rank,
        }));
        for net in h.nets() {
            net.write_checkpoint(&mut kv);
        }
        Some(kv)
    }
}
