//! Joint training of both branches, routing gate, fusion and task head,
//! with homoscedastic loss weighting and Monte Carlo uncertainty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_mask, DataMatrix, ImputationResult, LabelVector, MaskMatrix, Normalizer, Provenance};
use crate::error::{Error, Result};
use crate::fusion::{adaptive_mix, bce, weighted_sum, AdaptiveFusionHead, CrossPathAttention, FusionMode};
use crate::gain::{compose, gather, generator_loss, minibatches, noise, noisy_input, Adversary, GainConfig, Generator};
use crate::masking::{generate_mask, CurriculumSchedule, MaskingSpec, Mechanism};
use crate::mice::{mice_fit_impute, MiceConfig};
use crate::numerics::{masked_mse, mean_all, Adam, Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::par;
use crate::routing::{mean_pool, mr_column, route, GateNetwork, MissingnessEmbedder, Path, PathDecision, RoutingMode};

/// Architecture variants, matching the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Branch weights fixed at 0.5 during training and inference.
    #[serde(rename = "static-fusion-0.5")]
    StaticFusion,
    /// Fusion ratio fixed at 0.5 instead of learned.
    NoAdaptiveFusion,
    NoMicePath,
    NoGainPath,
}

impl Variant {
    pub fn uses_mice(self) -> bool {
        self != Variant::NoMicePath
    }

    pub fn uses_gain(self) -> bool {
        self != Variant::NoGainPath
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::StaticFusion => "static-fusion-0.5",
            Variant::NoAdaptiveFusion => "no-adaptive-fusion",
            Variant::NoMicePath => "no-mice-path",
            Variant::NoGainPath => "no-gain-path",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Hidden size of the missingness embedder.
    pub embed_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub head_width: usize,
    /// Dropout on the task trunk; 0 disables it.
    pub dropout: f64,
    pub routing: RoutingMode,
    pub tau_gate: f64,
    pub fusion: FusionMode,
    pub variant: Variant,
    pub ema_decay: f64,
    /// Keep the regulariser's loss weight at its initial value.
    pub freeze_reg_weight: bool,
    pub scale_init: ScaleInit,
    /// Generator and critic settings. Epochs, batch size, learning rate
    /// and seed here are ignored in favour of the fields above.
    pub gain: GainConfig,
    pub mice: MiceConfig,
    pub masking: MaskingSpec,
    pub curriculum: CurriculumSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            embed_dim: 16,
            key_dim: 16,
            value_dim: 16,
            head_width: 16,
            dropout: 0.0,
            routing: RoutingMode::Fixed,
            tau_gate: 0.5,
            fusion: FusionMode::Routed,
            variant: Variant::Full,
            ema_decay: 0.99,
            freeze_reg_weight: false,
            scale_init: ScaleInit::Balanced,
            gain: GainConfig::default(),
            mice: MiceConfig::default(),
            masking: MaskingSpec::default(),
            curriculum: CurriculumSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.embed_dim == 0 || self.key_dim == 0 || self.value_dim == 0 || self.head_width == 0 {
            return Err(Error::Config("batch size and layer widths must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("lr must be positive, dropout in [0, 1), ema_decay in [0, 1]".into()));
        }
        if !(self.tau_gate > 0.0 && self.tau_gate < 1.0) {
            return Err(Error::Config("tau_gate must be in (0, 1)".into()));
        }
        self.gain.validate()?;
        self.mice.validate()?;
        self.masking.validate()?;
        self.curriculum.validate()
    }
}

/// Starting point of the loss log-scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleInit {
    /// `s_i = 0`, so every `λ_i` starts at 0.5.
    Unit,
    /// `s_i = ½ ln L_i` on the first batch, the minimiser of `λ_i L_i + s_i`
    /// for that batch. Without it the squared weight norm (hundreds at
    /// initialisation) dominates early training while `s_reg` catches up.
    Balanced,
}

/// `λ_i = 1 / (2σ_i²)` with `σ_i = exp(s_i)`.
pub fn loss_weights(s: [f64; 3]) -> [f64; 3] {
    s.map(|v| 0.5 * (-2.0 * v).exp())
}

/// `Σ λ_i L_i + Σ s_i` over the active components.
pub fn joint_loss_value(l: [f64; 3], s: [f64; 3], active: [bool; 3]) -> f64 {
    let w = loss_weights(s);
    (0..3).filter(|&i| active[i]).map(|i| w[i] * l[i] + s[i]).sum()
}

/// Joint loss on the tape. `scales` are `[1, 1]` log-σ values; inactive
/// components contribute neither their term nor their log-σ.
pub fn joint_loss(tape: &mut Tape, l: [Var; 3], scales: [Var; 3], active: [bool; 3]) -> Result<Var> {
    for (i, &c) in l.iter().enumerate() {
        let v = tape.scalar_value(c);
        if active[i] && !v.is_finite() {
            return Err(Error::Numerical(format!("loss component {i} is {v}")));
        }
    }
    let mut total: Option<Var> = None;
    for i in (0..3).filter(|&i| active[i]) {
        let e = tape.scale(scales[i], -2.0);
        let e = tape.exp(e);
        let w = tape.scale(e, 0.5);
        let term = tape.mul(w, l[i])?;
        let term = tape.add(term, scales[i])?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// All learnable parameters except the critic's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub d: usize,
    pub store: ParamStore,
    pub embedder: MissingnessEmbedder,
    pub gate: GateNetwork,
    pub generator: Generator,
    pub cross: CrossPathAttention,
    pub head: AdaptiveFusionHead,
    /// Log-σ for imputation, task and regulariser losses.
    pub scales: [ParamId; 3],
}

impl Model {
    pub fn new<R: Rng + ?Sized>(d: usize, cfg: &TrainConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embedder = MissingnessEmbedder::new(&mut store, cfg.embed_dim, rng);
        let gate = GateNetwork::new(&mut store, cfg.embed_dim, rng);
        let generator = Generator::new(&mut store, "gen", d, &cfg.gain, rng);
        let cross = CrossPathAttention::new(&mut store, cfg.embed_dim, d, cfg.key_dim, cfg.value_dim, rng);
        let head = AdaptiveFusionHead::new(&mut store, d, cfg.value_dim, cfg.head_width, rng);
        let scales = [
            store.add("loss.s_imp", Tensor::scalar(0.0)),
            store.add("loss.s_task", Tensor::scalar(0.0)),
            store.add("loss.s_reg", Tensor::scalar(0.0)),
        ];
        Model {
            d,
            store,
            embedder,
            gate,
            generator,
            cross,
            head,
            scales,
        }
    }

    /// Current `[λ_imp, λ_task, λ_reg]`.
    pub fn lambdas(&self) -> [f64; 3] {
        loss_weights(self.scales.map(|id| self.store.get(id).item()))
    }
}

/// Everything random in one forward pass, drawn up front so a pass can be
/// replayed exactly (finite-difference checks rely on this).
#[derive(Clone, Debug)]
pub struct StepInputs {
    /// Values with zeros where truth is unknown, `[batch, d]`.
    pub x: Tensor,
    /// 1 where the model may see the cell.
    pub m: Tensor,
    /// 0 where a hidden cell has known truth (reconstruction targets).
    pub recon: Tensor,
    /// Completed rows from the MICE branch.
    pub x_mice: Tensor,
    /// Generator input and noise.
    pub xt: Tensor,
    pub z: Tensor,
    /// Inverted-dropout mask over the task trunk.
    pub keep: Option<Tensor>,
    pub y: Option<Vec<f64>>,
}

impl StepInputs {
    pub fn draw<R: Rng + ?Sized>(
        x: Tensor,
        m: Tensor,
        recon: Tensor,
        x_mice: Tensor,
        y: Option<Vec<f64>>,
        cfg: &TrainConfig,
        stochastic: bool,
        rng: &mut R,
    ) -> Self {
        let b = x.rows();
        let (xt, z) = if stochastic {
            (noisy_input(&x, &m, cfg.gain.fill_noise, rng), noise(b, cfg.gain.noise_dim, rng))
        } else {
            (x.mul(&m).expect("shape"), Tensor::zeros(&[b, cfg.gain.noise_dim]))
        };
        let keep = (stochastic && cfg.dropout > 0.0).then(|| {
            let q = 1.0 - cfg.dropout;
            let data = (0..b * cfg.head_width)
                .map(|_| if rng.random::<f64>() < q { 1.0 / q } else { 0.0 })
                .collect();
            Tensor::from_vec(b, cfg.head_width, data).expect("shape")
        });
        StepInputs {
            x,
            m,
            recon,
            x_mice,
            xt,
            z,
            keep,
            y,
        }
    }
}

/// How the branch weights of a pass are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Mixing {
    /// Attention with the gate as log-prior (training and fused inference).
    Learned,
    /// Fixed weights per row, `[batch, 2]`.
    Fixed(Tensor),
}

/// Scalars a pass needs besides its inputs.
#[derive(Clone, Debug)]
pub struct StepContext {
    pub t_norm: f64,
    pub variant: Variant,
    pub mixing: Mixing,
    /// Confidence signals for the fusion ratio; `None` computes them from
    /// the batch (training).
    pub confidence: Option<(f64, f64)>,
    pub recon_weight: f64,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Pass {
    pub x_gain: Option<Var>,
    pub x_hat: Option<Var>,
    pub x_mix: Var,
    pub alpha: Var,
    pub gamma: Var,
    pub lambda_t: Var,
    pub logits: Var,
    pub c_imp: f64,
    pub c_task: f64,
}

fn rowwise_mean_bce_logits(tape: &mut Tape, logits: Var, y: &[f64]) -> Result<Var> {
    let yv = tape.constant(Tensor::from_vec(y.len(), 1, y.to_vec())?);
    let sp = tape.softplus(logits);
    let yz = tape.mul(yv, logits)?;
    let per = tape.sub(sp, yz)?;
    Ok(mean_all(tape, per))
}

/// Forward pass through embedder, gate, both branches, fusion and head.
pub fn forward(model: &Model, tape: &mut Tape, p: &Binding, inp: &StepInputs, ctx: &StepContext) -> Result<Pass> {
    let d = model.d;
    let e = model.embedder.forward(tape, p, &inp.x, &inp.m)?;
    let pooled = mean_pool(tape, e, d)?;
    let mr = mr_column(&inp.m);
    let gate_logit = model.gate.logit(tape, p, pooled, &mr)?;
    let gamma = tape.sigmoid(gate_logit);

    let x_mice = tape.constant(inp.x_mice.clone());
    let (x_gain, x_hat) = if ctx.variant.uses_gain() {
        let x_hat = model.generator.forward(tape, p, &inp.xt, &inp.m, &inp.z)?;
        (Some(compose(tape, &inp.x, x_hat, &inp.m)?), Some(x_hat))
    } else {
        (None, None)
    };
    let mut tokens = Vec::with_capacity(2);
    if ctx.variant.uses_mice() {
        tokens.push((0, x_mice));
    }
    if let Some(g) = x_gain {
        tokens.push((1, g));
    }
    let outputs: Vec<Var> = tokens.iter().map(|t| t.1).collect();

    let (alpha, h_fused) = match (&ctx.mixing, ctx.variant, tokens.len()) {
        (_, _, 1) => {
            let (a, h) = model.cross.forward(tape, p, pooled, &tokens, None)?;
            (a, h)
        }
        (Mixing::Fixed(w), _, _) => fixed_mix(model, tape, p, w, &outputs)?,
        (Mixing::Learned, Variant::StaticFusion, _) => {
            let w = Tensor::full(&[inp.x.rows(), 2], 0.5);
            fixed_mix(model, tape, p, &w, &outputs)?
        }
        (Mixing::Learned, _, _) => {
            // log(1 − γ) = −softplus(z), log γ = −softplus(−z)
            let lo_m = tape.softplus(gate_logit);
            let neg = tape.scale(gate_logit, -1.0);
            let lo_g = tape.softplus(neg);
            let prior = tape.concat_cols(&[lo_m, lo_g])?;
            let prior = tape.scale(prior, -1.0);
            model.cross.forward(tape, p, pooled, &tokens, Some(prior))?
        }
    };
    let x_mix = weighted_sum(tape, alpha, &outputs)?;

    let h_imp = model.head.h_imp(tape, p, h_fused)?;
    let h_task = model.head.h_task(tape, p, x_mix, inp.keep.as_ref())?;
    let (c_imp, c_task) = match ctx.confidence {
        Some(c) => c,
        None => {
            let l_imp = tape.value(x_mix).clone();
            let (mut se, mut cnt) = (0.0, 0usize);
            for k in 0..l_imp.len() {
                if inp.recon.data()[k] == 0.0 {
                    se += (l_imp.data()[k] - inp.x.data()[k]).powi(2);
                    cnt += 1;
                }
            }
            let c_imp = if cnt == 0 { 0.0 } else { se / cnt as f64 };
            let c_task = match &inp.y {
                Some(y) => {
                    let prelim = model.head.logits(tape, p, h_task)?;
                    let z = tape.value(prelim);
                    y.iter()
                        .zip(z.data())
                        .map(|(&yi, &zi)| bce(yi, crate::numerics::sigmoid(zi)))
                        .sum::<f64>()
                        / y.len().max(1) as f64
                }
                None => 0.0,
            };
            (c_imp, c_task)
        }
    };
    let lambda_t = if ctx.variant == Variant::NoAdaptiveFusion {
        tape.constant(Tensor::scalar(0.5))
    } else {
        model.head.lambda(tape, p, ctx.t_norm, c_imp, c_task)?
    };
    let mixed = adaptive_mix(tape, lambda_t, h_imp, h_task)?;
    let logits = model.head.logits(tape, p, mixed)?;
    Ok(Pass {
        x_gain,
        x_hat,
        x_mix,
        alpha,
        gamma,
        lambda_t,
        logits,
        c_imp,
        c_task,
    })
}

fn fixed_mix(model: &Model, tape: &mut Tape, p: &Binding, w: &Tensor, outputs: &[Var]) -> Result<(Var, Var)> {
    let alpha = tape.constant(w.clone());
    let values: Vec<Var> = outputs
        .iter()
        .map(|&x| tape.matmul(x, p[model.cross.wv]))
        .collect::<Result<_>>()?;
    let h = weighted_sum(tape, alpha, &values)?;
    Ok((alpha, h))
}

/// Loss values of one training pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub imp: f64,
    pub task: f64,
    pub reg: f64,
    /// Adversarial-plus-reconstruction generator loss on the GAIN branch.
    pub generator: f64,
    pub total: f64,
    pub lambda_t: f64,
    pub gamma: f64,
    pub c_imp: f64,
    pub c_task: f64,
}

/// Builds the full training objective on `tape` and returns its root.
pub fn objective(
    model: &Model,
    critic: &Adversary,
    tape: &mut Tape,
    p: &Binding,
    inp: &StepInputs,
    ctx: &StepContext,
) -> Result<(Var, StepLosses)> {
    let pass = forward(model, tape, p, inp, ctx)?;
    let xv = tape.constant(inp.x.clone());
    let l_imp = masked_mse(tape, pass.x_mix, xv, &inp.recon)?;
    let l_task = match &inp.y {
        Some(y) => rowwise_mean_bce_logits(tape, pass.logits, y)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let mut l_reg: Option<Var> = None;
    for id in model.store.ids().filter(|id| !model.scales.contains(id)) {
        let w = p[id];
        let sq = tape.mul(w, w)?;
        let s = tape.sum_all(sq);
        l_reg = Some(match l_reg {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let l_reg = l_reg.expect("model has parameters");
    let active = [true, inp.y.is_some(), true];
    let mut total = joint_loss(tape, [l_imp, l_task, l_reg], model.scales.map(|id| p[id]), active)?;
    let mut gen_value = 0.0;
    if let Some(x_hat) = pass.x_hat {
        let cp = critic.store.bind_frozen(tape);
        let f = |t: &mut Tape, x: Var, mv: Var| critic.critic.forward(t, &cp, x, mv);
        let g = generator_loss(tape, &f, &inp.x, x_hat, &inp.m, Some(&inp.recon), ctx.recon_weight)?;
        gen_value = tape.scalar_value(g);
        total = tape.add(total, g)?;
    }
    let value = tape.scalar_value(total);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("joint loss is {value}")));
    }
    let gamma = tape.value(pass.gamma);
    let losses = StepLosses {
        imp: tape.scalar_value(l_imp),
        task: tape.scalar_value(l_task),
        reg: tape.scalar_value(l_reg),
        generator: gen_value,
        total: value,
        lambda_t: tape.scalar_value(pass.lambda_t),
        gamma: gamma.sum() / gamma.len().max(1) as f64,
        c_imp: pass.c_imp,
        c_task: pass.c_task,
    };
    Ok((total, losses))
}

/// Per-epoch averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mechanism: Mechanism,
    pub losses: StepLosses,
    pub critic: f64,
    /// `[λ_imp, λ_task, λ_reg]` at the end of the epoch.
    pub lambdas: [f64; 3],
}

/// Complete, resumable training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adversary: Adversary,
    pub opt: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub ema_imp: Option<f64>,
    pub ema_task: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub has_labels: bool,
    pub scales_ready: bool,
    /// Column statistics of the training data, if it was normalised.
    pub normalizer: Option<Normalizer>,
}

impl TrainState {
    pub fn new(d: usize, cfg: &TrainConfig, has_labels: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(d, cfg, &mut rng);
        let gcfg = GainConfig {
            lr: cfg.lr,
            ..cfg.gain.clone()
        };
        let adversary = Adversary::new(d, &gcfg, &mut rng);
        let opt = Adam::new(&model.store, cfg.lr, 0.9, 0.999);
        Ok(TrainState {
            config: cfg.clone(),
            model,
            adversary,
            opt,
            epoch: 0,
            rng,
            ema_imp: None,
            ema_task: None,
            history: Vec::new(),
            has_labels,
            scales_ready: cfg.scale_init == ScaleInit::Unit,
            normalizer: None,
        })
    }

    fn frozen(&self) -> Vec<bool> {
        let mut f = vec![false; self.model.store.len()];
        if !self.has_labels {
            f[self.model.scales[1].0] = true;
        }
        if self.config.freeze_reg_weight {
            f[self.model.scales[2].0] = true;
        }
        f
    }

    fn critic_config(&self) -> GainConfig {
        GainConfig {
            lr: self.config.lr,
            ..self.config.gain.clone()
        }
    }

    /// Runs epochs until `until` have been completed.
    pub fn train_until(&mut self, x: &DataMatrix, truth: &MaskMatrix, y: Option<&LabelVector>, until: usize) -> Result<()> {
        if x.n_cols() != self.model.d || truth.n_rows() != x.n_rows() || y.is_some_and(|y| y.len() != x.n_rows()) {
            return Err(Error::dim("train", "data, mask and labels must agree with the model"));
        }
        if y.is_some() != self.has_labels {
            return Err(Error::contract("label availability differs from the state's"));
        }
        while self.epoch < until.min(self.config.epochs) {
            self.train_epoch(x, truth, y)?;
        }
        Ok(())
    }

    fn train_epoch(&mut self, x: &DataMatrix, truth: &MaskMatrix, y: Option<&LabelVector>) -> Result<()> {
        let cfg = self.config.clone();
        let epoch = self.epoch;
        let total = cfg.epochs;
        let mechanism = cfg.curriculum.phase_for_epoch(epoch, total);
        let spec = cfg.masking.with_mechanism(mechanism);
        let pristine = x.with_values(x.filled(0.0))?;
        let m_cur = generate_mask(&pristine, &spec, &mut self.rng)?;
        let m_in = truth.and(&m_cur)?;
        let x_mice_all = if cfg.variant.uses_mice() {
            let masked = apply_mask(&pristine, &m_in)?;
            let (res, _) = mice_fit_impute(&masked, &m_in, &cfg.mice, &mut self.rng)?;
            res.values.filled(0.0)
        } else {
            pristine.filled(0.0)
        };
        let d = x.n_cols();
        let ctx = StepContext {
            t_norm: epoch as f64 / total.max(1) as f64,
            variant: cfg.variant,
            mixing: Mixing::Learned,
            confidence: None,
            recon_weight: cfg.gain.recon_weight,
        };
        let ccfg = self.critic_config();
        let frozen = self.frozen();
        let mut acc = StepLosses::default();
        let mut critic_acc = 0.0;
        let batches = minibatches(x.n_rows(), cfg.batch_size, &mut self.rng);
        for rows in &batches {
            let batch = gather(x, truth, &m_cur, rows);
            let x_mice = Tensor::from_vec(rows.len(), d, rows.iter().flat_map(|&i| x_mice_all[i * d..(i + 1) * d].to_vec()).collect())?;
            let yb = y.map(|y| rows.iter().map(|&i| y.y[i]).collect());
            let inp = StepInputs::draw(batch.x.clone(), batch.m.clone(), batch.recon.clone(), x_mice, yb, &cfg, true, &mut self.rng);

            if cfg.variant.uses_gain() {
                let fake = {
                    let mut tape = Tape::new();
                    let p = self.model.store.bind_frozen(&mut tape);
                    let x_hat = self.model.generator.forward(&mut tape, &p, &inp.xt, &inp.m, &inp.z)?;
                    let c = compose(&mut tape, &inp.x, x_hat, &inp.m)?;
                    tape.value(c).clone()
                };
                let real = batch.real(&fake);
                for _ in 0..cfg.gain.critic_steps {
                    critic_acc += self
                        .adversary
                        .step(&real, &fake, &inp.m, &ccfg, &mut self.rng)
                        .map_err(|e| annotate(e, epoch))?
                        / cfg.gain.critic_steps as f64;
                }
            }

            if !self.scales_ready {
                let mut tape = Tape::new();
                let p = self.model.store.bind_frozen(&mut tape);
                let (_, l) = objective(&self.model, &self.adversary, &mut tape, &p, &inp, &ctx).map_err(|e| annotate(e, epoch))?;
                for (id, v) in self.model.scales.iter().zip([l.imp, l.task, l.reg]) {
                    if v > 0.0 {
                        *self.model.store.get_mut(*id) = Tensor::scalar(0.5 * v.ln());
                    }
                }
                self.scales_ready = true;
            }
            let mut tape = Tape::new();
            let p = self.model.store.bind(&mut tape);
            let (root, losses) = objective(&self.model, &self.adversary, &mut tape, &p, &inp, &ctx).map_err(|e| annotate(e, epoch))?;
            let grads = tape.gradients(root, p.vars())?;
            self.opt.step(&mut self.model.store, &grads, &frozen).map_err(|e| annotate(e, epoch))?;
            let decay = cfg.ema_decay;
            let ema = |prev: Option<f64>, v: f64| Some(prev.map_or(v, |p| decay * p + (1.0 - decay) * v));
            self.ema_imp = ema(self.ema_imp, losses.c_imp);
            if y.is_some() {
                self.ema_task = ema(self.ema_task, losses.c_task);
            }
            add_losses(&mut acc, &losses);
        }
        let k = batches.len().max(1) as f64;
        scale_losses(&mut acc, 1.0 / k);
        self.history.push(EpochRecord {
            epoch,
            mechanism,
            losses: acc,
            critic: critic_acc / k,
            lambdas: self.model.lambdas(),
        });
        self.epoch += 1;
        Ok(())
    }
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("training diverged in epoch {epoch}: {msg}")),
        other => other,
    }
}

fn add_losses(acc: &mut StepLosses, l: &StepLosses) {
    acc.imp += l.imp;
    acc.task += l.task;
    acc.reg += l.reg;
    acc.generator += l.generator;
    acc.total += l.total;
    acc.lambda_t += l.lambda_t;
    acc.gamma += l.gamma;
    acc.c_imp += l.c_imp;
    acc.c_task += l.c_task;
}

fn scale_losses(acc: &mut StepLosses, k: f64) {
    for v in [
        &mut acc.imp,
        &mut acc.task,
        &mut acc.reg,
        &mut acc.generator,
        &mut acc.total,
        &mut acc.lambda_t,
        &mut acc.gamma,
        &mut acc.c_imp,
        &mut acc.c_task,
    ] {
        *v *= k;
    }
}

/// Trains from scratch on pristine data `x` whose known cells are marked by
/// `truth`.
pub fn train(x: &DataMatrix, truth: &MaskMatrix, y: Option<&LabelVector>, cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(x.n_cols(), cfg, y.is_some())?;
    state.train_until(x, truth, y, cfg.epochs)?;
    Ok(state)
}

/// Output of one inference pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub imputation: ImputationResult,
    pub decisions: Vec<PathDecision>,
    /// Task probability per row.
    pub y_prob: Vec<f64>,
    pub lambda_t: f64,
}

/// Inference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub fusion: FusionMode,
    pub routing: RoutingMode,
    pub tau_gate: f64,
    /// Fresh generator noise and dropout per pass; off gives deterministic
    /// output.
    pub stochastic: bool,
    pub seed: u64,
}

impl InferenceOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        InferenceOptions {
            fusion: cfg.fusion,
            routing: cfg.routing,
            tau_gate: cfg.tau_gate,
            stochastic: true,
            seed: cfg.seed,
        }
    }
}

impl TrainState {
    /// MICE branch output for the table being imputed (fitted on it).
    pub fn mice_branch(&self, x: &DataMatrix, m: &MaskMatrix, seed: u64) -> Result<Tensor> {
        let (res, _) = mice_fit_impute(&apply_mask(x, m)?, m, &self.config.mice, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(res.values.to_tensor(0.0))
    }

    fn confidence(&self) -> (f64, f64) {
        (self.ema_imp.unwrap_or(0.0), self.ema_task.unwrap_or(0.0))
    }

    /// One pass over `x` under mask `m` given a precomputed MICE branch.
    pub fn predict_pass(&self, x: &DataMatrix, m: &MaskMatrix, x_mice: &Tensor, opts: &InferenceOptions, pass: u64) -> Result<Prediction> {
        let d = self.model.d;
        if x.n_cols() != d || m.n_cols() != d || m.n_rows() != x.n_rows() || x_mice.shape() != [x.n_rows(), d] {
            return Err(Error::contract(format!("model expects {d} columns, got {}", x.n_cols())));
        }
        let n = x.n_rows();
        let bs = self.config.batch_size;
        let xf = x.to_tensor(0.0).mul(&m.to_tensor())?;
        let mf = m.to_tensor();
        let variant = self.config.variant;
        let mut cfg = self.config.clone();
        if !opts.stochastic {
            cfg.dropout = 0.0;
        }
        let chunks = n.div_ceil(bs.max(1));
        let rows_of = |t: &Tensor, lo: usize, hi: usize| Tensor::from_vec(hi - lo, d, t.data()[lo * d..hi * d].to_vec());

        struct Chunk {
            values: Vec<f64>,
            gamma: Vec<f64>,
            alpha: Vec<f64>,
            y: Vec<f64>,
            lambda: f64,
        }
        let parts = par::map_indexed(chunks, |c| -> Result<Chunk> {
            let lo = c * bs;
            let hi = (lo + bs).min(n);
            let (xb, mb, xmb) = (rows_of(&xf, lo, hi)?, rows_of(&mf, lo, hi)?, rows_of(x_mice, lo, hi)?);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ pass.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            rng.set_stream(c as u64);
            let recon = Tensor::full(mb.shape(), 1.0);
            let inp = StepInputs::draw(xb, mb.clone(), recon, xmb, None, &cfg, opts.stochastic, &mut rng);
            let confidence = Some(self.confidence());
            let both = variant.uses_mice() && variant.uses_gain();
            let mixing = match (opts.fusion, both) {
                (_, false) => Mixing::Learned,
                (FusionMode::Static, true) => Mixing::Fixed(Tensor::full(&[hi - lo, 2], 0.5)),
                (FusionMode::Fused, true) if variant == Variant::StaticFusion => Mixing::Fixed(Tensor::full(&[hi - lo, 2], 0.5)),
                (FusionMode::Fused, true) => Mixing::Learned,
                (FusionMode::Routed, true) => {
                    let gamma = self.gate_values(&inp)?;
                    let mr = mr_column(&mb);
                    let dec = route(mr.data(), &gamma, opts.routing, opts.tau_gate)?;
                    let mut w = Tensor::zeros(&[hi - lo, 2]);
                    for (i, dcs) in dec.iter().enumerate() {
                        w.set(i, if dcs.path == Path::Gain { 1 } else { 0 }, 1.0);
                    }
                    Mixing::Fixed(w)
                }
            };
            let ctx = StepContext {
                t_norm: 1.0,
                variant,
                mixing,
                confidence,
                recon_weight: 0.0,
            };
            let mut tape = Tape::new();
            let p = self.model.store.bind_frozen(&mut tape);
            let out = forward(&self.model, &mut tape, &p, &inp, &ctx)?;
            let alpha = tape.value(out.alpha);
            let alpha_gain: Vec<f64> = match (variant.uses_mice(), variant.uses_gain()) {
                (true, true) => (0..hi - lo).map(|i| alpha.get(i, 1)).collect(),
                (false, _) => vec![1.0; hi - lo],
                (true, false) => vec![0.0; hi - lo],
            };
            Ok(Chunk {
                values: tape.value(out.x_mix).data().to_vec(),
                gamma: tape.value(out.gamma).data().to_vec(),
                alpha: alpha_gain,
                y: tape.value(out.logits).data().iter().map(|&z| crate::numerics::sigmoid(z)).collect(),
                lambda: tape.scalar_value(out.lambda_t),
            })
        });
        let mut values = Vec::with_capacity(n * d);
        let (mut gamma, mut alpha, mut y_prob) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut lambda_t = 0.0;
        for part in parts {
            let part = part?;
            values.extend(part.values);
            gamma.extend(part.gamma);
            alpha.extend(part.alpha);
            y_prob.extend(part.y);
            lambda_t = part.lambda;
        }
        // Observed cells come straight from the input.
        for (k, v) in values.iter_mut().enumerate() {
            if m.bits()[k] {
                *v = x.values()[k];
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("imputation produced non-finite values".into()));
        }
        let mr: Vec<f64> = (0..n).map(|i| m.row_missing(i) as f64 / d.max(1) as f64).collect();
        let decisions = route(&mr, &gamma, opts.routing, opts.tau_gate)?;
        let provenance = (0..n * d)
            .map(|k| {
                if m.bits()[k] {
                    return Provenance::Observed;
                }
                let a = alpha[k / d];
                if a == 1.0 {
                    Provenance::Gain
                } else if a == 0.0 {
                    Provenance::Mice
                } else {
                    Provenance::Fused
                }
            })
            .collect();
        Ok(Prediction {
            imputation: ImputationResult {
                values: x.with_values(values)?,
                provenance,
                uncertainty: vec![0.0; n * d],
            },
            decisions,
            y_prob,
            lambda_t,
        })
    }

    fn gate_values(&self, inp: &StepInputs) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.model.store.bind_frozen(&mut tape);
        let e = self.model.embedder.forward(&mut tape, &p, &inp.x, &inp.m)?;
        let pooled = mean_pool(&mut tape, e, self.model.d)?;
        let g = self.model.gate.gamma(&mut tape, &p, pooled, &mr_column(&inp.m))?;
        Ok(tape.value(g).data().to_vec())
    }

    /// Single deterministic-or-stochastic prediction, fitting the MICE
    /// branch on `x` first.
    pub fn predict(&self, x: &DataMatrix, m: &MaskMatrix, opts: &InferenceOptions) -> Result<Prediction> {
        let x_mice = self.mice_branch(x, m, opts.seed)?;
        self.predict_pass(x, m, &x_mice, opts, 0)
    }
}

/// Mean and population variance of `K` stochastic predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub k: usize,
    /// Mean task probability per row.
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Mean and variance of every imputed cell, row-major.
    pub cell_mean: Vec<f64>,
    pub cell_variance: Vec<f64>,
    /// The first pass's routing, provenance and fusion ratio.
    pub first: Prediction,
}

/// Elementwise mean and population variance `(1/K)Σ(v − v̄)²` over
/// samples, accumulated in sample order with Welford's update. Identical
/// samples give a mean equal to the sample and a variance of exactly zero.
pub fn mc_moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = samples.len();
    let len = samples.first().map_or(0, Vec::len);
    if k == 0 || samples.iter().any(|s| s.len() != len) {
        return Err(Error::contract("need at least one sample, all the same length"));
    }
    let mut mean = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    for (n, s) in samples.iter().enumerate() {
        let n = (n + 1) as f64;
        for ((mu, acc), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(s) {
            let delta = v - *mu;
            *mu += delta / n;
            *acc += delta * (v - *mu);
        }
    }
    let var = m2.into_iter().map(|v| (v / k as f64).max(0.0)).collect();
    Ok((mean, var))
}

/// `K` passes with independent noise streams derived from `(seed, k)`.
pub fn predict_with_uncertainty(state: &TrainState, x: &DataMatrix, m: &MaskMatrix, k: usize, opts: &InferenceOptions) -> Result<UncertaintyEstimate> {
    if k == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    let x_mice = state.mice_branch(x, m, opts.seed)?;
    let passes: Vec<Prediction> = par::map_indexed(k, |pass| state.predict_pass(x, m, &x_mice, opts, pass as u64))
        .into_iter()
        .collect::<Result<_>>()?;
    let ys: Vec<Vec<f64>> = passes.iter().map(|p| p.y_prob.clone()).collect();
    let cells: Vec<Vec<f64>> = passes.iter().map(|p| p.imputation.values.values().to_vec()).collect();
    let (mean, variance) = mc_moments(&ys)?;
    let (cell_mean, cell_variance) = mc_moments(&cells)?;
    let mut first = passes.into_iter().next().expect("k >= 1");
    first.imputation.uncertainty = cell_variance.clone();
    Ok(UncertaintyEstimate {
        k,
        mean,
        variance,
        cell_mean,
        cell_variance,
        first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_sigma_halves_every_component() {
        assert_eq!(loss_weights([0.0; 3]), [0.5; 3]);
        assert_eq!(joint_loss_value([1.0, 2.0, 3.0], [0.0; 3], [true; 3]), 3.0);
        let w = loss_weights([0.5f64.ln(), 0.0, 0.0]);
        assert!((w[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_pass_moments() {
        let (m, v) = mc_moments(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!((m[0], v[0]), (0.5, 0.25));
        let (_, v1) = mc_moments(&[vec![0.3, 0.7]]).unwrap();
        assert_eq!(v1, vec![0.0, 0.0]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Full, Variant::StaticFusion, Variant::NoAdaptiveFusion, Variant::NoMicePath, Variant::NoGainPath] {
            let s = serde_json::to_string(&v).unwrap();
            assert_eq!(s, format!("\"{}\"", v.name()));
            assert_eq!(serde_json::from_str::<Variant>(&s).unwrap(), v);
        }
    }
}
