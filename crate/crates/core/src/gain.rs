//! Adversarial imputation branch: a generator with causal attention over
//! feature steps and a Wasserstein critic with gradient penalty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, ImputationResult, MaskMatrix, Provenance};
use crate::error::{Error, Result};
use crate::masking::{generate_mask, CurriculumSchedule, MaskingSpec};
use crate::numerics::{
    glorot, grad_norm_of_scalar_field, masked_mse, mean_all, softmax_rows, Adam, Binding, Linear, ParamId, ParamStore,
    Tape, Tensor, Var,
};
use crate::par;

/// Which way the critic objective is minimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticSign {
    /// Minimise `E[D(fake)] − E[D(real)] + λ·GP`: the critic scores real
    /// samples high, which is what the generator's `−E[D(fake)]` term
    /// pushes against.
    Standard,
    /// Minimise `E[D(real)] − E[D(fake)] + λ·GP` literally.
    AsWritten,
}

/// How the penalty's parameter gradient is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyGradMode {
    /// Differentiate through the recorded input gradient.
    Nested,
    /// Central differences over every critic parameter. Slow; meant for
    /// cross-checking on small critics.
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainConfig {
    pub noise_dim: usize,
    /// Width of the per-step embedding the attention works in.
    pub embed_dim: usize,
    pub hidden: usize,
    pub critic_hidden: usize,
    pub gp_weight: f64,
    pub recon_weight: f64,
    pub critic_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Standard deviation of the noise written into missing input cells.
    pub fill_noise: f64,
    pub critic_sign: CriticSign,
    pub penalty_grad: PenaltyGradMode,
    pub seed: u64,
}

impl Default for GainConfig {
    fn default() -> Self {
        GainConfig {
            noise_dim: 4,
            embed_dim: 8,
            hidden: 32,
            critic_hidden: 32,
            gp_weight: 10.0,
            recon_weight: 10.0,
            critic_steps: 5,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            epochs: 50,
            batch_size: 128,
            fill_noise: 0.01,
            critic_sign: CriticSign::Standard,
            penalty_grad: PenaltyGradMode::Nested,
            seed: 0,
        }
    }
}

impl GainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.critic_hidden == 0 || self.batch_size == 0 || self.critic_steps == 0 {
            return Err(Error::Config("GAIN widths, batch size and critic steps must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.gp_weight >= 0.0) || !(self.recon_weight >= 0.0) || !(self.fill_noise >= 0.0) {
            return Err(Error::Config("GAIN learning rate must be positive and weights non-negative".into()));
        }
        Ok(())
    }
}

/// Single-head attention whose queries come from the previous step's
/// context and whose keys and values come from the current states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
}

/// Keep-mask for a causal softmax over `steps` positions, repeated for
/// `batch` sequences: row `(b, i)` keeps columns `0..=i`.
pub fn causal_keep(batch: usize, steps: usize) -> Tensor {
    let mut keep = Tensor::zeros(&[batch * steps, steps]);
    for b in 0..batch {
        for i in 0..steps {
            for j in 0..=i {
                keep.set(b * steps + i, j, 1.0);
            }
        }
    }
    keep
}

impl TemporalAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        TemporalAttention {
            wq: store.add(format!("{name}.wq"), glorot(rng, dim, dim)),
            wk: store.add(format!("{name}.wk"), glorot(rng, dim, dim)),
            wv: store.add(format!("{name}.wv"), glorot(rng, dim, dim)),
            dim,
        }
    }

    /// `h` and `ctx` are `[batch·steps, dim]`, sequence-major. Returns the
    /// attended values and the `[batch·steps, steps]` attention weights.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, h: Var, ctx: Var, steps: usize) -> Result<(Var, Var)> {
        let rows = tape.value(h).rows();
        if steps == 0 || rows % steps != 0 || tape.value(ctx).shape() != tape.value(h).shape() {
            return Err(Error::dim("temporal_attention", "states and context must be [batch·steps, dim]"));
        }
        let batch = rows / steps;
        let e = self.dim;
        let q = tape.matmul(ctx, p[self.wq])?;
        let k = tape.matmul(h, p[self.wk])?;
        let v = tape.matmul(h, p[self.wv])?;
        let q3 = tape.reshape(q, &[batch, steps, e])?;
        let k3 = tape.reshape(k, &[batch, steps, e])?;
        let v3 = tape.reshape(v, &[batch, steps, e])?;
        let scores = tape.matmul_t(q3, k3, false, true)?;
        let scores = tape.scale(scores, 1.0 / (e as f64).sqrt());
        let flat = tape.reshape(scores, &[batch * steps, steps])?;
        let weights = softmax_rows(tape, flat, Some(&causal_keep(batch, steps)))?;
        let w3 = tape.reshape(weights, &[batch, steps, steps])?;
        let out = tape.matmul(w3, v3)?;
        Ok((tape.reshape(out, &[batch * steps, e])?, weights))
    }
}

/// Generator `X̂ = G(X̃, M, Z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub d: usize,
    pub noise_dim: usize,
    pub embed: Linear,
    pub attention: TemporalAttention,
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, cfg: &GainConfig, rng: &mut R) -> Self {
        let e = cfg.embed_dim;
        let embed = Linear::new(store, &format!("{name}.embed"), 2 + d, e, rng);
        let attention = TemporalAttention::new(store, &format!("{name}.attn"), e, rng);
        let width = d * e + 2 * d + cfg.noise_dim;
        Generator {
            d,
            noise_dim: cfg.noise_dim,
            embed,
            attention,
            l1: Linear::new(store, &format!("{name}.l1"), width, cfg.hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), cfg.hidden, cfg.hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), cfg.hidden, d, rng),
        }
    }

    // Per-step tokens [x̃_j, m_j, onehot(j)]; with `shift`, row j carries
    // step j−1's token and row 0 is left empty.
    fn step_tokens(&self, xt: &Tensor, m: &Tensor, shift: bool) -> Tensor {
        let (b, d) = (xt.rows(), self.d);
        let w = 2 + d;
        let mut t = Tensor::zeros(&[b * d, w]);
        for s in 0..b {
            for j in 0..d {
                let src = if shift {
                    if j == 0 {
                        continue;
                    }
                    j - 1
                } else {
                    j
                };
                let r = s * d + j;
                t.set(r, 0, xt.get(s, src));
                t.set(r, 1, m.get(s, src));
                t.set(r, 2 + src, 1.0);
            }
        }
        t
    }

    /// Dense reconstruction from noise-filled input `xt`, mask `m` and noise
    /// `z` (`[batch, noise_dim]`). Compose with the mask for the imputation.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, xt: &Tensor, m: &Tensor, z: &Tensor) -> Result<Var> {
        let (b, d) = (xt.rows(), self.d);
        if xt.cols() != d || m.shape() != xt.shape() || z.shape() != [b, self.noise_dim] {
            return Err(Error::dim(
                "generator_forward",
                format!("x {:?}, m {:?}, z {:?} for d={d}", xt.shape(), m.shape(), z.shape()),
            ));
        }
        let tokens = tape.constant(self.step_tokens(xt, m, false));
        let prev = tape.constant(self.step_tokens(xt, m, true));
        let h = self.embed.forward(tape, p, tokens)?;
        let h = tape.tanh(h);
        let ctx = self.embed.forward(tape, p, prev)?;
        let ctx = tape.tanh(ctx);
        let mut first = Tensor::full(&[b * d, 1], 1.0);
        for s in 0..b {
            first.set(s * d, 0, 0.0);
        }
        let first = tape.constant(first);
        let ctx = tape.mul_col(ctx, first)?;
        let (att, _) = self.attention.forward(tape, p, h, ctx, d)?;
        let states = tape.add(h, att)?;
        let flat = tape.reshape(states, &[b, d * self.attention.dim])?;
        let xv = tape.constant(xt.clone());
        let mv = tape.constant(m.clone());
        let zv = tape.constant(z.clone());
        let input = tape.concat_cols(&[flat, xv, mv, zv])?;
        let a1 = self.l1.forward(tape, p, input)?;
        let a1 = tape.tanh(a1);
        let a2 = self.l2.forward(tape, p, a1)?;
        let a2 = tape.tanh(a2);
        self.out.forward(tape, p, a2)
    }
}

/// Wasserstein critic on `concat(x, m)`, one unbounded score per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut R) -> Self {
        Critic {
            l1: Linear::new(store, "critic.l1", 2 * d, hidden, rng),
            l2: Linear::new(store, "critic.l2", hidden, hidden, rng),
            out: Linear::new(store, "critic.out", hidden, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var, m: Var) -> Result<Var> {
        let input = tape.concat_cols(&[x, m])?;
        let a1 = self.l1.forward(tape, p, input)?;
        let a1 = tape.tanh(a1);
        let a2 = self.l2.forward(tape, p, a1)?;
        let a2 = tape.tanh(a2);
        self.out.forward(tape, p, a2)
    }
}

/// The three terms of the critic objective, each a scalar.
#[derive(Clone, Copy, Debug)]
pub struct CriticTerms {
    pub real: Var,
    pub fake: Var,
    pub penalty: Var,
}

/// Mean critic scores of real and fake rows and the gradient penalty
/// `E[(‖∇ₓD(x̃)‖ − 1)²]` at `x̃ = u·real + (1 − u)·fake`, one `u` per row.
pub fn critic_terms<F>(tape: &mut Tape, critic: &F, x_real: &Tensor, x_fake: &Tensor, m: &Tensor, u: &[f64]) -> Result<CriticTerms>
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var>,
{
    if x_real.shape() != x_fake.shape() || x_real.shape() != m.shape() || u.len() != x_real.rows() {
        return Err(Error::dim("critic_loss", "real, fake, mask and interpolation weights must agree"));
    }
    let mv = tape.constant(m.clone());
    let rv = tape.constant(x_real.clone());
    let fv = tape.constant(x_fake.clone());
    let sr = critic(tape, rv, mv)?;
    let real = mean_all(tape, sr);
    let sf = critic(tape, fv, mv)?;
    let fake = mean_all(tape, sf);
    let mut interp = x_fake.clone();
    let c = interp.cols();
    for (i, &ui) in u.iter().enumerate() {
        for j in 0..c {
            interp.set(i, j, ui * x_real.get(i, j) + (1.0 - ui) * x_fake.get(i, j));
        }
    }
    let (_, norms) = grad_norm_of_scalar_field(tape, &interp, |t, xv| critic(t, xv, mv))?;
    let dev = tape.add_scalar(norms, -1.0);
    let sq = tape.mul(dev, dev)?;
    let penalty = mean_all(tape, sq);
    Ok(CriticTerms { real, fake, penalty })
}

/// `L_D = E[D(real, M)] − E[D(fake, M)] + λ·E[(‖∇D‖₂ − 1)²]`.
pub fn critic_loss<F>(tape: &mut Tape, critic: &F, x_real: &Tensor, x_fake: &Tensor, m: &Tensor, u: &[f64], gp_weight: f64) -> Result<Var>
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var>,
{
    let t = critic_terms(tape, critic, x_real, x_fake, m, u)?;
    let w = tape.sub(t.real, t.fake)?;
    let gp = tape.scale(t.penalty, gp_weight);
    tape.add(w, gp)
}

/// `L_G = −E[D(X̄, M)] + α·Σ((1 − M)⊙(X − X̂))² / #missing`, where `X̄`
/// composes observed cells of `x` with `x_hat`. `recon_mask`, when given,
/// replaces `m` in the reconstruction term (cells whose truth is unknown
/// should be marked observed there).
pub fn generator_loss<F>(
    tape: &mut Tape,
    critic: &F,
    x: &Tensor,
    x_hat: Var,
    m: &Tensor,
    recon_mask: Option<&Tensor>,
    recon_weight: f64,
) -> Result<Var>
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var>,
{
    let composed = compose(tape, x, x_hat, m)?;
    let mv = tape.constant(m.clone());
    let scores = critic(tape, composed, mv)?;
    let adv = mean_all(tape, scores);
    let adv = tape.scale(adv, -1.0);
    let xv = tape.constant(x.clone());
    let recon = masked_mse(tape, x_hat, xv, recon_mask.unwrap_or(m))?;
    let recon = tape.scale(recon, recon_weight);
    tape.add(adv, recon)
}

/// `m ⊙ x + (1 − m) ⊙ x_hat` on the tape.
pub fn compose(tape: &mut Tape, x: &Tensor, x_hat: Var, m: &Tensor) -> Result<Var> {
    let observed = tape.constant(x.mul(m)?);
    let inv = tape.constant(m.map(|v| 1.0 - v));
    let filled = tape.mul(x_hat, inv)?;
    tape.add(observed, filled)
}

/// Generator input: observed cells of `x`, `fill_noise`-scaled Gaussian
/// noise in missing cells.
pub fn noisy_input<R: Rng + ?Sized>(x: &Tensor, m: &Tensor, fill_noise: f64, rng: &mut R) -> Tensor {
    let mut out = x.mul(m).expect("same shape");
    for (o, &mv) in out.data_mut().iter_mut().zip(m.data()) {
        if mv == 0.0 {
            let e: f64 = rng.sample(StandardNormal);
            *o = fill_noise * e;
        }
    }
    out
}

pub fn noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

/// Critic parameters and optimizer, trained against any generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adversary {
    pub critic: Critic,
    pub store: ParamStore,
    pub opt: Adam,
}

impl Adversary {
    pub fn new<R: Rng + ?Sized>(d: usize, cfg: &GainConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let critic = Critic::new(&mut store, d, cfg.critic_hidden, rng);
        let opt = Adam::new(&store, cfg.lr, cfg.beta1, cfg.beta2);
        Adversary { critic, store, opt }
    }

    /// Value and critic-parameter gradient of the training objective.
    pub fn objective_grad(&self, x_real: &Tensor, x_fake: &Tensor, m: &Tensor, u: &[f64], cfg: &GainConfig) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let f = |t: &mut Tape, x: Var, mv: Var| self.critic.forward(t, &p, x, mv);
        let terms = critic_terms(&mut tape, &f, x_real, x_fake, m, u)?;
        let w = match cfg.critic_sign {
            CriticSign::Standard => tape.sub(terms.fake, terms.real)?,
            CriticSign::AsWritten => tape.sub(terms.real, terms.fake)?,
        };
        let value = tape.scalar_value(w) + cfg.gp_weight * tape.scalar_value(terms.penalty);
        match cfg.penalty_grad {
            PenaltyGradMode::Nested => {
                let gp = tape.scale(terms.penalty, cfg.gp_weight);
                let total = tape.add(w, gp)?;
                Ok((value, tape.gradients(total, p.vars())?))
            }
            PenaltyGradMode::FiniteDifference => {
                let mut grads = tape.gradients(w, p.vars())?;
                let fd = self.penalty_grad_fd(x_real, x_fake, m, u, 1e-5)?;
                for (g, f) in grads.iter_mut().zip(fd) {
                    *g = g.add(&f.scale(cfg.gp_weight))?;
                }
                Ok((value, grads))
            }
        }
    }

    /// Central-difference gradient of the penalty term over every critic
    /// parameter.
    pub fn penalty_grad_fd(&self, x_real: &Tensor, x_fake: &Tensor, m: &Tensor, u: &[f64], h: f64) -> Result<Vec<Tensor>> {
        let mut probe = self.store.clone();
        let ids: Vec<ParamId> = probe.ids().collect();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let mut g = Tensor::zeros(probe.get(id).shape());
            for k in 0..g.len() {
                let orig = probe.get(id).data()[k];
                let eval = |v: f64, probe: &mut ParamStore| -> Result<f64> {
                    probe.get_mut(id).data_mut()[k] = v;
                    let mut tape = Tape::new();
                    let p = probe.bind_frozen(&mut tape);
                    let f = |t: &mut Tape, x: Var, mv: Var| self.critic.forward(t, &p, x, mv);
                    let terms = critic_terms(&mut tape, &f, x_real, x_fake, m, u)?;
                    Ok(tape.scalar_value(terms.penalty))
                };
                let up = eval(orig + h, &mut probe)?;
                let down = eval(orig - h, &mut probe)?;
                probe.get_mut(id).data_mut()[k] = orig;
                g.data_mut()[k] = (up - down) / (2.0 * h);
            }
            out.push(g);
        }
        Ok(out)
    }

    /// One optimizer step on the critic; returns the objective before it.
    pub fn step<R: Rng + ?Sized>(&mut self, x_real: &Tensor, x_fake: &Tensor, m: &Tensor, cfg: &GainConfig, rng: &mut R) -> Result<f64> {
        let u: Vec<f64> = (0..x_real.rows()).map(|_| rng.random::<f64>()).collect();
        let (value, grads) = self.objective_grad(x_real, x_fake, m, &u, cfg)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("critic loss is {value}")));
        }
        self.opt.step(&mut self.store, &grads, &[])?;
        Ok(value)
    }
}

/// Per-epoch means of the adversarial losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainEpoch {
    pub critic: f64,
    pub generator: f64,
}

/// Standalone generator with its critic and training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainModel {
    pub config: GainConfig,
    pub generator: Generator,
    pub store: ParamStore,
    pub opt: Adam,
    pub adversary: Adversary,
    pub history: Vec<GainEpoch>,
}

/// A minibatch drawn from the training rows.
pub(crate) struct Batch {
    pub x: Tensor,
    pub m: Tensor,
    /// Mask for the reconstruction term: 0 only where truth is known and
    /// hidden from the model.
    pub recon: Tensor,
}

impl Batch {
    /// Real sample for the critic: ground truth where known, `fake` in
    /// cells whose truth is unknown so they carry no signal.
    pub fn real(&self, fake: &Tensor) -> Tensor {
        let mut out = self.x.clone();
        for k in 0..out.len() {
            if self.m.data()[k] == 0.0 && self.recon.data()[k] == 1.0 {
                out.data_mut()[k] = fake.data()[k];
            }
        }
        out
    }
}

/// Row-index minibatches of one shuffled pass.
pub(crate) fn minibatches<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Gathers rows of the pristine data `x` (with `truth` marking cells that
/// hold real values) under the curriculum mask `m_cur`.
pub(crate) fn gather(x: &DataMatrix, truth: &MaskMatrix, m_cur: &MaskMatrix, rows: &[usize]) -> Batch {
    let d = x.n_cols();
    let b = rows.len();
    let mut xs = Vec::with_capacity(b * d);
    let mut ms = Vec::with_capacity(b * d);
    let mut rs = Vec::with_capacity(b * d);
    for &i in rows {
        for j in 0..d {
            let known = truth.observed(i, j);
            let shown = known && m_cur.observed(i, j);
            xs.push(if known { x.get(i, j) } else { 0.0 });
            ms.push(if shown { 1.0 } else { 0.0 });
            rs.push(if known && !shown { 0.0 } else { 1.0 });
        }
    }
    Batch {
        x: Tensor::from_vec(b, d, xs).expect("shape"),
        m: Tensor::from_vec(b, d, ms).expect("shape"),
        recon: Tensor::from_vec(b, d, rs).expect("shape"),
    }
}

impl GainModel {
    /// Freshly initialised generator and critic for `d` columns.
    pub fn new(d: usize, cfg: &GainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let generator = Generator::new(&mut store, "gen", d, cfg, &mut rng);
        let opt = Adam::new(&store, cfg.lr, cfg.beta1, cfg.beta2);
        let adversary = Adversary::new(d, cfg, &mut rng);
        Ok(GainModel {
            config: cfg.clone(),
            generator,
            store,
            opt,
            adversary,
            history: Vec::new(),
        })
    }

    pub fn n_cols(&self) -> usize {
        self.generator.d
    }

    /// Dense reconstruction of a batch, no gradients.
    pub fn reconstruct(&self, xt: &Tensor, m: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.generator.forward(&mut tape, &p, xt, m, z)?;
        Ok(tape.value(out).clone())
    }

    fn generator_step(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
        let cfg = &self.config;
        let b = batch.x.rows();
        let xt = noisy_input(&batch.x, &batch.m, cfg.fill_noise, rng);
        let z = noise(b, cfg.noise_dim, rng);
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let cp = self.adversary.store.bind_frozen(&mut tape);
        let x_hat = self.generator.forward(&mut tape, &p, &xt, &batch.m, &z)?;
        let critic = &self.adversary.critic;
        let f = |t: &mut Tape, x: Var, mv: Var| critic.forward(t, &cp, x, mv);
        let loss = generator_loss(&mut tape, &f, &batch.x, x_hat, &batch.m, Some(&batch.recon), cfg.recon_weight)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Numerical(format!("generator loss is {value}")));
        }
        let grads = tape.gradients(loss, p.vars())?;
        self.opt.step(&mut self.store, &grads, &[])?;
        Ok(value)
    }

    fn fake_batch(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let xt = noisy_input(&batch.x, &batch.m, self.config.fill_noise, rng);
        let z = noise(batch.x.rows(), self.config.noise_dim, rng);
        let x_hat = self.reconstruct(&xt, &batch.m, &z)?;
        let inv = batch.m.map(|v| 1.0 - v);
        batch.x.mul(&batch.m)?.add(&x_hat.mul(&inv)?)
    }

    /// One epoch: a curriculum mask over the pristine rows, then per
    /// minibatch `critic_steps` critic updates followed by one generator
    /// update.
    pub fn train_epoch(
        &mut self,
        x: &DataMatrix,
        truth: &MaskMatrix,
        masking: &MaskingSpec,
        curriculum: &CurriculumSchedule,
        epoch: usize,
        total: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GainEpoch> {
        let spec = masking.with_mechanism(curriculum.phase_for_epoch(epoch, total));
        let m_cur = generate_mask(&x.with_values(x.filled(0.0))?, &spec, rng)?;
        let (mut c_sum, mut g_sum) = (0.0, 0.0);
        let batches = minibatches(x.n_rows(), self.config.batch_size, rng);
        for rows in &batches {
            let batch = gather(x, truth, &m_cur, rows);
            // One fake batch per minibatch; critic steps differ only in the
            // interpolation draws.
            let fake = self.fake_batch(&batch, rng)?;
            let real = batch.real(&fake);
            let cfg = self.config.clone();
            let mut c = 0.0;
            for _ in 0..self.config.critic_steps {
                c = self.adversary.step(&real, &fake, &batch.m, &cfg, rng).map_err(|e| diverged(e, epoch, "critic"))?;
            }
            c_sum += c;
            g_sum += self.generator_step(&batch, rng).map_err(|e| diverged(e, epoch, "generator"))?;
        }
        let k = batches.len().max(1) as f64;
        Ok(GainEpoch {
            critic: c_sum / k,
            generator: g_sum / k,
        })
    }

    /// Imputes missing cells of `x` under `m`. With `stochastic` false the
    /// fill noise and `Z` are zero, making the output deterministic.
    pub fn impute(&self, x: &DataMatrix, m: &MaskMatrix, stochastic: bool, seed: u64) -> Result<ImputationResult> {
        let d = self.n_cols();
        if x.n_cols() != d || m.n_cols() != d || m.n_rows() != x.n_rows() {
            return Err(Error::contract(format!("generator expects {d} columns, got {}", x.n_cols())));
        }
        let n = x.n_rows();
        let bs = self.config.batch_size;
        let chunks = n.div_ceil(bs);
        let xf = x.filled(0.0);
        let mf = m.to_tensor();
        let parts = par::map_indexed(chunks, |c| -> Result<Vec<f64>> {
            let lo = c * bs;
            let hi = (lo + bs).min(n);
            let rows = hi - lo;
            let xb = Tensor::from_vec(rows, d, xf[lo * d..hi * d].to_vec())?;
            let mb = Tensor::from_vec(rows, d, mf.data()[lo * d..hi * d].to_vec())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let (xt, z) = if stochastic {
                (noisy_input(&xb, &mb, self.config.fill_noise, &mut rng), noise(rows, self.config.noise_dim, &mut rng))
            } else {
                (xb.mul(&mb)?, Tensor::zeros(&[rows, self.config.noise_dim]))
            };
            let x_hat = self.reconstruct(&xt, &mb, &z)?;
            let inv = mb.map(|v| 1.0 - v);
            Ok(xb.mul(&mb)?.add(&x_hat.mul(&inv)?)?.into_data())
        });
        let mut values = Vec::with_capacity(n * d);
        for part in parts {
            values.extend(part?);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("generator produced non-finite values".into()));
        }
        Ok(ImputationResult::from_fill(x.with_values(values)?, m, Provenance::Gain))
    }
}

fn diverged(e: Error, epoch: usize, which: &str) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("{which} diverged in epoch {epoch}: {msg}")),
        other => other,
    }
}

/// Trains a standalone generator on `x`, whose observed cells (per
/// `truth`) serve as ground truth under fresh curriculum masks each epoch.
pub fn gain_train(
    x: &DataMatrix,
    truth: &MaskMatrix,
    cfg: &GainConfig,
    masking: &MaskingSpec,
    curriculum: &CurriculumSchedule,
) -> Result<GainModel> {
    curriculum.validate()?;
    let mut model = GainModel::new(x.n_cols(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    for epoch in 0..cfg.epochs {
        let h = model.train_epoch(x, truth, masking, curriculum, epoch, cfg.epochs, &mut rng)?;
        model.history.push(h);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_keep_is_lower_triangular() {
        let k = causal_keep(1, 3);
        assert_eq!(k.data(), &[1., 0., 0., 1., 1., 0., 1., 1., 1.]);
    }

    #[test]
    fn noisy_input_keeps_observed() {
        let x = Tensor::from_rows(&[vec![1., 2.]]).unwrap();
        let m = Tensor::from_rows(&[vec![1., 0.]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xt = noisy_input(&x, &m, 0.01, &mut rng);
        assert_eq!(xt.get(0, 0), 1.0);
        assert!(xt.get(0, 1).abs() < 0.1);
    }

    #[test]
    fn zero_epochs_is_deterministic_init() {
        let cfg = GainConfig {
            epochs: 0,
            ..Default::default()
        };
        let x = DataMatrix::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let m = crate::data::compute_mask(&x);
        let a = gain_train(&x, &m, &cfg, &MaskingSpec::default(), &CurriculumSchedule::default()).unwrap();
        let b = GainModel::new(2, &cfg).unwrap();
        assert_eq!(a.store, b.store);
        assert!(a.history.is_empty());
    }
}
