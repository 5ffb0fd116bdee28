//! Small models and replayable batches for finite-difference checks.

use dualimpute::gain::{generator_loss, Adversary, GainConfig, Generator};
use dualimpute::numerics::{ParamStore, Tape, Tensor, Var};
use dualimpute::training::{objective, Mixing, Model, StepContext, StepInputs, TrainConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fd_params, ids_with_prefix, max_rel_err, uniform};

pub const D: usize = 3;
pub const BATCH: usize = 4;
pub const H: f64 = 1e-5;
/// Entries where both gradients are smaller than this are not compared.
pub const FLOOR: f64 = 1e-6;
pub const GROUPS: [&str; 6] = ["gen.", "embedder.", "gate.", "fusion.", "head.", "loss."];

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        embed_dim: 4,
        key_dim: 3,
        value_dim: 3,
        head_width: 4,
        gain: GainConfig {
            noise_dim: 2,
            embed_dim: 3,
            hidden: 5,
            critic_hidden: 5,
            ..GainConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Mask with roughly a third of the cells hidden and at least one hidden
/// and one visible cell per batch.
pub fn random_mask(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data: Vec<f64> = (0..rows * cols).map(|_| if rng.random::<f64>() < 0.35 { 0.0 } else { 1.0 }).collect();
    data[0] = 0.0;
    data[1] = 1.0;
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub struct JointCase {
    pub model: Model,
    pub adversary: Adversary,
    pub inputs: StepInputs,
    pub ctx: StepContext,
}

pub fn joint_case(seed: u64, variant: Variant) -> JointCase {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(D, &cfg, &mut rng);
    let adversary = Adversary::new(D, &cfg.gain, &mut rng);
    // Move the loss scales and fusion weights off their initial values.
    for id in model.scales.into_iter().chain([model.head.wt]) {
        let shape = model.store.get(id).shape().to_vec();
        let v = (0..shape.iter().product()).map(|_| rng.random::<f64>() - 0.5).collect();
        model.store.set(id, Tensor::new(shape, v).unwrap()).unwrap();
    }
    let x = uniform(BATCH, D, -1.5, 1.5, seed ^ 0xA5);
    let m = random_mask(BATCH, D, &mut rng);
    let x_mice = uniform(BATCH, D, -1.0, 1.0, seed ^ 0x5A);
    let y = (0..BATCH).map(|i| (i % 2) as f64).collect();
    let inputs = StepInputs::draw(x, m.clone(), m, x_mice, Some(y), &cfg, true, &mut rng);
    let ctx = StepContext {
        t_norm: 0.4,
        variant,
        mixing: Mixing::Learned,
        confidence: Some((0.3, 0.6)),
        recon_weight: 10.0,
    };
    JointCase {
        model,
        adversary,
        inputs,
        ctx,
    }
}

fn joint_value(case: &JointCase, store: &ParamStore) -> f64 {
    let model = Model {
        store: store.clone(),
        ..case.model.clone()
    };
    let mut tape = Tape::new();
    let p = model.store.bind_frozen(&mut tape);
    let (root, _) = objective(&model, &case.adversary, &mut tape, &p, &case.inputs, &case.ctx).unwrap();
    tape.scalar_value(root)
}

/// Worst relative error per parameter group of the joint objective.
pub fn joint_errors(case: &JointCase) -> Vec<(&'static str, f64)> {
    let mut tape = Tape::new();
    let p = case.model.store.bind(&mut tape);
    let (root, _) = objective(&case.model, &case.adversary, &mut tape, &p, &case.inputs, &case.ctx).unwrap();
    let analytic = tape.gradients(root, p.vars()).unwrap();
    GROUPS
        .iter()
        .map(|&prefix| {
            let ids = ids_with_prefix(&case.model.store, prefix);
            assert!(!ids.is_empty(), "no parameters under {prefix}");
            let numeric = fd_params(&case.model.store, &ids, H, |s| joint_value(case, s));
            let err = ids
                .iter()
                .zip(&numeric)
                .map(|(id, n)| max_rel_err(&analytic[id.0], n, FLOOR))
                .fold(0.0, f64::max);
            (prefix, err)
        })
        .collect()
}

pub struct CriticCase {
    pub adversary: Adversary,
    pub cfg: GainConfig,
    pub real: Tensor,
    pub fake: Tensor,
    pub m: Tensor,
    pub u: Vec<f64>,
}

pub fn critic_case(seed: u64) -> CriticCase {
    let cfg = tiny_config().gain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adversary = Adversary::new(D, &cfg, &mut rng);
    let m = random_mask(BATCH, D, &mut rng);
    let u = (0..BATCH).map(|_| rng.random::<f64>()).collect();
    CriticCase {
        adversary,
        cfg,
        real: uniform(BATCH, D, -1.5, 1.5, seed ^ 1),
        fake: uniform(BATCH, D, -1.5, 1.5, seed ^ 2),
        m,
        u,
    }
}

/// Analytic critic gradient (penalty differentiated through the recorded
/// input gradient) against central differences of the objective value.
pub fn critic_error(case: &CriticCase) -> f64 {
    let (_, analytic) = case.adversary.objective_grad(&case.real, &case.fake, &case.m, &case.u, &case.cfg).unwrap();
    let ids: Vec<_> = case.adversary.store.ids().collect();
    let numeric = fd_params(&case.adversary.store, &ids, H, |s| {
        let adv = Adversary {
            store: s.clone(),
            ..case.adversary.clone()
        };
        adv.objective_grad(&case.real, &case.fake, &case.m, &case.u, &case.cfg).unwrap().0
    });
    analytic.iter().zip(&numeric).map(|(a, n)| max_rel_err(a, n, FLOOR)).fold(0.0, f64::max)
}

/// Standalone generator loss (adversarial plus reconstruction) against
/// central differences over the generator parameters.
pub fn generator_error(seed: u64) -> f64 {
    let cfg = tiny_config().gain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let generator = Generator::new(&mut store, "gen", D, &cfg, &mut rng);
    let adversary = Adversary::new(D, &cfg, &mut rng);
    let x = uniform(BATCH, D, -1.5, 1.5, seed ^ 3);
    let m = random_mask(BATCH, D, &mut rng);
    let xt = x.mul(&m).unwrap();
    let z = uniform(BATCH, cfg.noise_dim, -1.0, 1.0, seed ^ 4);
    let loss = |tape: &mut Tape, store: &ParamStore, trainable: bool| -> (Var, Vec<Var>) {
        let p = if trainable { store.bind(tape) } else { store.bind_frozen(tape) };
        let cp = adversary.store.bind_frozen(tape);
        let f = |t: &mut Tape, xv: Var, mv: Var| adversary.critic.forward(t, &cp, xv, mv);
        let x_hat = generator.forward(tape, &p, &xt, &m, &z).unwrap();
        let root = generator_loss(tape, &f, &x, x_hat, &m, None, cfg.recon_weight).unwrap();
        (root, p.vars().to_vec())
    };
    let mut tape = Tape::new();
    let (root, vars) = loss(&mut tape, &store, true);
    let analytic = tape.gradients(root, &vars).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let numeric = fd_params(&store, &ids, H, |s| {
        let mut t = Tape::new();
        let (r, _) = loss(&mut t, s, false);
        t.scalar_value(r)
    });
    analytic.iter().zip(&numeric).map(|(a, n)| max_rel_err(a, n, FLOOR)).fold(0.0, f64::max)
}
