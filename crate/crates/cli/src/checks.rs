//! Finite-difference gradient checks over every trained model.

use maskpolicy_core::mim::{LossConfig, MaskDecision, ModelConfig, Sample, TargetModel};
use maskpolicy_core::nn::{gradcheck, Dense, GradReport, GradcheckConfig, Param, Parameterized};
use maskpolicy_core::policy::{DecisionState, PolicyParams, Transition};
use maskpolicy_core::trainer::{FeatureSource, ProbeHead};
use maskpolicy_core::volume::{gen_phantom, PhantomConfig};
use maskpolicy_core::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
    pub report: GradReport,
}

fn result(name: &str, report: GradReport, tol: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        max_rel_err: report.max_rel_err(),
        passed: report.passes(tol),
        report,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Pretraining loss of a small target model on a phantom slab.
pub fn check_mim(tol: f64) -> Result<CheckResult> {
    let cfg = ModelConfig {
        embed_dim: 6,
        embed_init_std: 0.3,
        ..ModelConfig::default()
    };
    let (vol, _) = gen_phantom(5, [2, 16, 16], 2, 0.05, &PhantomConfig::default())?;
    let sample = Sample::from_volume(&vol, &cfg)?;
    let mut model = TargetModel::new(&sample.grid, &cfg, 3)?;
    let decision = MaskDecision::from_masked(sample.grid.num_patches(), &[0, 3]);
    let loss = LossConfig::default();
    let report = gradcheck(
        &mut model,
        |m| {
            m.accumulate_grad(&sample, &decision, &loss, 1.0)
                .map(|r| r.total)
                .unwrap_or(f64::NAN)
        },
        |m| m.loss(&sample, &decision, &loss).map(|r| r.total).unwrap_or(f64::NAN),
        GradcheckConfig::default(),
    );
    Ok(result("mim_loss", report, tol))
}

fn policy_fixture() -> (PolicyParams, Vec<Transition>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut p = PolicyParams::new(4, 5, 1);
    p.actor_out = Dense::new("actor.out", 5, 2, &mut rng);
    let buffer = (0..3)
        .map(|_| Transition {
            state: DecisionState::from_observations(random_matrix(&mut rng, 6, 4)),
            decision: MaskDecision((0..6).map(|_| rng.random::<bool>()).collect()),
            ret: rng.random_range(-1.0..1.0),
        })
        .collect();
    (p, buffer)
}

pub fn check_actor(tol: f64) -> CheckResult {
    let (mut p, buffer) = policy_fixture();
    let adv = [0.4, -0.9, 1.3];
    let report = gradcheck(
        &mut p,
        |p| p.accumulate_actor_grad(&buffer, &adv, 0.01),
        |p| p.actor_loss(&buffer, &adv, 0.01),
        GradcheckConfig::default(),
    );
    result("actor_loss", report, tol)
}

pub fn check_critic(tol: f64) -> CheckResult {
    let (mut p, buffer) = policy_fixture();
    let report = gradcheck(
        &mut p,
        |p| p.accumulate_critic_grad(&buffer),
        |p| p.critic_loss(&buffer),
        GradcheckConfig::default(),
    );
    result("critic_loss", report, tol)
}

/// The probe's trainable dense map; normalization is fixed and excluded.
struct ProbeDense(ProbeHead);

impl Parameterized for ProbeDense {
    fn params(&self) -> Vec<&Param> {
        self.0.dense.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.0.dense.params_mut()
    }
}

pub fn check_probe(tol: f64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut head = ProbeHead::empty(5, 12, FeatureSource::Encoder);
    head.dense = Dense::new("probe", 5, 12, &mut rng);
    let x = random_matrix(&mut rng, 7, 5);
    let y = Array2::from_shape_fn((7, 12), |_| rng.random::<f64>());
    let mut model = ProbeDense(head);
    let report = gradcheck(
        &mut model,
        |m| m.0.accumulate_mse_grad(&x, &y),
        |m| m.0.mse(&x, &y),
        GradcheckConfig::default(),
    );
    result("probe_mse", report, tol)
}

pub fn run_all(tol: f64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_mim(tol)?,
        check_actor(tol),
        check_critic(tol),
        check_probe(tol),
    ])
}
