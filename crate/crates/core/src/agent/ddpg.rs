use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Adam, Mlp, MlpGrads};
use super::replay::{ReplayBuffer, Transition};
use super::AgentError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    OrnsteinUhlenbeck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub noise: NoiseKind,
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Exploration calls over which sigma decays linearly to `sigma_end`.
    pub noise_decay_steps: usize,
    pub ou_theta: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            batch_size: 64,
            buffer_capacity: super::replay::DEFAULT_CAPACITY,
            noise: NoiseKind::Gaussian,
            sigma_start: 0.3,
            sigma_end: 0.02,
            noise_decay_steps: 3360,
            ou_theta: 0.15,
        }
    }
}

impl DdpgConfig {
    fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("step sizes must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("need 0 < batch_size <= buffer_capacity");
        }
        if self.sigma_start < 0.0 || self.sigma_end < 0.0 {
            return bad("noise scales must be nonnegative");
        }
        Ok(())
    }
}

/// Result of one agent update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
}

#[derive(Debug, Clone)]
pub struct DdpgAgent {
    config: DdpgConfig,
    actor: Mlp,
    critic: Mlp,
    actor_target: Mlp,
    critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
    explore_calls: usize,
    ou_state: f64,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: DdpgConfig,
    actor: Mlp,
    critic: Mlp,
    actor_target: Mlp,
    critic_target: Mlp,
    explore_calls: usize,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
}

fn states_matrix(batch: &[Transition], pick: impl Fn(&Transition) -> [f64; 2]) -> DMatrix<f64> {
    DMatrix::from_fn(2, batch.len(), |r, c| pick(&batch[c])[r])
}

fn critic_inputs(
    batch: &[Transition],
    pick: impl Fn(&Transition) -> [f64; 2],
    action: impl Fn(usize) -> f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(3, batch.len(), |r, c| if r < 2 { pick(&batch[c])[r] } else { action(c) })
}

impl DdpgAgent {
    /// Actor `2 -> hidden -> 1` (sigmoid), critic `3 -> hidden -> 1` (linear).
    pub fn new(config: DdpgConfig, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Mlp::random(&sizes(2, &config.actor_hidden, 1), Activation::Tanh, Activation::Sigmoid, &mut rng)?;
        let critic = Mlp::random(&sizes(3, &config.critic_hidden, 1), Activation::Tanh, Activation::Identity, &mut rng)?;
        Ok(Self::assemble(config, actor, critic, rng))
    }

    /// Agent with the given networks (targets are copies).
    pub fn from_networks(config: DdpgConfig, actor: Mlp, critic: Mlp, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        if actor.input_dim() != 2 || actor.output_dim() != 1 || critic.input_dim() != 3 || critic.output_dim() != 1 {
            return Err(AgentError::InvalidArchitecture("actor must be 2->1 and critic 3->1".into()));
        }
        Ok(Self::assemble(config, actor, critic, ChaCha8Rng::seed_from_u64(seed)))
    }

    fn assemble(config: DdpgConfig, actor: Mlp, critic: Mlp, rng: ChaCha8Rng) -> Self {
        DdpgAgent {
            actor_opt: Adam::new(config.actor_lr, actor.num_params()),
            critic_opt: Adam::new(config.critic_lr, critic.num_params()),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            config,
            rng,
            explore_calls: 0,
            ou_state: 0.0,
        }
    }

    pub fn config(&self) -> &DdpgConfig {
        &self.config
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn actor_target(&self) -> &Mlp {
        &self.actor_target
    }

    pub fn critic_target(&self) -> &Mlp {
        &self.critic_target
    }

    /// Current exploration scale.
    pub fn sigma(&self) -> f64 {
        let c = &self.config;
        if self.explore_calls >= c.noise_decay_steps {
            return c.sigma_end;
        }
        let f = self.explore_calls as f64 / c.noise_decay_steps as f64;
        c.sigma_start + (c.sigma_end - c.sigma_start) * f
    }

    fn policy(&self, state: &[f64; 2]) -> f64 {
        self.actor.forward(state).expect("actor input is 2-D")[0]
    }

    pub fn select_action(&mut self, state: &[f64; 2], explore: bool) -> f64 {
        let mu = self.policy(state);
        if !explore {
            return mu;
        }
        let sigma = self.sigma();
        self.explore_calls += 1;
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let noise = match self.config.noise {
            NoiseKind::Gaussian => sigma * z,
            NoiseKind::OrnsteinUhlenbeck => {
                self.ou_state += -self.config.ou_theta * self.ou_state + sigma * z;
                self.ou_state
            }
        };
        (mu + noise).clamp(0.0, 1.0)
    }

    fn td_targets(&self, batch: &[Transition]) -> Vec<f64> {
        let next = states_matrix(batch, |t| t.next_state);
        let a2 = self.actor_target.forward_batch(next).expect("2-D").output().clone();
        let critic_in = critic_inputs(batch, |t| t.next_state, |i| a2[(0, i)]);
        let q2 = self.critic_target.forward_batch(critic_in).expect("3-D");
        batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let cont = if t.done { 0.0 } else { 1.0 };
                t.reward + self.config.gamma * cont * q2.output()[(0, i)]
            })
            .collect()
    }

    /// Mean squared TD error of the critic on `batch` and its parameter gradient.
    pub fn critic_loss_grad(&self, batch: &[Transition]) -> (f64, MlpGrads) {
        let targets = self.td_targets(batch);
        let n = batch.len() as f64;
        let trace = self.critic.forward_batch(critic_inputs(batch, |t| t.state, |i| batch[i].action)).expect("3-D");
        let q = trace.output();
        let mut loss = 0.0;
        let mut gout = DMatrix::zeros(1, batch.len());
        for (i, y) in targets.iter().enumerate() {
            let err = q[(0, i)] - y;
            loss += err * err;
            gout[(0, i)] = 2.0 * err / n;
        }
        let (grads, _) = self.critic.backward_batch(&trace, &gout).expect("1-D");
        (loss / n, grads)
    }

    /// Mean `Q(s, mu(s))` over `batch` and its gradient with respect to the
    /// actor parameters.
    pub fn actor_objective_grad(&self, batch: &[Transition]) -> (f64, MlpGrads) {
        let n = batch.len() as f64;
        let at = self.actor.forward_batch(states_matrix(batch, |t| t.state)).expect("2-D");
        let actions = at.output();
        let ct = self.critic.forward_batch(critic_inputs(batch, |t| t.state, |i| actions[(0, i)])).expect("3-D");
        let objective = ct.output().sum() / n;
        let (_, dq_dinput) = self.critic.backward_batch(&ct, &DMatrix::from_element(1, batch.len(), 1.0 / n)).expect("1-D");
        let dq_da = dq_dinput.rows(2, 1).into_owned();
        let (grads, _) = self.actor.backward_batch(&at, &dq_da).expect("1-D");
        (objective, grads)
    }

    /// One DDPG update: critic regression onto the TD target, actor ascent on
    /// the critic, then soft target updates.
    pub fn train_step(&mut self, buffer: &mut ReplayBuffer) -> Result<UpdateStats, AgentError> {
        let batch = buffer.sample(self.config.batch_size)?;
        Ok(self.train_on_batch(&batch))
    }

    pub fn train_on_batch(&mut self, batch: &[Transition]) -> UpdateStats {
        let (critic_loss, cg) = self.critic_loss_grad(batch);
        let mut p = self.critic.params();
        self.critic_opt.step(&mut p, &cg.flatten());
        self.critic.set_params(&p).expect("same shape");

        let (actor_objective, ag) = self.actor_objective_grad(batch);
        let mut p = self.actor.params();
        let ascent: Vec<f64> = ag.flatten().iter().map(|g| -g).collect();
        self.actor_opt.step(&mut p, &ascent);
        self.actor.set_params(&p).expect("same shape");

        self.soft_update();
        UpdateStats { critic_loss, actor_objective }
    }

    pub fn soft_update(&mut self) {
        let tau = self.config.tau;
        self.actor_target.soft_update_from(&self.actor, tau);
        self.critic_target.soft_update_from(&self.critic, tau);
    }

    /// JSON dump of all networks and the config (replay buffer and optimizer
    /// moments excluded).
    pub fn checkpoint_json(&self) -> String {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            actor_target: self.actor_target.clone(),
            critic_target: self.critic_target.clone(),
            explore_calls: self.explore_calls,
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str, seed: u64) -> Result<Self, AgentError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(AgentError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let mut agent = Self::from_networks(ck.config, ck.actor, ck.critic, seed)?;
        agent.actor_target = ck.actor_target;
        agent.critic_target = ck.critic_target;
        agent.explore_calls = ck.explore_calls;
        Ok(agent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> DdpgConfig {
        DdpgConfig { actor_hidden: vec![4, 4], critic_hidden: vec![4, 4], batch_size: 8, ..Default::default() }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|_| Transition {
                state: [rng.random_range(0.0..1.0), rng.random_range(0.0..2.0)],
                action: rng.random_range(0.0..1.0),
                reward: rng.random_range(-2.0..0.0),
                next_state: [rng.random_range(0.0..1.0), rng.random_range(0.0..2.0)],
                done: rng.random_bool(0.2),
            })
            .collect()
    }

    #[test]
    fn targets_start_equal_to_mains() {
        let a = DdpgAgent::new(DdpgConfig::default(), 1).unwrap();
        assert_eq!(a.actor(), a.actor_target());
        assert_eq!(a.critic(), a.critic_target());
        assert_eq!(a.actor().sizes(), vec![2, 64, 64, 1]);
        assert_eq!(a.critic().sizes(), vec![3, 64, 64, 1]);
    }

    #[test]
    fn zero_actor_outputs_half() {
        let actor = Mlp::zeros(&[2, 64, 64, 1], Activation::Tanh, Activation::Sigmoid).unwrap();
        let critic = Mlp::zeros(&[3, 64, 64, 1], Activation::Tanh, Activation::Identity).unwrap();
        let mut a = DdpgAgent::from_networks(DdpgConfig::default(), actor, critic, 0).unwrap();
        assert_eq!(a.select_action(&[0.3, 0.7], false), 0.5);
        assert_eq!(a.select_action(&[0.3, 0.7], false).to_bits(), a.select_action(&[0.3, 0.7], false).to_bits());
    }

    #[test]
    fn exploration_is_seeded_and_clamped() {
        let run = |seed| {
            let mut a = DdpgAgent::new(DdpgConfig::default(), seed).unwrap();
            (0..100).map(|i| a.select_action(&[i as f64 / 100.0, 0.5], true)).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
        assert!(run(5).iter().all(|a| (0.0..=1.0).contains(a)));
        let mut ou = DdpgAgent::new(DdpgConfig { noise: NoiseKind::OrnsteinUhlenbeck, ..Default::default() }, 1).unwrap();
        assert!((0..50).all(|_| (0.0..=1.0).contains(&ou.select_action(&[0.0, 0.0], true))));
    }

    #[test]
    fn sigma_decays_linearly() {
        let mut a = DdpgAgent::new(DdpgConfig { noise_decay_steps: 10, ..Default::default() }, 0).unwrap();
        assert_eq!(a.sigma(), 0.3);
        for _ in 0..5 {
            a.select_action(&[0.0, 0.0], true);
        }
        assert!((a.sigma() - 0.16).abs() < 1e-12);
        for _ in 0..20 {
            a.select_action(&[0.0, 0.0], true);
        }
        assert_eq!(a.sigma(), 0.02);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let mut agent = DdpgAgent::new(small_config(), seed).unwrap();
            // Decouple the targets from the mains so the TD target is fixed.
            let mut p = agent.critic.params();
            for v in p.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            agent.critic.set_params(&p).unwrap();
            let batch = random_batch(&mut rng, 8);
            let (_, g) = agent.critic_loss_grad(&batch);
            let g = g.flatten();
            let h = 1e-6;
            for i in 0..p.len() {
                let mut q = p.clone();
                q[i] += h;
                agent.critic.set_params(&q).unwrap();
                let lp = agent.critic_loss_grad(&batch).0;
                q[i] -= 2.0 * h;
                agent.critic.set_params(&q).unwrap();
                let lm = agent.critic_loss_grad(&batch).0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-5), "param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = DdpgAgent::new(small_config(), 9).unwrap();
        let mut cp = agent.critic.params();
        for v in cp.iter_mut() {
            *v *= 20.0;
        }
        agent.critic.set_params(&cp).unwrap();
        let mut p = agent.actor.params();
        for v in p.iter_mut() {
            *v *= 20.0;
        }
        agent.actor.set_params(&p).unwrap();
        let batch = random_batch(&mut rng, 8);
        let (_, g) = agent.actor_objective_grad(&batch);
        let g = g.flatten();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += h;
            agent.actor.set_params(&q).unwrap();
            let jp = agent.actor_objective_grad(&batch).0;
            q[i] -= 2.0 * h;
            agent.actor.set_params(&q).unwrap();
            let jm = agent.actor_objective_grad(&batch).0;
            let fd = (jp - jm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-5), "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn tau_one_copies_mains() {
        let mut agent = DdpgAgent::new(DdpgConfig { tau: 1.0, ..small_config() }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        agent.train_on_batch(&random_batch(&mut rng, 8));
        assert_eq!(agent.actor(), agent.actor_target());
        assert_eq!(agent.critic(), agent.critic_target());
    }

    #[test]
    fn soft_update_contracts_towards_frozen_main() {
        let mut agent = DdpgAgent::new(DdpgConfig { tau: 0.1, ..small_config() }, 2).unwrap();
        let mut p = agent.actor.params();
        p.iter_mut().for_each(|v| *v += 1.0);
        agent.actor.set_params(&p).unwrap();
        let dist = |a: &DdpgAgent| {
            a.actor.params().iter().zip(a.actor_target.params()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let mut prev = dist(&agent);
        for _ in 0..10 {
            agent.soft_update();
            let d = dist(&agent);
            assert!(d <= 0.9 * prev + 1e-12);
            prev = d;
        }
    }

    #[test]
    fn critic_learns_constant_reward_with_zero_discount() {
        let mut agent = DdpgAgent::new(DdpgConfig { gamma: 0.0, ..Default::default() }, 4).unwrap();
        let mut buf = ReplayBuffer::new(5000, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in random_batch(&mut rng, 500) {
            buf.store(Transition { reward: -0.7, ..t });
        }
        for _ in 0..500 {
            agent.train_step(&mut buf).unwrap();
        }
        let q = agent.critic().forward(&[0.5, 1.0, 0.5]).unwrap()[0];
        assert!((q + 0.7).abs() < 1e-2, "Q = {q}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut agent = DdpgAgent::new(DdpgConfig::default(), 8).unwrap();
        let mut buf = ReplayBuffer::new(100, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in random_batch(&mut rng, 80) {
            buf.store(t);
        }
        agent.train_step(&mut buf).unwrap();
        let json = agent.checkpoint_json();
        let mut loaded = DdpgAgent::from_checkpoint_json(&json, 0).unwrap();
        for i in 0..50 {
            let s = [i as f64 / 50.0, 0.37 * i as f64];
            assert_eq!(agent.select_action(&s, false).to_bits(), loaded.select_action(&s, false).to_bits());
        }
        assert!(DdpgAgent::from_checkpoint_json(&json.replace("\"version\":1", "\"version\":9"), 0).is_err());
    }
}
