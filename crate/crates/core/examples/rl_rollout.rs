//! The edge-wise hard-attention environment: rewards, one rollout, and DDQN
//! updates from a replay buffer.
//!
//! Run with `cargo run --release --example rl_rollout`.

use ndarray::Array2;
use rain::batch::Case;
use rain::generator::GeneratorConfig;
use rain::rl::{
    improvement_reward, infer_graph, init_q_network, rollout_batch, total_reward, DdqnAgent, ReplayBuffer, ReplayMode,
    RewardSpec, RlConfig, RolloutEnv,
};
use rain::rng::{substream, Stream};
use rain::sim::{simulate, ParticleConfig, Standardizer};

fn main() -> rain::Result<()> {
    let spec = RewardSpec::default();
    let r_imp = improvement_reward(-0.5, -0.6);
    println!("r_reg=-0.5 improving: total {:.2}", total_reward(&spec, -0.5, r_imp, false, false)?);
    println!("same step with stimulation: {:.2}", total_reward(&spec, -0.5, r_imp, true, false)?);

    let particles = ParticleConfig { total_steps: 12, history_steps: 6, future_steps: 6, seed: 5, ..ParticleConfig::default() };
    let case = Case::from_sample(&simulate(&particles)?.sample, &Standardizer::identity());
    let gen = GeneratorConfig { hidden: 16, n_heads: 2, burn_in: 6, horizon: 6, tau: 6, ..GeneratorConfig::default() };
    let gen_params = gen.init(&mut substream(1, Stream::Init))?;

    // Any per-agent features work; the pipeline uses the frozen encoder's output.
    let features = Array2::from_shape_fn((case.n_agents(), 4), |(i, k)| case.states[[i, 5, k]]);
    let cfg = RlConfig { q_hidden: 32, ..RlConfig::default() };
    let q = init_q_network(&cfg, features.ncols(), &mut substream(2, Stream::Init))?;
    let env = RolloutEnv {
        generator: &gen,
        generator_params: &gen_params,
        cases: vec![&case],
        case_ids: vec![0],
        features: vec![features.clone()],
        batch: 1,
    };
    let mut rng = substream(3, Stream::Exploration);
    let ro = rollout_batch(&env, &cfg, &q, 1.0, 0, &mut rng)?.remove(0)?;
    println!(
        "\none rollout: {} RL steps, {} transitions, baseline reward {:.3}, {} edges kept",
        ro.rewards.len(),
        ro.transitions.len(),
        ro.baseline,
        ro.final_graph.num_edges()
    );

    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    buffer.extend(ro.transitions);
    let mut agent = DdqnAgent::new(&cfg, features.ncols(), q);
    let mut replay_rng = substream(4, Stream::Replay);
    for k in 0..5 {
        let loss = agent.update_from(&buffer, ReplayMode::Transitions, &mut replay_rng)?;
        println!("DDQN update {k}: loss {loss:.4?}");
    }
    println!("greedy graph after training:\n{:?}", infer_graph(&cfg, &agent.online, &features)?);
    Ok(())
}
