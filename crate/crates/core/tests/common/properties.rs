//! Invariant checks shared by the test suite and the acceptance runner.
//!
//! Each check returns `Err` with a short explanation instead of panicking, so
//! the acceptance runner can report every failure in one pass.

use ndarray::{array, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rain::batch::Case;
use rain::generator::{minibatch_loss, predict_batch, FixedGraphs, GeneratorConfig, PredictOptions, PredictionMode};
use rain::gmp::{reconstruction_loss, GmpConfig, DECODER_PREFIX};
use rain::learners::{grad_check, load_checkpoint, save_checkpoint, GradProbe, Graph, ParamSet};
use rain::rl::{
    apply_action, improvement_reward, init_q_network, rollout_batch, td_loss, total_reward, Action, DdqnAgent,
    EdgeObservation, EdgeOrigin, ReplayBuffer, RewardSpec, RlConfig, RolloutEnv, Transition,
};
use rain::sim::{integrate, ParticleConfig};
use rain::RelationGraph;

pub type Check = fn() -> Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Nudges every parameter so no unit sits exactly on a ReLU kink at init.
fn jitter(p: &mut ParamSet<f64>, rng: &mut impl Rng) {
    for (_, t) in p.iter_mut() {
        t.mapv_inplace(|x| x + rng.gen_range(-0.1..0.1));
    }
}

fn random_case(n: usize, t: usize, rng: &mut impl Rng) -> Case {
    Case {
        states: Array3::from_shape_fn((n, t, 4), |_| rng.gen_range(-1.0f32..1.0)),
        truth: RelationGraph::from_fn(n, |i, j| (i + j) % 2 == 1),
    }
}

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        n_heads: 2,
        hidden: 6,
        burn_in: 3,
        horizon: 4,
        tau: 4,
        k_samples: 2,
        ..GeneratorConfig::default()
    }
}

const GRAD_TOL: f64 = 1e-4;

fn grad_ok(what: &str, err: f64) -> Result<(), String> {
    ensure(err < GRAD_TOL, || format!("{what}: relative gradient error {err:.3e}"))
}

// Reward arithmetic.

pub fn reward_examples() -> Result<(), String> {
    let spec = RewardSpec::default();
    let a = total_reward(&spec, -0.5, 1.0, false, false).map_err(|e| e.to_string())?;
    let b = total_reward(&spec, -0.5, 1.0, true, false).map_err(|e| e.to_string())?;
    ensure((a + 0.49).abs() < 1e-12, || format!("improving step gave {a}, expected -0.49"))?;
    ensure((b + 0.48).abs() < 1e-12, || format!("stimulated step gave {b}, expected -0.48"))
}

pub fn improvement_reward_is_a_sign() -> Result<(), String> {
    let mut r = rng(10);
    let mut prev: f64 = -1.0;
    for k in 0..10_000 {
        // Ties happen often enough on a coarse grid to exercise the zero case.
        let now = if k % 7 == 0 { prev } else { (r.gen_range(-50.0f64..0.0) * 4.0).round() / 4.0 };
        let v = improvement_reward(now, prev);
        ensure(v == -1.0 || v == 0.0 || v == 1.0, || format!("improvement reward {v} at {k}"))?;
        let expect = if now > prev {
            1.0
        } else if now < prev {
            -1.0
        } else {
            0.0
        };
        ensure(v == expect, || format!("sign mismatch at {k}: {now} vs {prev} gave {v}"))?;
        prev = now;
    }
    Ok(())
}

// Exact or tolerance-bound invariants.

pub fn masked_softmax_normalizes() -> Result<(), String> {
    let (group, heads, cases) = (5, 3, 4);
    let mut r = rng(11);
    let rows = group * cases;
    let scores = rand_rows(rows, heads * group, &mut r).mapv(|x| 20.0 * x);
    let mask: Vec<bool> = (0..rows * group).map(|k| (k % group) != (k / group) % group && r.gen_bool(0.6)).collect();
    let mut g = Graph::<f64>::new();
    let s = g.constant(scores);
    let w = g.masked_softmax(s, &mask, group, heads);
    let w = g.value(w);
    for row in 0..rows {
        let allowed = &mask[row * group..(row + 1) * group];
        let any = allowed.iter().any(|&m| m);
        for h in 0..heads {
            let mut sum = 0.0;
            for j in 0..group {
                let v = w[[row, h * group + j]];
                ensure(allowed[j] || v == 0.0, || format!("masked weight {v} at row {row} head {h} col {j}"))?;
                ensure(v >= 0.0, || format!("negative weight {v}"))?;
                sum += v;
            }
            let expect = if any { 1.0 } else { 0.0 };
            ensure((sum - expect).abs() <= 1e-6, || format!("row {row} head {h} sums to {sum}"))?;
        }
    }
    Ok(())
}

pub fn flip_is_an_involution() -> Result<(), String> {
    for s in [false, true] {
        ensure(apply_action(apply_action(s, Action::Flip), Action::Flip) == s, || format!("flip twice moved {s}"))?;
        ensure(apply_action(s, Action::Flip) != s, || format!("flip kept {s}"))?;
        ensure(apply_action(s, Action::Stay) == s, || format!("stay moved {s}"))?;
    }
    Ok(())
}

pub fn static_equals_dynamic_at_full_window() -> Result<(), String> {
    let cfg = small_generator();
    let params: ParamSet<f32> = cfg.init(&mut rng(12)).map_err(|e| e.to_string())?;
    let mut r = rng(13);
    let cases: Vec<Case> = (0..3).map(|_| random_case(4, 3, &mut r)).collect();
    let histories: Vec<Array3<f32>> = cases.iter().map(|c| c.states.clone()).collect();
    let mut graphs = FixedGraphs(cases.iter().map(|c| c.truth.clone()).collect());
    let run = |mode, graphs: &mut FixedGraphs| {
        let opts = PredictOptions::<ChaCha8Rng> {
            mode,
            noise: None,
            record_weights: true,
        };
        predict_batch(&cfg, &params, &histories, graphs, opts)
    };
    let a = run(PredictionMode::Static, &mut graphs);
    let b = run(PredictionMode::Dynamic { tau: cfg.horizon }, &mut graphs);
    for (k, (x, y)) in a.futures.iter().zip(&b.futures).enumerate() {
        let diff: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs() as f64).sum();
        ensure(diff == 0.0, || format!("case {k}: static and dynamic differ by {diff}"))?;
    }
    ensure(a.weights == b.weights, || "soft weights differ".into())
}

pub fn uncharged_particles_move_straight() -> Result<(), String> {
    let config = ParticleConfig::default();
    let pos = array![[0.2, -0.1], [1.0, 1.0], [-1.0, 0.5], [0.3, 0.7]];
    let vel = array![[1.0, 0.0], [0.0, 0.3], [0.2, -0.4], [-0.6, 0.25]];
    let charges = [0.0, 1.0, -1.0, 0.0];
    let states = integrate(&config, pos.view(), vel.view(), &charges).map_err(|b| format!("blow-up at {}", b.frame))?;
    let frame_dt = config.dt_sim * config.subsample_stride as f64;
    for i in [0, 3] {
        for t in 0..config.total_steps {
            let time = t as f64 * frame_dt;
            for d in 0..2 {
                let expect = pos[[i, d]] + vel[[i, d]] * time;
                let got = states[[i, t, d]];
                ensure((got - expect).abs() <= 1e-9, || {
                    format!("particle {i} frame {t} axis {d}: {got} vs {expect}")
                })?;
                ensure(states[[i, t, 2 + d]] == vel[[i, d]], || format!("particle {i} velocity changed at {t}"))?;
            }
        }
    }
    Ok(())
}

pub fn checkpoint_round_trips() -> Result<(), String> {
    let cfg = small_generator();
    let params: ParamSet<f32> = cfg.init(&mut rng(14)).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("gen.rnck");
    save_checkpoint(&params, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(back == params, || "reloaded parameters differ".into())?;
    let again = dir.path().join("again.rnck");
    save_checkpoint(&back, &again).map_err(|e| e.to_string())?;
    let bytes = |p: &std::path::Path| std::fs::read(p).map_err(|e| e.to_string());
    ensure(bytes(&path)? == bytes(&again)?, || "re-saved checkpoint bytes differ".into())
}

fn tagged(k: usize) -> Transition {
    let obs = EdgeObservation {
        v_i: vec![k as f32],
        v_j: vec![0.0],
        s_ij: true,
    };
    Transition {
        next_obs: obs.with_status(false),
        obs,
        action: Action::Flip,
        reward: k as f64,
        done: false,
        episode: k as u64,
        origin: EdgeOrigin::default(),
    }
}

pub fn replay_is_fifo() -> Result<(), String> {
    let mut buf = ReplayBuffer::new(5);
    for k in 0..12 {
        buf.push(tagged(k));
        let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let expect: Vec<f64> = (k.saturating_sub(4)..=k).map(|v| v as f64).collect();
        ensure(kept == expect, || format!("after push {k}: {kept:?}"))?;
    }
    ensure(buf.len() == buf.capacity(), || "buffer not full".into())
}

pub fn zero_td_error_is_a_fixpoint() -> Result<(), String> {
    // A zero Q-network with zero rewards and terminal or zero-valued successors has nothing to learn.
    let cfg = RlConfig {
        q_layers: 1,
        q_hidden: 1,
        ..RlConfig::default()
    };
    let mut p = ParamSet::new();
    p.insert("q.0.w", Array2::zeros((3, 2))).map_err(|e| e.to_string())?;
    p.insert("q.0.b", Array2::zeros((1, 2))).map_err(|e| e.to_string())?;
    let mut agent = DdqnAgent::new(&cfg, 1, p.clone());
    let mut a = tagged(0);
    a.reward = 0.0;
    a.done = true;
    let mut b = tagged(1);
    b.reward = 0.0;
    b.action = Action::Stay;
    let loss = agent.update(&[&a, &b]).map_err(|e| e.to_string())?;
    ensure(loss == 0.0, || format!("loss {loss}"))?;
    ensure(agent.online == p, || "parameters moved".into())
}

// Gradient checks, all in f64 against central differences.

pub fn gmp_loss_gradient() -> Result<(), String> {
    let cfg = GmpConfig {
        history_steps: 3,
        hidden: 5,
        layers: 3,
    };
    let mut r = rng(15);
    let mut p: ParamSet<f64> = cfg.init(&mut r).map_err(|e| e.to_string())?;
    p.extend_from(&cfg.init_decoder(&mut r).map_err(|e| e.to_string())?, DECODER_PREFIX)
        .map_err(|e| e.to_string())?;
    jitter(&mut p, &mut r);
    let x = rand_rows(6, 12, &mut r);
    let err = grad_check(|g, p| reconstruction_loss(&cfg, g, p, x.clone(), 3), &p, &GradProbe::default());
    grad_ok("encoder reconstruction loss", err)
}

pub fn generator_loss_gradient() -> Result<(), String> {
    let cfg = small_generator();
    let mut r = rng(16);
    let mut p: ParamSet<f64> = cfg.init(&mut r).map_err(|e| e.to_string())?;
    jitter(&mut p, &mut r);
    let cases = [random_case(3, 7, &mut r), random_case(3, 7, &mut r)];
    let refs: Vec<&Case> = cases.iter().collect();
    let graphs: Vec<&RelationGraph> = cases.iter().map(|c| &c.truth).collect();
    let err = grad_check(|g, p| minibatch_loss(&cfg, g, p, &refs, &graphs), &p, &GradProbe::default());
    grad_ok("generator sequence loss", err)
}

pub fn attention_scorer_gradient() -> Result<(), String> {
    let cfg = small_generator();
    let mut r = rng(17);
    let mut p: ParamSet<f64> = cfg.init(&mut r).map_err(|e| e.to_string())?;
    jitter(&mut p, &mut r);
    let p = p.filtered("gen.att.");
    let (vs, vn, target) = (rand_rows(8, 6, &mut r), rand_rows(8, 6, &mut r), rand_rows(8, 6, &mut r));
    let mask: Vec<bool> = (0..8 * 4).map(|k| (k % 4) != (k / 4) % 4 && k % 3 != 0).collect();
    let err = grad_check(
        |g, p| {
            let ws = g.param(p, "gen.att.ws");
            let wn = g.param(p, "gen.att.wn");
            let b = g.param(p, "gen.att.b");
            let w = g.param(p, "gen.att.w");
            let a = g.constant(vs.clone());
            let c = g.constant(vn.clone());
            let sp = g.matmul(a, ws);
            let sp = g.add_row(sp, b);
            let sq = g.matmul(c, wn);
            let sc = g.pair_scores(sp, sq, w, 4, 2);
            let al = g.masked_softmax(sc, &mask, 4, 2);
            let agg = g.attend(al, c, 4, 2);
            let t = g.constant(target.clone());
            let d = g.sub(agg, t);
            g.sum_squares(d)
        },
        &p,
        &GradProbe::default(),
    );
    grad_ok("attention scorer", err)
}

pub fn q_network_loss_gradient() -> Result<(), String> {
    let cfg = RlConfig {
        q_hidden: 6,
        ..RlConfig::default()
    };
    let spec = cfg.q_spec(3);
    let mut r = rng(18);
    let mut p: ParamSet<f64> = ParamSet::new();
    spec.init(&mut p, "q", &mut r).map_err(|e| e.to_string())?;
    jitter(&mut p, &mut r);
    let x = rand_rows(5, 7, &mut r);
    let actions = [Action::Stay, Action::Flip, Action::Flip, Action::Stay, Action::Flip];
    let targets = [0.3, -0.2, 1.0, 0.0, -0.7];
    let err = grad_check(|g, p| td_loss(&spec, g, p, x.clone(), &actions, &targets), &p, &GradProbe::default());
    grad_ok("Q-network TD loss", err)
}

/// The full property suite, by name.
pub const PROPERTIES: &[(&str, Check)] = &[
    ("masked softmax normalizes", masked_softmax_normalizes),
    ("flip is an involution", flip_is_an_involution),
    ("static equals dynamic at tau = horizon", static_equals_dynamic_at_full_window),
    ("uncharged particles move straight", uncharged_particles_move_straight),
    ("checkpoint round trip", checkpoint_round_trips),
    ("replay buffer is FIFO", replay_is_fifo),
    ("zero TD error is a fixpoint", zero_td_error_is_a_fixpoint),
    ("encoder loss gradient", gmp_loss_gradient),
    ("generator loss gradient", generator_loss_gradient),
    ("attention scorer gradient", attention_scorer_gradient),
    ("Q-network loss gradient", q_network_loss_gradient),
];

// Rollout accounting.

/// Transition count of one rollout over a six-agent case with ten RL steps.
pub fn rollout_transition_count() -> Result<usize, String> {
    let gen = GeneratorConfig {
        n_heads: 2,
        hidden: 8,
        burn_in: 4,
        horizon: 4,
        tau: 4,
        ..GeneratorConfig::default()
    };
    let rl = RlConfig {
        t_rl: 10,
        q_hidden: 8,
        ..RlConfig::default()
    };
    let mut r = rng(19);
    let gp: ParamSet<f32> = gen.init(&mut r).map_err(|e| e.to_string())?;
    let case = random_case(6, 8, &mut r);
    let features = Array2::from_shape_fn((6, 5), |_| r.gen_range(-1.0f32..1.0));
    let q = init_q_network(&rl, 5, &mut r).map_err(|e| e.to_string())?;
    let env = RolloutEnv {
        generator: &gen,
        generator_params: &gp,
        cases: vec![&case],
        case_ids: vec![0],
        features: vec![features],
        batch: 1,
    };
    let out = rollout_batch(&env, &rl, &q, 0.5, 0, &mut r).map_err(|e| e.to_string())?;
    let ro = out.into_iter().next().ok_or("no rollout")?.map_err(|e| e.to_string())?;
    ensure(ro.rewards.len() == 10, || format!("{} reward steps", ro.rewards.len()))?;
    Ok(ro.transitions.len())
}
