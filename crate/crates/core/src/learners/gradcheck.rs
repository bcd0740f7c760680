use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Graph, Var};

/// Which parameter entries a gradient check perturbs.
#[derive(Debug, Clone, Copy)]
pub struct GradProbe {
    /// Entries checked per tensor; tensors smaller than this are checked fully.
    pub per_tensor: usize,
    pub step: f64,
    /// Denominator floor so near-zero gradients compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradProbe {
    fn default() -> Self {
        GradProbe {
            per_tensor: 12,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Largest relative error between taped gradients of `f` and central differences.
pub fn grad_check<B>(f: B, params: &ParamSet<f64>, probe: &GradProbe) -> f64
where
    B: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Var,
{
    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let loss = f(&mut g, p);
        g.scalar(loss)
    };
    let mut g = Graph::new();
    let loss = f(&mut g, params);
    let grads = g.backward(loss);
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut worst = 0.0f64;
    let mut work = params.clone();
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let picks = sample(&mut rng, n, probe.per_tensor.min(n));
        for idx in picks.iter() {
            let orig = tensor.as_slice().unwrap()[idx];
            let set = |w: &mut ParamSet<f64>, v: f64| {
                w.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = v;
            };
            set(&mut work, orig + probe.step);
            let up = eval(&work);
            set(&mut work, orig - probe.step);
            let down = eval(&work);
            set(&mut work, orig);
            let numeric = (up - down) / (2.0 * probe.step);
            let analytic = grads.get(name).map_or(0.0, |g| g.as_slice().unwrap()[idx]);
            let denom = analytic.abs().max(numeric.abs()).max(probe.floor);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::super::layers::MlpSpec;
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::<f64>::new();
        p.insert("p", Array2::from_shape_fn((3, 4), |_| rng.gen_range(-2.0..2.0))).unwrap();
        let err = grad_check(
            |g, p| {
                let v = g.param(p, "p");
                g.sum_squares(v)
            },
            &p,
            &GradProbe::default(),
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn mlp_squared_loss() {
        let spec = MlpSpec::uniform(5, 7, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ParamSet::<f64>::new();
        spec.init(&mut p, "m", &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let err = grad_check(
            |g, p| {
                let m = spec.bind(g, p, "m");
                let xv = g.constant(x.clone());
                let out = m.apply(g, xv);
                let yv = g.constant(y.clone());
                let d = g.sub(out, yv);
                g.sum_squares(d)
            },
            &p,
            &GradProbe::default(),
        );
        assert!(err < 1e-4, "{err}");
    }
}
