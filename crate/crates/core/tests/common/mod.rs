#![allow(dead_code)]

use glmamba::gradcheck::random_tensor;
use glmamba::ssm::SsmVars;
use glmamba::{Graph, Tensor, Var};

/// Random SSM parameter tensors: `[a_log, proj_b, proj_c, proj_delta, delta_bias]`.
pub fn ssm_tensors(channels: usize, n_state: usize, seed: u64) -> Vec<Tensor<f64>> {
    vec![
        random_tensor([1, 1, channels, n_state], seed, 0.5),
        random_tensor([n_state, channels, 1, 1], seed + 1, 0.6),
        random_tensor([n_state, channels, 1, 1], seed + 2, 0.6),
        random_tensor([1, channels, 1, 1], seed + 3, 0.6),
        random_tensor([1, channels, 1, 1], seed + 4, 0.5),
    ]
}

pub fn ssm_vars(v: &[Var]) -> SsmVars {
    SsmVars {
        a_log: v[0],
        proj_b: v[1],
        proj_c: v[2],
        proj_delta: v[3],
        delta_bias: v[4],
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
pub fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> glmamba::Result<Var> {
    let w = random_tensor(g.shape(y).0, seed, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Replaces every parameter with uniform noise in `[-amp, amp]` so gradient
/// checks see well-conditioned, non-degenerate values.
pub fn randomize(store: &mut glmamba::nn::ParamStore<f64>, seed: u64, amp: f64) {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().0;
        *store.get_mut(id) = random_tensor(shape, seed + k as u64, amp);
    }
}

/// Gradient check over an input tensor plus every parameter of `store`.
pub fn check_with_params<F>(
    x: &[Tensor<f64>],
    store: &glmamba::nn::ParamStore<f64>,
    sample: Option<usize>,
    f: F,
) -> glmamba::gradcheck::GradCheck
where
    F: Fn(&mut Graph<f64>, &glmamba::nn::Bound, &[Var]) -> glmamba::Result<Var>,
{
    let mut inputs: Vec<Tensor<f64>> = x.to_vec();
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    let nx = x.len();
    glmamba::gradcheck::check(&inputs, 1e-5, sample, |g, v| {
        let bound = glmamba::nn::Bound::from_vars(v[nx..].to_vec());
        f(g, &bound, &v[..nx])
    })
    .unwrap()
}

pub fn builder_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
