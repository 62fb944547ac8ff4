use crate::model::ParamStore;

/// AdamW moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Weight decay shrinks each weight by
/// `lr · weight_decay · w` before, and independently of, the bias-corrected
/// Adam step.
pub fn adamw_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut OptimState) {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let decay = lr * state.weight_decay;
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let w = params.get_mut(id).data_mut();
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        assert_eq!(g.len(), w.len(), "gradient shape of parameter {i}");
        for k in 0..w.len() {
            if decay != 0.0 {
                w[k] -= decay * w[k];
            }
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            w[k] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
}

/// Euclidean norm over all gradient entries.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for x in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *x *= s;
        }
    }
    norm
}
