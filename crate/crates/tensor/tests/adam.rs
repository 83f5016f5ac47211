use dehaze_tensor::{AdamConfig, AdamState, ModelParams, Tensor};

/// Single-coordinate Adam recurrence transcribed directly.
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, theta: f64, grad: f64, cfg: &AdamConfig) -> f64 {
        self.t += 1;
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad;
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - cfg.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - cfg.beta2.powi(self.t));
        theta - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps)
    }
}

#[test]
fn matches_hand_rolled_recurrence() {
    let cfg = AdamConfig {
        learning_rate: 3e-3,
        ..AdamConfig::default()
    };
    let init = [0.4, -1.2, 2.0];
    let mut params = ModelParams::new();
    params.add("w", Tensor::new([3], init.to_vec()).unwrap());
    let mut state = AdamState::new(&params, cfg);
    let mut refs: Vec<ScalarAdam> = (0..3).map(|_| ScalarAdam { m: 0.0, v: 0.0, t: 0 }).collect();
    let mut theta = init;
    for step in 0..25 {
        // gradient of a quadratic bowl plus a step-dependent wobble
        let grads: Vec<f64> = theta
            .iter()
            .enumerate()
            .map(|(i, w)| 2.0 * w + 0.1 * ((step * 3 + i) as f64).sin())
            .collect();
        params.iter_mut().next().unwrap().grad = Some(grads.clone());
        state.update(&mut params).unwrap();
        for i in 0..3 {
            theta[i] = refs[i].step(theta[i], grads[i], &cfg);
        }
        let got = params.iter().next().unwrap().value.data().to_vec();
        for (a, b) in got.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-12, "step {step}: {a} vs {b}");
        }
    }
}

#[test]
fn first_step_moves_by_learning_rate() {
    let cfg = AdamConfig::default();
    let mut params = ModelParams::new();
    params.add("w", Tensor::new([2], vec![1.0, 1.0]).unwrap());
    params.iter_mut().next().unwrap().grad = Some(vec![5.0, -0.01]);
    let mut state = AdamState::new(&params, cfg);
    state.update(&mut params).unwrap();
    let w = params.iter().next().unwrap().value.data().to_vec();
    assert!((w[0] - (1.0 - 1e-4)).abs() < 1e-10);
    assert!((w[1] - (1.0 + 1e-4)).abs() < 1e-8);
}
