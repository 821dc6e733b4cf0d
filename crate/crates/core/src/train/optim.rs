use super::config::Optimizer;

/// Optimizer moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One full-precision update of `w` with gradient `g` at learning rate `lr`.
pub fn optimizer_step(w: &mut [f64], g: &[f64], moments: &mut Moments, rule: &Optimizer, lr: f64) {
    debug_assert_eq!(w.len(), g.len());
    moments.t += 1;
    match *rule {
        Optimizer::SgdMomentum { momentum, .. } => {
            for ((w, g), v) in w.iter_mut().zip(g).zip(&mut moments.m) {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
        }
        Optimizer::Adam {
            beta1, beta2, eps, ..
        } => {
            let c1 = 1.0 - beta1.powi(moments.t as i32);
            let c2 = 1.0 - beta2.powi(moments.t as i32);
            for i in 0..w.len() {
                let m = &mut moments.m[i];
                let v = &mut moments.v[i];
                *m = beta1 * *m + (1.0 - beta1) * g[i];
                *v = beta2 * *v + (1.0 - beta2) * g[i] * g[i];
                w[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
