use crate::params::ParamSet;
use crate::tensor::Mat;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in order using `grads` (one per parameter).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for (i, name) in names.iter().enumerate() {
            let p = params.get_mut(name).expect("name from same set");
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", Mat::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = ps.get("x").unwrap() * 2.0;
            opt.step(&mut ps, &[g]);
        }
        assert!(ps.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }
}
