use super::{Element, Shape, Tensor};
use crate::error::{invalid_arg, shape_err, Result};

/// Stochastic gradient descent with classical momentum:
/// `v <- m v + g`, `p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> SgdMomentum<T> {
    /// One zero-initialised velocity buffer per parameter shape.
    pub fn new(learning_rate: T, momentum: T, shapes: impl IntoIterator<Item = Shape>) -> Result<Self> {
        if !(learning_rate > T::zero()) {
            return Err(invalid_arg!("learning rate must be positive, got {learning_rate}"));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(invalid_arg!("momentum must lie in [0, 1), got {momentum}"));
        }
        Ok(SgdMomentum {
            learning_rate,
            momentum,
            velocity: shapes.into_iter().map(Tensor::zeros).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Replace the velocity buffers (used when resuming from a checkpoint).
    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(shape_err!("velocity buffers do not match the registered parameters"));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(shape_err!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.velocity.len(),
                params.len(),
                grads.len()
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != v.shape() || g.shape() != v.shape() {
                return Err(shape_err!(
                    "parameter {} / gradient {} do not match velocity {}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                ));
            }
        }
        let (lr, m) = (self.learning_rate, self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = m * *vi + gi;
                *pi = *pi - lr * *vi;
            }
        }
        Ok(())
    }
}

/// Minimum decrease of the validation loss that counts as an improvement.
pub const PLATEAU_IMPROVEMENT: f32 = 1e-6;

/// Multiply the learning rate by `factor` whenever the validation loss has not
/// improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub learning_rate: f32,
    pub factor: f32,
    pub patience: u32,
    pub best_loss: f32,
    pub epochs_since_improve: u32,
}

impl PlateauSchedule {
    pub fn new(learning_rate: f32, factor: f32, patience: u32) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(invalid_arg!("learning rate must be positive, got {learning_rate}"));
        }
        if !(factor > 0.0 && factor < 1.0) {
            return Err(invalid_arg!("reduction factor must lie in (0, 1), got {factor}"));
        }
        if patience == 0 {
            return Err(invalid_arg!("patience must be at least one epoch"));
        }
        Ok(PlateauSchedule {
            learning_rate,
            factor,
            patience,
            best_loss: f32::INFINITY,
            epochs_since_improve: 0,
        })
    }

    /// Record one epoch's validation loss; returns the learning rate to use
    /// next. NaN never counts as an improvement.
    pub fn update(&mut self, val_loss: f32) -> f32 {
        if val_loss < self.best_loss - PLATEAU_IMPROVEMENT {
            self.best_loss = val_loss;
            self.epochs_since_improve = 0;
        } else {
            self.epochs_since_improve += 1;
            if self.epochs_since_improve >= self.patience {
                self.learning_rate *= self.factor;
                self.epochs_since_improve = 0;
            }
        }
        self.learning_rate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut opt = SgdMomentum::new(0.1, 0.0, [Shape::new(1, 1, 1, 1)]).unwrap();
        let mut p = scalar_param(1.0);
        opt.step(&mut p, &scalar_param(2.0)).unwrap();
        assert_eq!(p[0].data()[0], 1.0 - 0.1 * 2.0);
    }

    #[test]
    fn constant_gradient_velocity_is_geometric() {
        let mut opt = SgdMomentum::new(0.01, 0.9, [Shape::new(1, 1, 1, 1)]).unwrap();
        let mut p = scalar_param(0.0);
        let g = scalar_param(3.0);
        for k in 1..=10 {
            opt.step(&mut p, &g).unwrap();
            let expected = 3.0 * (1.0 - 0.9f64.powi(k)) / 0.1;
            assert!((opt.velocity()[0].data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = SgdMomentum::new(0.01f32, 0.9, [Shape::new(1, 1, 1, 2)]).unwrap();
        let mut p = vec![Tensor::zeros(Shape::new(1, 1, 1, 2))];
        assert!(opt.step(&mut p, &[Tensor::zeros(Shape::new(1, 1, 2, 1))]).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
    }

    #[test]
    fn plateau_keeps_rate_while_improving() {
        let mut s = PlateauSchedule::new(0.005, 0.5, 5).unwrap();
        for i in 0..20 {
            assert_eq!(s.update(1.0 - 0.01 * i as f32), 0.005);
        }
    }

    #[test]
    fn plateau_counter_resets_on_improvement() {
        let mut s = PlateauSchedule::new(0.005, 0.5, 5).unwrap();
        s.update(1.0);
        for _ in 0..4 {
            s.update(1.0);
        }
        assert_eq!(s.epochs_since_improve, 4);
        assert_eq!(s.update(0.5), 0.005);
        assert_eq!(s.epochs_since_improve, 0);
    }

    #[test]
    fn nan_is_not_an_improvement() {
        let mut s = PlateauSchedule::new(0.005, 0.5, 2).unwrap();
        s.update(1.0);
        s.update(f32::NAN);
        assert_eq!(s.update(f32::NAN), 0.0025);
    }
}
