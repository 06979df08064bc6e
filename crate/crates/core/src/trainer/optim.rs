use crate::encoder::{ModelParams, Scalar};

/// Adam with decoupled weight decay. Weight decay applies to tensors of rank
/// ≥ 2 only; biases, norm parameters and tokens are not decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ModelParams<T>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let decay = T::of(1.0 - lr * self.weight_decay);
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            let decayed = p.ndim() >= 2;
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1t * *m + (one - b1t) * g;
                    *v = b2t * *v + (one - b2t) * g * g;
                    if decayed {
                        *p = *p * decay;
                    }
                    *p = *p - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}

/// Scales `grads` so its global ℓ2 norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().f64().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::of(max_norm / (norm + 1e-6)));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 1,
            embed_dim: 4,
            depth: 1,
            n_heads: 1,
            ffn_hidden_dim: 4,
            n_prototypes: 3,
            head_hidden_dim: 4,
            head_bottleneck_dim: 2,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // after one step the bias-corrected update is g/|g| per coordinate
        let p0 = init_params::<f64>(&cfg(), 0).unwrap();
        let mut p = p0.clone();
        let mut g = p.zeros_like();
        g.fill(0.5);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 1e-3);
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(p0.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((y - x - 1e-3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let p0 = init_params::<f32>(&cfg(), 1).unwrap();
        let mut p = p0.clone();
        let mut g = p.zeros_like();
        g.fill(2.0);
        let mut opt = AdamW::new(&p, 0.04);
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, p0);
    }

    #[test]
    fn decay_skips_vectors() {
        let p0 = init_params::<f64>(&cfg(), 2).unwrap();
        let mut p = p0.clone();
        let g = p.zeros_like();
        let mut opt = AdamW::new(&p, 0.5);
        opt.step(&mut p, &g, 0.1);
        assert_eq!(p.norm.gamma, p0.norm.gamma);
        assert_eq!(p.cls_token, p0.cls_token);
        let expect = &p0.patch_embed.weight * 0.95;
        for (a, b) in p.patch_embed.weight.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping() {
        let p = init_params::<f64>(&cfg(), 0).unwrap();
        let mut g = p.zeros_like();
        g.fill(1.0);
        let n = (g.n_params() as f64).sqrt();
        assert!((clip_grad_norm(&mut g, 1.0) - n).abs() < 1e-9);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-5);
        let before = g.clone();
        clip_grad_norm(&mut g, 0.0);
        assert_eq!(g, before);
    }
}
