//! Central-difference oracle for the gradient of the full objective with
//! respect to every student tensor, in double precision on a toy encoder.
//! Shared by the core gradient test and the acceptance suite.

use ndarray::Array2;
use rand::Rng;
use sslprof_core::augment::PatchMask;
use sslprof_core::encoder::{backward, forward, init_params, FfnType, HeadRows};
use sslprof_core::objective::{total_loss, update_center, CenterState, LossWeights};
use sslprof_core::{EncoderConfig, ModelParams};

const BATCH: usize = 2;

pub fn toy(ffn_type: FfnType) -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 4,
        in_channels: 5,
        embed_dim: 8,
        depth: 1,
        n_heads: 2,
        ffn_type,
        ffn_hidden_dim: 16,
        n_prototypes: 12,
        head_hidden_dim: 16,
        head_bottleneck_dim: 6,
        ..Default::default()
    }
}

struct Problem {
    anchor: Array2<f64>,
    sibling: Array2<f64>,
    masks: Vec<PatchMask>,
    teacher: ModelParams<f64>,
    center: CenterState<f64>,
    weights: LossWeights,
}

impl Problem {
    fn new(cfg: &EncoderConfig) -> Self {
        let mut rng = sslprof_core::rng::stream(42, &[]);
        let rows = BATCH * cfg.n_patches();
        let anchor = Array2::from_shape_simple_fn((rows, cfg.patch_dim()), || rng.random::<f64>());
        let sibling = Array2::from_shape_simple_fn((rows, cfg.patch_dim()), || rng.random::<f64>());
        let mut masks = vec![PatchMask::empty(4, 4); BATCH];
        for i in [1, 2, 5, 6] {
            masks[0].masked[i] = true;
        }
        masks[1].masked[15] = true;
        let teacher = init_params::<f64>(cfg, 7).unwrap();
        let mut center = CenterState::zeros(cfg.n_prototypes);
        // a nonzero center exercises the centering path
        let (t, _) = forward(&teacher, anchor.clone(), BATCH, None, HeadRows::All).unwrap();
        update_center(&mut center.instance, &t.cls_logits.view(), 0.5);
        update_center(&mut center.patch, &t.patch_logits.view(), 0.5);
        let weights = LossWeights {
            lambda1: 0.7,
            lambda2: 0.3,
            tau_s: 0.2,
            tau_t: 0.08,
            center_momentum: 0.9,
            local_aggregation: true,
        };
        Self {
            anchor,
            sibling,
            masks,
            teacher,
            center,
            weights,
        }
    }

    fn loss_and_grad(&self, student: &ModelParams<f64>) -> (f64, ModelParams<f64>) {
        let (sm, cm) = forward(student, self.anchor.clone(), BATCH, Some(&self.masks), HeadRows::Masked).unwrap();
        let (sv, cv) = forward(student, self.sibling.clone(), BATCH, None, HeadRows::None).unwrap();
        let rows = HeadRows::Explicit(sm.patch_rows.clone());
        let (t, _) = forward(&self.teacher, self.anchor.clone(), BATCH, None, rows).unwrap();
        let loss = total_loss(&sm, &sv, &t, &self.weights, &self.center).unwrap();
        let mut g = student.zeros_like();
        backward(student, &cm, &loss.masked_view_grads, &mut g).unwrap();
        backward(student, &cv, &loss.sibling_view_grads, &mut g).unwrap();
        (loss.total, g)
    }
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per
/// student tensor, numeric gradients from central differences with step `h`.
pub fn relative_errors(ffn: FfnType, h: f64) -> Vec<(String, f64)> {
    let cfg = toy(ffn);
    let problem = Problem::new(&cfg);
    let student = init_params::<f64>(&cfg, 3).unwrap();
    let (_, analytic) = problem.loss_and_grad(&student);
    let names: Vec<String> = student.tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = student.tensors()[ti].1.len();
        let ana: Vec<f64> = analytic.tensors()[ti].1.iter().copied().collect();
        let mut num = Vec::with_capacity(len);
        for k in 0..len {
            let mut plus = student.clone();
            *plus.tensors_mut()[ti].1.iter_mut().nth(k).unwrap() += h;
            let mut minus = student.clone();
            *minus.tensors_mut()[ti].1.iter_mut().nth(k).unwrap() -= h;
            num.push((problem.loss_and_grad(&plus).0 - problem.loss_and_grad(&minus).0) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = ana.iter().zip(&num).map(|(a, b)| a - b).collect();
        let scale = norm(&ana).max(norm(&num));
        let rel = if scale < 1e-10 { norm(&diff) } else { norm(&diff) / scale };
        out.push((name, rel));
    }
    out
}
