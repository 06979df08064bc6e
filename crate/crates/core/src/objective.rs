//! Distillation losses, teacher centering and the combined objective.
//!
//! Losses return their value together with the gradient with respect to the
//! student-side input so the trainer can backpropagate without an autodiff
//! graph. Teacher-side inputs are treated as constants.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{BatchOutputs, OutputGrads, Scalar};
use crate::error::{Error, Result};

pub const KOLEO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Patch-level (iBOT) weight.
    pub lambda1: f64,
    /// KoLeo weight.
    pub lambda2: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub center_momentum: f64,
    /// Whether the sibling-site (local aggregation) term enters the total.
    pub local_aggregation: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            tau_s: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            local_aggregation: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            bad.push(format!("lambda1 = {} must be >= 0", self.lambda1));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            bad.push(format!("lambda2 = {} must be >= 0", self.lambda2));
        }
        if !(self.tau_s > 0.0 && self.tau_s.is_finite()) {
            bad.push(format!("tau_s = {} must be > 0", self.tau_s));
        }
        if !(self.tau_t > 0.0 && self.tau_t.is_finite()) {
            bad.push(format!("tau_t = {} must be > 0", self.tau_t));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            bad.push(format!("center_momentum = {} must be in [0, 1]", self.center_momentum));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Running means of teacher logits subtracted before the teacher softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterState<T = f32> {
    pub instance: Array1<T>,
    pub patch: Array1<T>,
}

impl<T: Scalar> CenterState<T> {
    pub fn zeros(n_prototypes: usize) -> Self {
        Self {
            instance: Array1::zeros(n_prototypes),
            patch: Array1::zeros(n_prototypes),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.instance.iter().chain(&self.patch).all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> CenterState<U> {
        let f = |a: &Array1<T>| a.mapv(|v| U::of(v.f64()));
        CenterState {
            instance: f(&self.instance),
            patch: f(&self.patch),
        }
    }
}

/// `center ← m·center + (1−m)·mean(rows)`. An empty batch leaves the center
/// unchanged.
pub fn update_center<T: Scalar>(center: &mut Array1<T>, teacher_logits: &ArrayView2<T>, momentum: f64) {
    if teacher_logits.nrows() == 0 {
        return;
    }
    let mean = teacher_logits.mean_axis(Axis(0)).expect("nonempty");
    let m = T::of(momentum);
    center.zip_mut_with(&mean, |c, &b| *c = m * *c + (T::one() - m) * b);
}

fn check_finite<T: Scalar>(a: &ArrayView2<T>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn log_softmax_rows<T: Scalar>(logits: &ArrayView2<T>, inv_tau: T) -> Array2<T> {
    let mut out = logits.mapv(|v| v * inv_tau);
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// `softmax((logits − center)/tau_t)`, row-wise.
pub fn teacher_targets<T: Scalar>(logits: &ArrayView2<T>, center: &Array1<T>, tau_t: f64) -> Result<Array2<T>> {
    if logits.ncols() != center.len() {
        return Err(Error::Shape(format!(
            "teacher logits have {} prototypes, center has {}",
            logits.ncols(),
            center.len()
        )));
    }
    check_finite(logits, "teacher logits")?;
    let centered = logits - center;
    Ok(log_softmax_rows(&centered.view(), T::one() / T::of(tau_t)).mapv(|v| v.exp()))
}

/// Cross-entropy `−⟨targets, log_softmax(student/tau_s)⟩` averaged over rows,
/// with its gradient with respect to the student logits.
pub fn cross_entropy_with_grad<T: Scalar>(
    student: &ArrayView2<T>,
    targets: &ArrayView2<T>,
    tau_s: f64,
) -> Result<(T, Array2<T>)> {
    if student.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher targets {:?}",
            student.dim(),
            targets.dim()
        )));
    }
    check_finite(student, "student logits")?;
    let n = student.nrows();
    if n == 0 {
        return Ok((T::zero(), Array2::zeros(student.dim())));
    }
    let inv_tau = T::one() / T::of(tau_s);
    let logp = log_softmax_rows(student, inv_tau);
    let inv_n = T::one() / T::of(n as f64);
    let loss = -(&logp * targets).sum() * inv_n;
    // d/ds of −Σ t log softmax(s/τ) = (softmax(s/τ)·Σt − t)/τ
    let mut grad = logp.mapv(|v| v.exp());
    for (mut g, t) in grad.outer_iter_mut().zip(targets.outer_iter()) {
        let mass = t.sum();
        g.zip_mut_with(&t, |gv, &tv| *gv = (*gv * mass - tv) * inv_tau * inv_n);
    }
    Ok((loss, grad))
}

/// Instance-level distillation loss, averaged over the batch.
pub fn dino_loss<T: Scalar>(
    student_logits: &ArrayView2<T>,
    teacher_logits: &ArrayView2<T>,
    center: &Array1<T>,
    tau_s: f64,
    tau_t: f64,
) -> Result<T> {
    let t = teacher_targets(teacher_logits, center, tau_t)?;
    Ok(cross_entropy_with_grad(student_logits, &t.view(), tau_s)?.0)
}

/// Patch-level distillation for one image: `dino_loss` over the masked rows,
/// averaged over masked positions; zero for an empty mask.
pub fn ibot_loss<T: Scalar>(
    student_patch_logits: &ArrayView2<T>,
    teacher_patch_logits: &ArrayView2<T>,
    mask: &[bool],
    patch_center: &Array1<T>,
    tau_s: f64,
    tau_t: f64,
) -> Result<T> {
    let n = mask.len();
    if student_patch_logits.nrows() != n || teacher_patch_logits.nrows() != n {
        return Err(Error::Shape(format!(
            "patch logits with {} / {} rows for a mask of {n} patches",
            student_patch_logits.nrows(),
            teacher_patch_logits.nrows()
        )));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Ok(T::zero());
    }
    dino_loss(
        &student_patch_logits.select(Axis(0), &idx).view(),
        &teacher_patch_logits.select(Axis(0), &idx).view(),
        patch_center,
        tau_s,
        tau_t,
    )
}

/// Nearest-neighbor entropy regularizer on ℓ2-normalized rows, with the
/// gradient with respect to the unnormalized input.
pub fn koleo_loss_with_grad<T: Scalar>(x: &ArrayView2<T>) -> Result<(T, Array2<T>)> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Shape(format!("koleo needs at least 2 rows, got {n}")));
    }
    check_finite(x, "koleo input")?;
    let tiny = T::of(1e-12);
    let norms: Array1<T> = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(tiny));
    let u = x / &norms.view().insert_axis(Axis(1));
    let gram = u.dot(&u.t());
    let eps = T::of(KOLEO_EPS);
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut du = Array2::<T>::zeros((n, d));
    for i in 0..n {
        // squared distance of unit vectors from the Gram matrix, ties to lowest index
        let mut best = (usize::MAX, T::infinity());
        for j in (0..n).filter(|&j| j != i) {
            let d2 = (gram[[i, i]] + gram[[j, j]] - T::of(2.0) * gram[[i, j]]).max(T::zero());
            if d2 < best.1 {
                best = (j, d2);
            }
        }
        let j = best.0;
        let diff = &u.row(i) - &u.row(j);
        let dist = diff.dot(&diff).sqrt();
        loss = loss - (dist + eps).ln() * inv_n;
        if dist > T::zero() {
            let coef = -inv_n / ((dist + eps) * dist);
            let g = diff.mapv(|v| v * coef);
            let mut ri = du.row_mut(i);
            ri += &g;
            let mut rj = du.row_mut(j);
            rj -= &g;
        }
    }
    let mut grad = du;
    for ((mut g, ur), &nr) in grad.outer_iter_mut().zip(u.outer_iter()).zip(&norms) {
        let proj = g.dot(&ur);
        g.zip_mut_with(&ur, |gv, &uv| *gv = (*gv - uv * proj) / nr);
    }
    Ok((loss, grad))
}

pub fn koleo_loss<T: Scalar>(x: &ArrayView2<T>) -> Result<T> {
    Ok(koleo_loss_with_grad(x)?.0)
}

/// Per-term values of the combined objective (unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub dino: f64,
    pub local_agg: f64,
    pub ibot: f64,
    pub koleo: f64,
}

impl LossComponents {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let local = if w.local_aggregation { self.local_agg } else { 0.0 };
        self.dino + local + w.lambda1 * self.ibot + w.lambda2 * self.koleo
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("dino", self.dino),
            ("local_agg", self.local_agg),
            ("ibot", self.ibot),
            ("koleo", self.koleo),
        ])
    }
}

#[derive(Debug, Clone)]
pub struct TotalLoss<T> {
    pub total: T,
    pub components: LossComponents,
    /// Gradients for the student's pass over the masked anchor view.
    pub masked_view_grads: OutputGrads<T>,
    /// Gradients for the student's pass over the sibling view.
    pub sibling_view_grads: OutputGrads<T>,
}

/// Combined objective for one batch.
///
/// * `student_masked`: student outputs on the masked anchor view, with patch
///   logits at the masked positions.
/// * `student_sibling`: student outputs on the sibling view.
/// * `teacher_anchor`: teacher outputs on the unmasked anchor view, with patch
///   logits at the same positions as `student_masked`.
///
/// KoLeo runs over the student CLS embeddings of both views stacked. With
/// `local_aggregation` off the sibling term is still reported but carries no
/// weight or gradient.
pub fn total_loss<T: Scalar>(
    student_masked: &BatchOutputs<T>,
    student_sibling: &BatchOutputs<T>,
    teacher_anchor: &BatchOutputs<T>,
    weights: &LossWeights,
    center: &CenterState<T>,
) -> Result<TotalLoss<T>> {
    weights.validate()?;
    if student_masked.patch_rows != teacher_anchor.patch_rows {
        return Err(Error::Shape("student and teacher patch positions differ".into()));
    }
    let b = student_masked.cls.nrows();
    if student_sibling.cls.nrows() != b || teacher_anchor.cls.nrows() != b {
        return Err(Error::Shape("views have different batch sizes".into()));
    }
    let targets = teacher_targets(&teacher_anchor.cls_logits.view(), &center.instance, weights.tau_t)?;
    let (dino, g_dino) = cross_entropy_with_grad(&student_masked.cls_logits.view(), &targets.view(), weights.tau_s)?;
    let (local, g_local) =
        cross_entropy_with_grad(&student_sibling.cls_logits.view(), &targets.view(), weights.tau_s)?;

    let (ibot, g_ibot) = if teacher_anchor.patch_rows.is_empty() {
        (T::zero(), None)
    } else {
        let pt = teacher_targets(&teacher_anchor.patch_logits.view(), &center.patch, weights.tau_t)?;
        let (l, g) = cross_entropy_with_grad(&student_masked.patch_logits.view(), &pt.view(), weights.tau_s)?;
        (l, Some(g))
    };

    let mut stacked = Array2::zeros((2 * b, student_masked.cls.ncols()));
    stacked.slice_mut(s![..b, ..]).assign(&student_masked.cls);
    stacked.slice_mut(s![b.., ..]).assign(&student_sibling.cls);
    let (koleo, g_koleo) = koleo_loss_with_grad(&stacked.view())?;

    let l1 = T::of(weights.lambda1);
    let l2 = T::of(weights.lambda2);
    let (local_term, g_local) = if weights.local_aggregation {
        (local, g_local)
    } else {
        (T::zero(), Array2::zeros(g_local.dim()))
    };
    let total = dino + local_term + l1 * ibot + l2 * koleo;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let g_koleo = g_koleo.mapv(|v| v * l2);
    let masked_view_grads = OutputGrads {
        cls: Some(g_koleo.slice(s![..b, ..]).to_owned()),
        cls_logits: Some(g_dino),
        patch_logits: g_ibot.map(|g| g.mapv(|v| v * l1)),
    };
    let sibling_view_grads = OutputGrads {
        cls: Some(g_koleo.slice(s![b.., ..]).to_owned()),
        cls_logits: Some(g_local),
        patch_logits: None,
    };
    Ok(TotalLoss {
        total,
        components: LossComponents {
            dino: dino.f64(),
            local_agg: local.f64(),
            ibot: ibot.f64(),
            koleo: koleo.f64(),
        },
        masked_view_grads,
        sibling_view_grads,
    })
}
