//! Class-weighted segmentation cross-entropy, boundary binary cross-entropy
//! and their weighted sum.
//!
//! Each loss comes with its gradient with respect to the probabilities it
//! consumes; the network's tape carries it the rest of the way.

use serde::{Deserialize, Serialize};
use tbnet_tensor::Tensor;

use crate::config::{AblationFlags, Reduction, TrainConfig, WeightingMode};
use crate::data::{ClassWeights, Sample};
use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap};
use crate::network::NetworkOutput;

/// Lower clamp applied to every logarithm argument.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub seg: f64,
    pub boundary: f64,
    pub lambda_seg: f64,
    pub lambda_boundary: f64,
}

impl LossReport {
    pub fn new(seg: f64, boundary: f64, lambda_seg: f64, lambda_boundary: f64) -> Self {
        Self {
            total: lambda_seg * seg + lambda_boundary * boundary,
            seg,
            boundary,
            lambda_seg,
            lambda_boundary,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.seg.is_finite() && self.boundary.is_finite()
    }
}

fn neg_log(p: f64) -> f64 {
    -p.max(LOG_EPS).ln()
}

fn check_probs(probs: &Tensor, labels: &[&LabelMap], num_classes: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = probs.dims4()?;
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} probability maps for {} label maps", labels.len())));
    }
    if c != num_classes {
        return Err(Error::Shape(format!("{c} probability channels for {num_classes} class weights")));
    }
    for l in labels {
        if l.dims() != (h, w) {
            return Err(Error::Shape(format!("labels {:?} vs probabilities {h}x{w}", l.dims())));
        }
        if let Some(bad) = l.data().iter().find(|&&v| v as usize >= c) {
            return Err(Error::Validation(format!("label {bad} outside 0..{c}")));
        }
    }
    if probs.data().iter().any(|p| p.is_nan()) {
        return Err(Error::Numeric("NaN in class probabilities".into()));
    }
    Ok((n, c, h * w))
}

fn seg_loss(
    probs: &Tensor,
    labels: &[&LabelMap],
    weights: &ClassWeights,
    mode: WeightingMode,
    reduction: Reduction,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let (n, c, m) = check_probs(probs, labels, weights.num_classes())?;
    let w = &weights.normalized;
    let p = probs.data();
    let mut grad = want_grad.then(|| Tensor::zeros(probs.shape()));
    let idx = |img: usize, class: usize, px: usize| (img * c + class) * m + px;
    let (nf, mf) = (n as f64, m as f64);
    let mut total = 0.0;
    for (img, lab) in labels.iter().enumerate() {
        let lab = lab.data();
        // coefficient multiplying each pixel's -ln p term
        let coef: Box<dyn Fn(usize) -> f64> = match (mode, reduction) {
            (WeightingMode::PerPixel, Reduction::Mean) => Box::new(|px| w[lab[px] as usize] / (nf * mf)),
            (WeightingMode::PerPixel, Reduction::Sum) => Box::new(|px| w[lab[px] as usize]),
            (WeightingMode::PerImage, r) => {
                let omega: f64 = lab.iter().map(|&l| w[l as usize]).sum();
                let k = match r {
                    Reduction::Sum => omega,
                    Reduction::Mean => omega / (nf * mf * mf),
                };
                Box::new(move |_| k)
            }
            (WeightingMode::None, Reduction::Mean) => Box::new(|_| 1.0 / (nf * mf)),
            (WeightingMode::None, Reduction::Sum) => Box::new(|_| 1.0),
        };
        for (px, &l) in lab.iter().enumerate() {
            let k = coef(px);
            total += k * neg_log(p[idx(img, l as usize, px)]);
            // softmax and -ln combine to p - onehot, which stays informative
            // on saturated pixels where the clamped log has no slope
            if let Some(g) = grad.as_mut() {
                let g = g.data_mut();
                for class in 0..c {
                    let i = idx(img, class, px);
                    g[i] = k * (p[i] - (class == l as usize) as u8 as f64);
                }
            }
        }
    }
    Ok((total, grad))
}

/// Class-weighted cross-entropy of `probs: [n, C, H, W]` against `n` label maps.
///
/// * `PerPixel`: every pixel's `-ln p` is scaled by the normalized weight of its
///   true class; `Mean` divides by the number of pixels `n·H·W`.
/// * `PerImage`: each image's cross-entropy sum is scaled by
///   `ω_n = Σ_pixels ω_{class}`; `Mean` divides `ω_n` and the image sum by
///   the pixel count and the total by `n`.
/// * `None`: plain cross-entropy.
pub fn weighted_ce(
    probs: &Tensor,
    labels: &[&LabelMap],
    weights: &ClassWeights,
    mode: WeightingMode,
    reduction: Reduction,
) -> Result<f64> {
    Ok(seg_loss(probs, labels, weights, mode, reduction, false)?.0)
}

/// [`weighted_ce`] and its gradient with respect to the logits `probs` is the
/// channel softmax of.
pub fn weighted_ce_with_grad(
    probs: &Tensor,
    labels: &[&LabelMap],
    weights: &ClassWeights,
    mode: WeightingMode,
    reduction: Reduction,
) -> Result<(f64, Tensor)> {
    let (v, g) = seg_loss(probs, labels, weights, mode, reduction, true)?;
    Ok((v, g.expect("requested")))
}

fn bce(pred: &Tensor, target: &[&Grid<u8>], reduction: Reduction, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let (n, c, h, w) = pred.dims4()?;
    if c != 1 || n != target.len() {
        return Err(Error::Shape(format!(
            "boundary prediction {:?} for {} targets",
            pred.shape(),
            target.len()
        )));
    }
    for t in target {
        if t.dims() != (h, w) {
            return Err(Error::Shape(format!("boundary target {:?} vs prediction {h}x{w}", t.dims())));
        }
        if t.data().iter().any(|&v| v > 1) {
            return Err(Error::Validation("boundary target must be binary".into()));
        }
    }
    if pred.data().iter().any(|p| p.is_nan()) {
        return Err(Error::Numeric("NaN in boundary probabilities".into()));
    }
    let k = match reduction {
        Reduction::Mean => 1.0 / pred.numel() as f64,
        Reduction::Sum => 1.0,
    };
    let ys = target.iter().flat_map(|t| t.data().iter().copied());
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(pred.shape()));
    for (i, (&p, y)) in pred.data().iter().zip(ys).enumerate() {
        let term = if y == 1 { neg_log(p) } else { neg_log(1.0 - p) };
        total += k * term;
        if let Some(g) = grad.as_mut() {
            g.data_mut()[i] = k * (p - y as f64);
        }
    }
    Ok((total, grad))
}

/// Binary cross-entropy of `pred: [n, 1, H, W]` against `n` binary targets.
pub fn boundary_bce(pred: &Tensor, target: &[&Grid<u8>], reduction: Reduction) -> Result<f64> {
    Ok(bce(pred, target, reduction, false)?.0)
}

/// [`boundary_bce`] and its gradient with respect to the logits `pred` is the sigmoid of.
pub fn boundary_bce_with_grad(pred: &Tensor, target: &[&Grid<u8>], reduction: Reduction) -> Result<(f64, Tensor)> {
    let (v, g) = bce(pred, target, reduction, true)?;
    Ok((v, g.expect("requested")))
}

/// The weighting actually applied: class weighting can be switched off by the ablation flags.
pub fn effective_mode(cfg: &TrainConfig, flags: &AblationFlags) -> WeightingMode {
    if flags.use_class_weighting {
        cfg.weighting_mode
    } else {
        WeightingMode::None
    }
}

/// Gradients of the total loss with respect to the network's logit outputs.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub seg_logits: Tensor,
    pub boundary_logits: Option<Tensor>,
}

fn total(
    out: &NetworkOutput,
    samples: &[&Sample],
    weights: &ClassWeights,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    want_grad: bool,
) -> Result<(LossReport, Option<LossGrads>)> {
    let labels: Vec<&LabelMap> = samples.iter().map(|s| &s.labels).collect();
    let mode = effective_mode(cfg, flags);
    let (seg, seg_grad) = seg_loss(out.seg_probs.value(), &labels, weights, mode, cfg.reduction, want_grad)?;
    let (boundary, b_grad) = match &out.boundary_prob {
        Some(b) => {
            let owned: Vec<Grid<u8>> = samples
                .iter()
                .filter(|s| s.boundary.is_none())
                .map(|s| s.boundary_or_extract())
                .collect();
            let mut extracted = owned.iter();
            let targets: Vec<&Grid<u8>> = samples
                .iter()
                .map(|s| s.boundary.as_ref().unwrap_or_else(|| extracted.next().expect("one per sample")))
                .collect();
            let (v, g) = bce(b.value(), &targets, cfg.reduction, want_grad)?;
            (v, g)
        }
        None => (0.0, None),
    };
    let report = LossReport::new(seg, boundary, cfg.lambda_seg, cfg.lambda_boundary);
    if !report.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {report:?}")));
    }
    let grads = want_grad.then(|| LossGrads {
        seg_logits: seg_grad.expect("requested").map(|g| g * cfg.lambda_seg),
        boundary_logits: b_grad.map(|g| g.map(|v| v * cfg.lambda_boundary)),
    });
    Ok((report, grads))
}

/// `λ_seg·seg + λ_boundary·boundary` for a batch; the boundary term is zero
/// when the network has no boundary stream. Boundary targets are derived from
/// the labels for samples that do not store one.
pub fn total_loss(
    out: &NetworkOutput,
    samples: &[&Sample],
    weights: &ClassWeights,
    cfg: &TrainConfig,
    flags: &AblationFlags,
) -> Result<LossReport> {
    Ok(total(out, samples, weights, cfg, flags, false)?.0)
}

/// [`total_loss`] plus gradients for the backward pass.
pub fn total_loss_with_grad(
    out: &NetworkOutput,
    samples: &[&Sample],
    weights: &ClassWeights,
    cfg: &TrainConfig,
    flags: &AblationFlags,
) -> Result<(LossReport, LossGrads)> {
    let (r, g) = total(out, samples, weights, cfg, flags, true)?;
    Ok((r, g.expect("requested")))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tbnet_tensor::{Graph, Var};

    use super::*;

    fn softmax_probs(logits: &Tensor) -> Tensor {
        let g = Graph::inference();
        g.softmax_channels(&g.constant(logits.clone())).unwrap().into_tensor()
    }

    fn random_instance(seed: u64, n: usize, c: usize, h: usize, w: usize) -> (Tensor, Vec<LabelMap>, ClassWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[n, c, h, w], |_| rng.gen_range(-2.0..2.0));
        let labels = (0..n)
            .map(|_| Grid::from_fn(h, w, |_, _| rng.gen_range(0..c as u8)))
            .collect();
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let weights = ClassWeights {
            normalized: raw.iter().map(|r| r / s).collect(),
            raw,
        };
        (softmax_probs(&logits), labels, weights)
    }

    /// The per-image weighted loss written as the literal triple sum
    /// `Σ_n ω_n Σ_m Σ_c -y_{m,c} ln p_{m,c}` with `ω_n = Σ_c Σ_m ω_c y_{m,c}`.
    fn triple_sum(probs: &Tensor, labels: &[LabelMap], w: &[f64]) -> f64 {
        let (n, c, h, wd) = probs.dims4().unwrap();
        let mut total = 0.0;
        for img in 0..n {
            let y = |m: usize, cls: usize| (labels[img].data()[m] as usize == cls) as u8 as f64;
            let mut omega = 0.0;
            for cls in 0..c {
                for m in 0..h * wd {
                    omega += w[cls] * y(m, cls);
                }
            }
            let mut ce = 0.0;
            for m in 0..h * wd {
                for cls in 0..c {
                    let p = probs.data()[(img * c + cls) * h * wd + m];
                    ce -= y(m, cls) * p.max(LOG_EPS).ln();
                }
            }
            total += omega * ce;
        }
        total
    }

    #[test]
    fn single_pixel_by_hand() {
        let probs = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let labels = Grid::filled(1, 1, 1u8);
        let w = ClassWeights::from_counts(&[3, 1]).unwrap();
        let v = weighted_ce(&probs, &[&labels], &w, WeightingMode::PerPixel, Reduction::Mean).unwrap();
        assert!((v - 0.75 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.519860385419959).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let labels = Grid::from_vec(1, 3, vec![0u8, 2, 1]).unwrap();
        let probs = Tensor::from_fn(&[1, 3, 1, 3], |i| ((i / 3) == labels.data()[i % 3] as usize) as u8 as f64);
        let w = ClassWeights::from_counts(&[1, 1, 1]).unwrap();
        for mode in [WeightingMode::PerPixel, WeightingMode::PerImage, WeightingMode::None] {
            for r in [Reduction::Mean, Reduction::Sum] {
                assert_eq!(weighted_ce(&probs, &[&labels], &w, mode, r).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn uniform_weights_scale_plain_ce() {
        let (p, l, _) = random_instance(1, 2, 4, 3, 3);
        let l: Vec<&LabelMap> = l.iter().collect();
        let u = ClassWeights::uniform(4);
        let weighted = weighted_ce(&p, &l, &u, WeightingMode::PerPixel, Reduction::Mean).unwrap();
        let plain = weighted_ce(&p, &l, &u, WeightingMode::None, Reduction::Mean).unwrap();
        assert!((weighted - plain / 4.0).abs() < 1e-14);
    }

    #[test]
    fn per_image_matches_triple_sum() {
        for seed in 0..50 {
            let (p, l, w) = random_instance(seed, 2, 3, 4, 4);
            let refs: Vec<&LabelMap> = l.iter().collect();
            let v = weighted_ce(&p, &refs, &w, WeightingMode::PerImage, Reduction::Sum).unwrap();
            let oracle = triple_sum(&p, &l, &w.normalized);
            assert!((v - oracle).abs() <= 1e-9 * oracle.abs(), "{v} vs {oracle}");
            let mean = weighted_ce(&p, &refs, &w, WeightingMode::PerImage, Reduction::Mean).unwrap();
            assert!((mean - oracle / (2.0 * 256.0)).abs() <= 1e-9 * mean.abs());
        }
    }

    #[test]
    fn nan_probabilities_fail_fast() {
        let p = Tensor::new(vec![1, 2, 1, 1], vec![f64::NAN, 0.5]).unwrap();
        let l = Grid::filled(1, 1, 0u8);
        let err = weighted_ce(&p, &[&l], &ClassWeights::uniform(2), WeightingMode::None, Reduction::Mean);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn bce_closed_forms() {
        let t = Grid::from_vec(1, 2, vec![0u8, 1]).unwrap();
        let half = Tensor::full(&[1, 1, 1, 2], 0.5);
        assert!((boundary_bce(&half, &[&t], Reduction::Mean).unwrap() - 2f64.ln()).abs() < 1e-15);
        let exact = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert!(boundary_bce(&exact, &[&t], Reduction::Mean).unwrap().abs() < 1e-15);
        let one = Grid::filled(1, 1, 1u8);
        let p = Tensor::full(&[1, 1, 1, 1], 0.9);
        assert!((boundary_bce(&p, &[&one], Reduction::Mean).unwrap() - 0.1053605156578263).abs() < 1e-12);
        let bad = Grid::filled(1, 1, 2u8);
        assert!(matches!(boundary_bce(&p, &[&bad], Reduction::Mean), Err(Error::Validation(_))));
    }

    /// Finite-difference check of `d loss / d logits` through a softmax or sigmoid.
    fn fd_check(logits: &Tensor, map: fn(&Graph, &Var) -> Var, loss: &dyn Fn(&Tensor) -> (f64, Tensor)) {
        let g = Graph::inference();
        let (_, analytic) = loss(map(&g, &g.constant(logits.clone())).value());
        let f = |t: &Tensor| {
            let g = Graph::inference();
            loss(map(&g, &g.constant(t.clone())).value()).0
        };
        let h = 1e-6;
        for i in 0..logits.numel() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()).max(1e-6), "{i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, labels, w) = random_instance(3, 2, 3, 2, 3);
        let logits = Tensor::from_fn(&[2, 3, 2, 3], |_| rng.gen_range(-2.0..2.0));
        let refs: Vec<&LabelMap> = labels.iter().collect();
        for mode in [WeightingMode::PerPixel, WeightingMode::PerImage, WeightingMode::None] {
            for r in [Reduction::Mean, Reduction::Sum] {
                fd_check(&logits, |g, x| g.softmax_channels(x).unwrap(), &|p| {
                    weighted_ce_with_grad(p, &refs, &w, mode, r).unwrap()
                });
            }
        }
        let targets: Vec<Grid<u8>> = (0..2).map(|_| Grid::from_fn(2, 3, |_, _| rng.gen_range(0..2u8))).collect();
        let trefs: Vec<&Grid<u8>> = targets.iter().collect();
        let b_logits = Tensor::from_fn(&[2, 1, 2, 3], |_| rng.gen_range(-3.0..3.0));
        for r in [Reduction::Mean, Reduction::Sum] {
            fd_check(&b_logits, |g, x| g.sigmoid(x), &|p| boundary_bce_with_grad(p, &trefs, r).unwrap());
        }
    }

    #[test]
    fn saturated_pixels_keep_their_gradient() {
        let labels = Grid::filled(1, 1, 1u8);
        let probs = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let w = ClassWeights::uniform(2);
        let (v, g) = weighted_ce_with_grad(&probs, &[&labels], &w, WeightingMode::None, Reduction::Mean).unwrap();
        assert!((v + LOG_EPS.ln()).abs() < 1e-12);
        assert_eq!(g.data(), &[1.0, -1.0]);
        let (_, g) = boundary_bce_with_grad(&Tensor::zeros(&[1, 1, 1, 1]), &[&labels], Reduction::Mean).unwrap();
        assert_eq!(g.data(), &[-1.0]);
    }

    fn fake_output(seed: u64) -> (NetworkOutput, Vec<Sample>) {
        let (p, l, _) = random_instance(seed, 2, 3, 4, 4);
        let g = Graph::inference();
        let out = NetworkOutput {
            seg_logits: g.constant(p.clone()),
            seg_probs: g.constant(p),
            boundary_prob: Some(g.constant(Tensor::from_fn(&[2, 1, 4, 4], |i| (i as f64 + 0.5) / 32.0))),
            boundary_logits: None,
        };
        let samples = l
            .into_iter()
            .enumerate()
            .map(|(i, labels)| Sample {
                id: i.to_string(),
                image: Grid::filled(4, 4, 0.0),
                labels,
                boundary: None,
            })
            .collect();
        (out, samples)
    }

    #[test]
    fn total_is_the_lambda_combination() {
        let (out, samples) = fake_output(9);
        let refs: Vec<&Sample> = samples.iter().collect();
        let w = ClassWeights::from_counts(&[5, 2, 9]).unwrap();
        let flags = AblationFlags::full();
        let at = |ls, lb| {
            let cfg = TrainConfig { lambda_seg: ls, lambda_boundary: lb, ..TrainConfig::default() };
            total_loss(&out, &refs, &w, &cfg, &flags).unwrap()
        };
        let one = at(1.0, 1.0);
        assert!((one.total - (one.seg + one.boundary)).abs() < 1e-12);
        assert_eq!(at(1.0, 0.0).total, one.seg);
        assert!((at(2.0, 2.0).total - 2.0 * one.total).abs() < 1e-12);
        let r = at(0.3, 1.7);
        assert!((r.total - (0.3 * r.seg + 1.7 * r.boundary)).abs() < 1e-12);
    }

    #[test]
    fn disabling_weighting_uses_plain_ce() {
        let (out, samples) = fake_output(4);
        let refs: Vec<&Sample> = samples.iter().collect();
        let w = ClassWeights::from_counts(&[5, 2, 9]).unwrap();
        let cfg = TrainConfig::default();
        let flags = AblationFlags { use_class_weighting: false, ..AblationFlags::full() };
        let r = total_loss(&out, &refs, &w, &cfg, &flags).unwrap();
        let labels: Vec<&LabelMap> = samples.iter().map(|s| &s.labels).collect();
        let plain = weighted_ce(out.seg_probs.value(), &labels, &w, WeightingMode::None, Reduction::Mean).unwrap();
        assert_eq!(r.seg, plain);
        let (r2, grads) = total_loss_with_grad(&out, &refs, &w, &cfg, &flags).unwrap();
        assert_eq!(r, r2);
        assert!(grads.boundary_logits.is_some());
    }

    proptest! {
        #[test]
        fn non_negative_and_homogeneous(seed in 0u64..10_000, k in 0.1f64..10.0) {
            let (p, l, w) = random_instance(seed, 1, 3, 3, 3);
            let refs: Vec<&LabelMap> = l.iter().collect();
            let base = weighted_ce(&p, &refs, &w, WeightingMode::PerPixel, Reduction::Mean).unwrap();
            prop_assert!(base >= 0.0);
            let scaled = ClassWeights { raw: w.raw.clone(), normalized: w.normalized.iter().map(|v| v * k).collect() };
            let v = weighted_ce(&p, &refs, &scaled, WeightingMode::PerPixel, Reduction::Mean).unwrap();
            prop_assert!((v - k * base).abs() <= 1e-12 * v.abs().max(1.0));
        }

        #[test]
        fn per_pixel_ignores_batch_order(seed in 0u64..10_000) {
            let (p, l, w) = random_instance(seed, 2, 3, 2, 2);
            let refs: Vec<&LabelMap> = l.iter().collect();
            let a = weighted_ce(&p, &refs, &w, WeightingMode::PerPixel, Reduction::Mean).unwrap();
            let half = p.numel() / 2;
            let swapped = Tensor::from_fn(p.shape(), |i| p.data()[(i + half) % p.numel()]);
            let b = weighted_ce(&swapped, &[refs[1], refs[0]], &w, WeightingMode::PerPixel, Reduction::Mean).unwrap();
            prop_assert!((a - b).abs() <= 1e-14 * a.max(1.0));
        }
    }
}
