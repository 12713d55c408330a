//! Matching cost and the set-prediction training loss.
//!
//! For a prediction `p` and ground truth `g` of class `c`:
//! `cost = λ_ins BCE(S_ins[p], 1) + λ_cls BCE(S_cls[p, c], 1)
//!       + λ_mask (dice(M_p, M_g) + mean_px BCE(M_p, M_g))`.
//! The training loss applies the same terms to Hungarian-matched pairs,
//! supervises unmatched predictions with `λ_ins BCE(S_ins, 0)` and averages
//! over predictions. The matching is a constant during backward.

use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian, Assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Smoothing constant of the dice loss.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ins: f64,
    pub cls: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ins: 2.0,
            cls: 2.0,
            mask: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ins, self.cls, self.mask].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Options that change how the classification term is formed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    /// BCE against the one-hot target over all `K` classes (mean) instead of
    /// the target class only.
    pub all_class_bce: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub class_id: usize,
    /// Binary `[T, h, w]`.
    pub masks: Tensor,
    pub track_id: usize,
}

/// Ground truth of one clip: only instances visible somewhere in the clip.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthClip {
    pub instances: Vec<GtInstance>,
}

impl GroundTruthClip {
    pub fn validate(&self, num_classes: usize, mask_shape: &[usize]) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.class_id >= num_classes {
                return Err(Error::input(format!(
                    "instance {i}: class id {} outside [0, {num_classes})",
                    inst.class_id
                )));
            }
            if inst.masks.shape() != mask_shape {
                return Err(Error::input(format!(
                    "instance {i}: mask shape {:?}, expected {mask_shape:?}",
                    inst.masks.shape()
                )));
            }
            if inst.masks.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::input(format!("instance {i}: mask is not binary")));
            }
        }
        Ok(())
    }
}

/// Detached prediction values for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionValues {
    /// `[N, 1]`
    pub instance: Tensor,
    /// `[N, K]`
    pub classes: Tensor,
    /// `[N, T, h, w]`
    pub masks: Tensor,
}

impl PredictionValues {
    pub fn num_queries(&self) -> usize {
        self.classes.shape()[0]
    }

    fn mask(&self, n: usize) -> &[f64] {
        let per = self.masks.numel() / self.num_queries().max(1);
        &self.masks.data()[n * per..(n + 1) * per]
    }
}

fn bce(p: f64, y: f64) -> f64 {
    crate::tensor::bce_value(p, y)
}

/// `1 - (2 Σ p g + ε) / (Σ p + Σ g + ε)` over all pixels.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::input(format!(
            "dice: {} predicted vs {} ground-truth pixels",
            pred.len(),
            gt.len()
        )));
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS))
}

/// Pixel-averaged BCE of a soft mask against a binary one.
pub fn mask_bce(pred: &[f64], gt: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| bce(*p, *g)).sum::<f64>() / pred.len() as f64
}

fn class_term(classes: &Tensor, n: usize, class_id: usize, opts: LossOptions) -> f64 {
    let row = classes.row(n);
    if opts.all_class_bce {
        row.iter()
            .enumerate()
            .map(|(k, p)| bce(*p, if k == class_id { 1.0 } else { 0.0 }))
            .sum::<f64>()
            / row.len() as f64
    } else {
        bce(row[class_id], 1.0)
    }
}

/// Matching cost between every prediction and every ground-truth instance.
pub fn pairwise_cost(
    pred: &PredictionValues,
    gt: &GroundTruthClip,
    w: &LossWeights,
    opts: LossOptions,
) -> Result<CostMatrix> {
    let n = pred.num_queries();
    let k = pred.classes.shape()[1];
    let mask_shape = &pred.masks.shape()[1..];
    gt.validate(k, mask_shape)?;
    let g = gt.instances.len();
    let mut costs = Tensor::zeros(&[n, g]);
    for p in 0..n {
        let ins = w.ins * bce(pred.instance.data()[p], 1.0);
        for (j, inst) in gt.instances.iter().enumerate() {
            let cls = w.cls * class_term(&pred.classes, p, inst.class_id, opts);
            let m = pred.mask(p);
            let mask = w.mask * (dice_loss(m, inst.masks.data())? + mask_bce(m, inst.masks.data()));
            costs.set(&[p, j], ins + cls + mask);
        }
    }
    CostMatrix::new(costs)
}

/// Graph handles for one clip's predictions.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    pub instance: Var,
    pub classes: Var,
    pub masks: Var,
}

impl PredictionVars {
    pub fn values(&self, g: &Graph) -> PredictionValues {
        PredictionValues {
            instance: g.value(self.instance).clone(),
            classes: g.value(self.classes).clone(),
            masks: g.value(self.masks).clone(),
        }
    }
}

/// Differentiable dice loss of `pred` against a constant binary mask.
pub fn dice_loss_var(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    if g.value(pred).numel() != gt.numel() {
        return Err(Error::input(format!(
            "dice: prediction {:?} vs ground truth {:?}",
            g.shape(pred),
            gt.shape()
        )));
    }
    let gt_sum: f64 = gt.data().iter().sum();
    let gv = g.constant(gt.reshape(g.shape(pred))?);
    let inter = g.mul(pred, gv)?;
    let inter = g.sum(inter)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let den = g.sum(pred)?;
    let den = g.add_scalar(den, gt_sum + DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// Loss for one clip plus the matching it was computed under.
pub fn training_loss(
    g: &mut Graph,
    pred: &PredictionVars,
    gt: &GroundTruthClip,
    w: &LossWeights,
    opts: LossOptions,
) -> Result<(Var, Assignment)> {
    let values = pred.values(g);
    let costs = pairwise_cost(&values, gt, w, opts)?;
    let assignment = hungarian(&costs);
    let loss = loss_for_assignment(g, pred, gt, w, opts, &assignment)?;
    Ok((loss, assignment))
}

/// The loss under a fixed assignment.
pub fn loss_for_assignment(
    g: &mut Graph,
    pred: &PredictionVars,
    gt: &GroundTruthClip,
    w: &LossWeights,
    opts: LossOptions,
    assignment: &Assignment,
) -> Result<Var> {
    let n = g.shape(pred.classes)[0];
    let k = g.shape(pred.classes)[1];
    let mask_shape = g.shape(pred.masks)[1..].to_vec();
    let per_mask: usize = mask_shape.iter().product();

    let mut ins_target = vec![0.0; n];
    for &(p, _) in &assignment.pairs {
        ins_target[p] = 1.0;
    }
    let ins = g.bce(pred.instance, &ins_target)?;
    let ins = g.sum(ins)?;
    let mut total = g.scale(ins, w.ins)?;

    if !assignment.pairs.is_empty() {
        let cls = if opts.all_class_bce {
            let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
            let sel = g.select_rows(pred.classes, &rows)?;
            let mut target = vec![0.0; rows.len() * k];
            for (i, &(_, j)) in assignment.pairs.iter().enumerate() {
                target[i * k + gt.instances[j].class_id] = 1.0;
            }
            let b = g.bce(sel, &target)?;
            let s = g.sum(b)?;
            g.scale(s, 1.0 / k as f64)?
        } else {
            let index = assignment
                .pairs
                .iter()
                .map(|&(p, j)| Some(p * k + gt.instances[j].class_id))
                .collect::<Vec<_>>();
            let len = index.len();
            let sel = g.gather(pred.classes, index, &[len])?;
            let b = g.bce(sel, &vec![1.0; len])?;
            g.sum(b)?
        };
        let cls = g.scale(cls, w.cls)?;
        total = g.add(total, cls)?;

        for &(p, j) in &assignment.pairs {
            let index = (p * per_mask..(p + 1) * per_mask).map(Some).collect();
            let m = g.gather(pred.masks, index, &[per_mask])?;
            let gt_mask = &gt.instances[j].masks;
            let dice = dice_loss_var(g, m, gt_mask)?;
            let b = g.bce(m, gt_mask.data())?;
            let b = g.mean(b)?;
            let mask = g.add(dice, b)?;
            let mask = g.scale(mask, w.mask)?;
            total = g.add(total, mask)?;
        }
    }
    Ok(g.scale(total, 1.0 / n as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_closed_forms() {
        let ones = vec![1.0; 100];
        assert_eq!(dice_loss(&ones, &ones).unwrap(), 0.0);
        let mut a = vec![1.0; 200];
        let mut b = vec![0.0; 200];
        for i in 100..200 {
            a[i] = 0.0;
            b[i] = 1.0;
        }
        // 1 - (0 + 1) / (100 + 100 + 1)
        assert!((dice_loss(&a, &b).unwrap() - (1.0 - 1.0 / 201.0)).abs() < 1e-15);
        assert!((dice_loss(&a, &b).unwrap() - 0.995).abs() < 1e-3);
        // 1 - (2*2 + 1) / (2 + 4 + 1)
        let half = vec![0.5; 4];
        assert!((dice_loss(&half, &[1.0; 4]).unwrap() - 2.0 / 7.0).abs() < 1e-15);
        assert!(dice_loss(&half, &[1.0; 3]).is_err());
    }

    #[test]
    fn dice_graph_agrees_with_values() {
        let pred = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.4, 0.7, 0.2, 0.5]).unwrap();
        let gt = Tensor::new(vec![2, 3], vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let d = dice_loss_var(&mut g, p, &gt).unwrap();
        assert!((g.value(d).item() - dice_loss(pred.data(), gt.data()).unwrap()).abs() < 1e-15);
    }

    fn gt_one(class_id: usize, mask: Vec<f64>) -> GroundTruthClip {
        let n = mask.len();
        GroundTruthClip {
            instances: vec![GtInstance {
                class_id,
                masks: Tensor::new(vec![1, 1, n], mask).unwrap(),
                track_id: 0,
            }],
        }
    }

    #[test]
    fn single_pair_cost_by_hand() {
        let pred = PredictionValues {
            instance: Tensor::new(vec![1, 1], vec![0.8]).unwrap(),
            classes: Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap(),
            masks: Tensor::new(vec![1, 1, 1, 2], vec![0.9, 0.2]).unwrap(),
        };
        let gt = gt_one(1, vec![1.0, 0.0]);
        let c = pairwise_cost(&pred, &gt, &LossWeights::default(), LossOptions::default()).unwrap();
        // ins: -ln 0.8; cls: -ln 0.7; dice: 1 - (2*0.9 + 1)/(1.1 + 1 + 1) = 1 - 2.8/3.1
        // mask bce: (-ln 0.9 - ln 0.8) / 2
        let expect = 2.0 * -(0.8f64.ln())
            + 2.0 * -(0.7f64.ln())
            + 5.0 * ((1.0 - 2.8 / 3.1) + (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0);
        assert!((c.get(0, 0) - expect).abs() < 1e-12, "{} vs {expect}", c.get(0, 0));
    }

    #[test]
    fn identical_predictions_give_identical_rows() {
        let pred = PredictionValues {
            instance: Tensor::new(vec![2, 1], vec![0.6, 0.6]).unwrap(),
            classes: Tensor::new(vec![2, 2], vec![0.4, 0.6, 0.4, 0.6]).unwrap(),
            masks: Tensor::new(vec![2, 1, 1, 2], vec![0.3, 0.6, 0.3, 0.6]).unwrap(),
        };
        let mut gt = gt_one(0, vec![1.0, 0.0]);
        gt.instances.push(GtInstance {
            class_id: 1,
            masks: Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap(),
            track_id: 1,
        });
        let c = pairwise_cost(&pred, &gt, &LossWeights::default(), LossOptions::default()).unwrap();
        assert_eq!(c.tensor().row(0), c.tensor().row(1));
    }

    #[test]
    fn perfect_prediction_cost_vanishes() {
        for eps in [1e-3, 1e-6, 1e-9] {
            let pred = PredictionValues {
                instance: Tensor::new(vec![1, 1], vec![1.0 - eps]).unwrap(),
                classes: Tensor::new(vec![1, 2], vec![eps, 1.0 - eps]).unwrap(),
                masks: Tensor::new(vec![1, 1, 1, 2], vec![1.0 - eps, eps]).unwrap(),
            };
            let c = pairwise_cost(&pred, &gt_one(1, vec![1.0, 0.0]), &LossWeights::default(), LossOptions::default())
                .unwrap();
            assert!(c.get(0, 0) < 50.0 * eps, "eps {eps}: {}", c.get(0, 0));
        }
    }

    #[test]
    fn class_id_out_of_range() {
        let pred = PredictionValues {
            instance: Tensor::new(vec![1, 1], vec![0.5]).unwrap(),
            classes: Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(),
            masks: Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap(),
        };
        assert!(pairwise_cost(&pred, &gt_one(2, vec![1.0, 0.0]), &LossWeights::default(), LossOptions::default()).is_err());
    }

    fn vars(g: &mut Graph, v: &PredictionValues) -> PredictionVars {
        PredictionVars {
            instance: g.leaf(v.instance.clone()),
            classes: g.leaf(v.classes.clone()),
            masks: g.leaf(v.masks.clone()),
        }
    }

    fn two_queries() -> PredictionValues {
        PredictionValues {
            instance: Tensor::new(vec![2, 1], vec![0.8, 0.3]).unwrap(),
            classes: Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.6, 0.4]).unwrap(),
            masks: Tensor::new(vec![2, 1, 1, 2], vec![0.9, 0.2, 0.1, 0.5]).unwrap(),
        }
    }

    #[test]
    fn toy_training_loss_by_hand() {
        let v = two_queries();
        let gt = gt_one(1, vec![1.0, 0.0]);
        let mut g = Graph::new();
        let pv = vars(&mut g, &v);
        let (loss, a) = training_loss(&mut g, &pv, &gt, &LossWeights::default(), LossOptions::default()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let matched = 2.0 * -(0.8f64.ln())
            + 2.0 * -(0.7f64.ln())
            + 5.0 * ((1.0 - 2.8 / 3.1) + (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0);
        let unmatched = 2.0 * -(0.7f64.ln());
        let expect = (matched + unmatched) / 2.0;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_supervises_only_instance_scores() {
        let v = two_queries();
        let mut g = Graph::new();
        let pv = vars(&mut g, &v);
        let (loss, a) = training_loss(&mut g, &pv, &GroundTruthClip::default(), &LossWeights::default(), LossOptions::default())
            .unwrap();
        assert!(a.pairs.is_empty());
        let expect = 2.0 * (-(0.2f64.ln()) - 0.7f64.ln()) / 2.0;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
        g.backward(loss).unwrap();
        assert!(g.grad(pv.classes).map_or(true, |t| t.data().iter().all(|x| *x == 0.0)));
        assert!(g.grad(pv.masks).map_or(true, |t| t.data().iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn loss_gradient_under_fixed_matching() {
        use crate::tensor::{grad_check, DEFAULT_EPS};
        let v = two_queries();
        let gt = gt_one(1, vec![1.0, 0.0]);
        for opts in [LossOptions::default(), LossOptions { all_class_bce: true }] {
            let mut g = Graph::new();
            let pv = vars(&mut g, &v);
            let (_, a) = training_loss(&mut g, &pv, &gt, &LossWeights::default(), opts).unwrap();
            let err = grad_check(
                |g, m| {
                    let pv = PredictionVars {
                        instance: g.constant(v.instance.clone()),
                        classes: g.constant(v.classes.clone()),
                        masks: m,
                    };
                    loss_for_assignment(g, &pv, &gt, &LossWeights::default(), opts, &a)
                },
                &v.masks,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
            let err = grad_check(
                |g, c| {
                    let pv = PredictionVars {
                        instance: g.constant(v.instance.clone()),
                        classes: c,
                        masks: g.constant(v.masks.clone()),
                    };
                    loss_for_assignment(g, &pv, &gt, &LossWeights::default(), opts, &a)
                },
                &v.classes,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }
}
