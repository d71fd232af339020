//! Training targets and the weighted classification + GIoU + L1 objective.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::head::ScoreGeometry;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub iou: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 5.0,
            iou: 5.0,
            reg: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.iou, self.reg].iter().all(|w| *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be nonnegative: {self:?}"
            )))
        }
    }
}

/// Per-cell targets for one search crop.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMaps {
    pub rows: usize,
    pub cols: usize,
    pub positive: Vec<bool>,
    /// `[rows, cols, 4]` distances `l t r b` in crop pixels; zero at negatives.
    pub reg_target: Tensor,
    /// Crop side, used to normalize the L1 term.
    pub search_res: f64,
}

impl LabelMaps {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn positive_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positive
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(k, _)| (k / self.cols, k % self.cols))
    }

    pub fn target(&self, i: usize, j: usize) -> [f64; 4] {
        let d = &self.reg_target.data()[(i * self.cols + j) * 4..][..4];
        [d[0], d[1], d[2], d[3]]
    }
}

/// Marks a cell positive when its crop location lies inside `gt` shrunk to
/// half its size. If no cell qualifies, the cell nearest the box center is
/// used, preferring cells inside the full box.
pub fn assign_labels(gt: &BBox, geom: &ScoreGeometry) -> Result<LabelMaps> {
    gt.validate()?;
    let s = geom.search_res as f64;
    let [x0, y0, x1, y1] = gt.corners();
    if x1 <= 0.0 || y1 <= 0.0 || x0 >= s || y0 >= s {
        return Err(Error::InvalidArgument(format!(
            "ground truth {gt:?} lies outside the crop"
        )));
    }
    let (rows, cols) = (geom.rows, geom.cols);
    let core = gt.scaled(0.5);
    let mut positive: Vec<bool> = (0..rows * cols)
        .map(|k| {
            let (x, y) = geom.point(k / cols, k % cols);
            core.contains(x, y)
        })
        .collect();
    if !positive.contains(&true) {
        let key = |k: usize| {
            let (x, y) = geom.point(k / cols, k % cols);
            (!gt.contains(x, y), (x - gt.cx).hypot(y - gt.cy))
        };
        let best = (0..rows * cols)
            .min_by(|&a, &b| key(a).partial_cmp(&key(b)).expect("finite distances"))
            .expect("non-empty map");
        positive[best] = true;
    }
    let mut reg = vec![0.0; rows * cols * 4];
    for (k, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
        let (x, y) = geom.point(k / cols, k % cols);
        reg[k * 4..k * 4 + 4].copy_from_slice(&[x - x0, y - y0, x1 - x, y1 - y]);
    }
    Ok(LabelMaps {
        rows,
        cols,
        positive,
        reg_target: Tensor::new([rows, cols, 4], reg)?,
        search_res: s,
    })
}

fn check_map(v: Var<'_>, labels: &LabelMaps, depth: usize, op: &'static str) -> Result<()> {
    let shape = v.shape();
    if shape != [labels.rows, labels.cols, depth] {
        return Err(Error::shape(
            op,
            format!(
                "expected [{}, {}, {depth}], got {shape:?}",
                labels.rows, labels.cols
            ),
        ));
    }
    Ok(())
}

/// Mean two-class softmax cross-entropy over all cells.
pub fn cls_loss<'t>(cls: Var<'t>, labels: &LabelMaps) -> Result<Var<'t>> {
    check_map(cls, labels, 2, "cls_loss")?;
    let n = labels.positive.len() as f64;
    let (value, probs) = {
        let logits = cls.value();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(labels.positive.len() * 2);
        for (l, &pos) in logits.data().chunks(2).zip(&labels.positive) {
            let m = l[0].max(l[1]);
            let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
            total += lse - l[pos as usize];
            probs.push((l[0] - lse).exp());
            probs.push((l[1] - lse).exp());
        }
        (total / n, probs)
    };
    let pos = labels.positive.clone();
    let shape = [labels.rows, labels.cols, 2];
    cls.tape()
        .custom(&[cls], Tensor::scalar(value), move |g, _| {
            let g = g.data()[0] / n;
            let mut d = probs.clone();
            for (k, &p) in pos.iter().enumerate() {
                d[k * 2 + p as usize] -= 1.0;
            }
            vec![Tensor::new(shape, d.into_iter().map(|v| v * g).collect()).expect("shape")]
        })
}

/// GIoU of two boxes given as distances from a shared anchor point, with its
/// gradient with respect to the first box's distances.
pub fn giou_ltrb(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let [pl, pt, pr, pb] = p;
    let [tl, tt, tr, tb] = t;
    let ap = (pl + pr) * (pt + pb);
    let ag = (tl + tr) * (tt + tb);
    let iw = (pl.min(tl) + pr.min(tr)).max(0.0);
    let ih = (pt.min(tt) + pb.min(tb)).max(0.0);
    let inter = iw * ih;
    let union = ap + ag - inter;
    let ew = pl.max(tl) + pr.max(tr);
    let eh = pt.max(tt) + pb.max(tb);
    let enclose = ew * eh;
    let g = inter / union + union / enclose - 1.0;

    let d_inter = (union + inter) / (union * union) - 1.0 / enclose;
    let d_ap = -inter / (union * union) + 1.0 / enclose;
    let d_enc = -union / (enclose * enclose);
    // Horizontal pair (l, r) then vertical pair (t, b).
    let side =
        |pv: f64, tv: f64, inter_span: f64, other_inter: f64, other_p: f64, other_enc: f64| {
            let d_i = if inter_span > 0.0 && pv <= tv {
                other_inter
            } else {
                0.0
            };
            let d_e = if pv > tv { other_enc } else { 0.0 };
            d_inter * d_i + d_ap * other_p + d_enc * d_e
        };
    let grad = [
        side(pl, tl, iw, ih, pt + pb, eh),
        side(pt, tt, ih, iw, pl + pr, ew),
        side(pr, tr, iw, ih, pt + pb, eh),
        side(pb, tb, ih, iw, pl + pr, ew),
    ];
    (g, grad)
}

/// Mean `1 − GIoU` over positive cells between `relu(reg)` and the targets.
pub fn giou_loss<'t>(reg: Var<'t>, labels: &LabelMaps) -> Result<Var<'t>> {
    check_map(reg, labels, 4, "giou_loss")?;
    let cells: Vec<usize> = labels
        .positive_cells()
        .map(|(i, j)| i * labels.cols + j)
        .collect();
    if cells.is_empty() {
        return reg.tape().custom(&[reg], Tensor::scalar(0.0), |_, p| {
            vec![Tensor::zeros(p[0].shape())]
        });
    }
    let n = cells.len() as f64;
    let target = labels.reg_target.clone();
    let eval = move |raw: &Tensor| -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut grad = vec![0.0; raw.len()];
        for &k in &cells {
            let r = &raw.data()[k * 4..k * 4 + 4];
            let p = [r[0], r[1], r[2], r[3]].map(|v| v.max(0.0));
            let t = &target.data()[k * 4..k * 4 + 4];
            let (g, dg) = giou_ltrb(p, [t[0], t[1], t[2], t[3]]);
            total += 1.0 - g;
            for c in 0..4 {
                if r[c] > 0.0 {
                    grad[k * 4 + c] = -dg[c] / n;
                }
            }
        }
        (total / n, grad)
    };
    let value = eval(&reg.value()).0;
    let shape = reg.shape();
    reg.tape()
        .custom(&[reg], Tensor::scalar(value), move |g, p| {
            let (_, grad) = eval(p[0]);
            let g = g.data()[0];
            vec![
                Tensor::new(shape.clone(), grad.into_iter().map(|v| v * g).collect())
                    .expect("shape"),
            ]
        })
}

/// Mean absolute error over the four distances of every positive cell, with
/// predictions and targets divided by the crop side.
pub fn l1_loss<'t>(reg: Var<'t>, labels: &LabelMaps) -> Result<Var<'t>> {
    check_map(reg, labels, 4, "l1_loss")?;
    let cells: Vec<usize> = labels
        .positive_cells()
        .map(|(i, j)| i * labels.cols + j)
        .collect();
    let s = labels.search_res;
    let n = (cells.len() * 4).max(1) as f64;
    let mut sign = vec![0.0; labels.positive.len() * 4];
    let mut total = 0.0;
    {
        let raw = reg.value();
        for &k in &cells {
            for c in k * 4..k * 4 + 4 {
                let d = (raw.data()[c] - labels.reg_target.data()[c]) / s;
                total += d.abs();
                sign[c] = d.signum() / (s * n);
            }
        }
    }
    let shape = reg.shape();
    reg.tape()
        .custom(&[reg], Tensor::scalar(total / n), move |g, _| {
            let g = g.data()[0];
            vec![Tensor::new(shape.clone(), sign.iter().map(|v| v * g).collect()).expect("shape")]
        })
}

pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

pub fn total_loss<'t>(
    cls: Var<'t>,
    reg: Var<'t>,
    labels: &LabelMaps,
    w: &LossWeights,
) -> Result<LossTerms<'t>> {
    let c = cls_loss(cls, labels)?;
    let g = giou_loss(reg, labels)?;
    let l = l1_loss(reg, labels)?;
    let (cv, gv, lv) = (c.item()?, g.item()?, l.item()?);
    let total = c.scale(w.cls)?.add(g.scale(w.iou)?)?.add(l.scale(w.reg)?)?;
    Ok(LossTerms {
        total,
        cls: cv,
        giou: gv,
        l1: lv,
    })
}
