//! Anchor-free classification/regression head and score postprocessing.
//!
//! The fused search map is correlated with the fused template map channel by
//! channel. Two conv branches turn the correlation map into foreground logits
//! (`cls`, channel 0 background, channel 1 foreground) and distances to the
//! four box sides (`reg`, `l t r b`, in search-crop pixels).

use crate::autograd::{Ctx, Var};
use crate::bbox::BBox;
use crate::counter::{in_category, Category};
use crate::error::{Error, Result};
use crate::image::CropGeometry;
use crate::ops::ConvSpec;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BRANCH_BLOCKS: usize = 3;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    /// Shift applied after normalization.
    shift: ParamId,
}

/// Normalizes every channel of an `[h, w, C]` map over its spatial positions,
/// then adds a per-channel shift. Per-channel gain is left to the following
/// convolution.
pub fn spatial_norm<'t>(cx: Ctx<'t>, x: Var<'t>, shift: ParamId) -> Result<Var<'t>> {
    let shape = x.shape();
    let [h, w, c] = shape[..] else {
        return Err(Error::shape(
            "spatial_norm",
            format!("expected [h,w,c], got {shape:?}"),
        ));
    };
    let n = h * w;
    let rows = x.reshape(&[n, c])?.transpose()?;
    let normed = rows.layer_norm(
        cx.constant(Tensor::ones([n])),
        cx.constant(Tensor::zeros([n])),
        NORM_EPS,
    )?;
    normed
        .transpose()?
        .add_bias(cx.p(shift))?
        .reshape(&[h, w, c])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    blocks: Vec<ConvBlock>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Branch {
    fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, c: usize, out: usize) -> Self {
        let blocks = (0..BRANCH_BLOCKS)
            .map(|i| ConvBlock {
                weight: store.add(format!("{prefix}.conv{i}.w"), init.conv(3, c, c)),
                bias: store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros([c])),
                shift: store.add(format!("{prefix}.norm{i}.beta"), Tensor::zeros([c])),
            })
            .collect();
        Branch {
            blocks,
            out_w: store.add(format!("{prefix}.out.w"), init.conv(1, c, out)),
            out_b: store.add(format!("{prefix}.out.b"), Tensor::zeros([out])),
        }
    }

    fn apply<'t>(&self, cx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut x = x;
        for b in &self.blocks {
            x = x.conv2d(cx.p(b.weight), Some(cx.p(b.bias)), ConvSpec::new(1, 1))?;
            x = spatial_norm(cx, x, b.shift)?.relu()?;
        }
        x.conv2d(
            cx.p(self.out_w),
            Some(cx.p(self.out_b)),
            ConvSpec::new(1, 0),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub cls: Branch,
    pub reg: Branch,
    /// Multiplier from raw regression outputs to crop pixels.
    pub reg_scale: f64,
}

impl HeadParams {
    /// `reg_scale` is normally the search resolution, so raw regression
    /// outputs are fractions of the crop side.
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize, reg_scale: f64) -> Self {
        let cls = Branch::new(store, init, "head.cls", channels, 2);
        let reg = Branch::new(store, init, "head.reg", channels, 4);
        // Start from boxes about a quarter of the crop wide.
        store.get_mut(reg.out_b).data_mut().fill(0.125);
        HeadParams {
            cls,
            reg,
            reg_scale,
        }
    }
}

#[derive(Clone, Copy)]
pub struct ScoreVars<'t> {
    pub cls: Var<'t>,
    pub reg: Var<'t>,
}

impl ScoreVars<'_> {
    pub fn to_maps(&self) -> ScoreMaps {
        ScoreMaps {
            cls: self.cls.to_tensor(),
            reg: self.reg.to_tensor(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps {
    /// `[h, w, 2]` logits.
    pub cls: Tensor,
    /// `[h, w, 4]` side distances in crop pixels, before clamping.
    pub reg: Tensor,
}

impl ScoreMaps {
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (h, w, c) = self.cls.dims3("score maps")?;
        let (rh, rw, rc) = self.reg.dims3("score maps")?;
        if c != 2 || rc != 4 || (h, w) != (rh, rw) {
            return Err(Error::shape(
                "score maps",
                format!("cls {:?}, reg {:?}", self.cls.shape(), self.reg.shape()),
            ));
        }
        Ok((h, w))
    }

    /// Foreground probability per cell.
    pub fn foreground(&self) -> Result<Tensor> {
        let (h, w) = self.dims()?;
        let fg = self
            .cls
            .data()
            .chunks(2)
            .map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp()))
            .collect();
        Tensor::new([h, w], fg)?.check_finite("foreground")
    }

    pub fn distances(&self, i: usize, j: usize) -> [f64; 4] {
        let w = self.reg.shape()[1];
        let d = &self.reg.data()[(i * w + j) * 4..(i * w + j + 1) * 4];
        [d[0], d[1], d[2], d[3]]
    }
}

pub fn correlate<'t>(search: Var<'t>, template: Var<'t>) -> Result<Var<'t>> {
    in_category(Category::Correlation, || search.xcorr(template))
}

pub fn head_forward<'t>(cx: Ctx<'t>, corr: Var<'t>, params: &HeadParams) -> Result<ScoreVars<'t>> {
    in_category(Category::Conv, || {
        let cls = params.cls.apply(cx, corr)?;
        let reg = params.reg.apply(cx, corr)?.scale(params.reg_scale)?;
        Ok(ScoreVars { cls, reg })
    })
}

/// Where each correlation cell sits inside the search crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Crop pixels per search-feature cell.
    pub stride: f64,
    /// Feature-cell offset of correlation cell `(0, 0)`.
    pub offset: f64,
    pub search_res: usize,
}

impl ScoreGeometry {
    pub fn new(search_res: usize, search_feat: usize, template_feat: usize) -> Result<Self> {
        if template_feat == 0 || template_feat > search_feat {
            return Err(Error::InvalidArgument(format!(
                "template map {template_feat} does not fit search map {search_feat}"
            )));
        }
        let n = search_feat - template_feat + 1;
        Ok(ScoreGeometry {
            rows: n,
            cols: n,
            stride: search_res as f64 / search_feat as f64,
            offset: (template_feat - 1) as f64 / 2.0,
            search_res,
        })
    }

    /// Crop-pixel location `(x, y)` of cell `(i, j)`.
    pub fn point(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (j as f64 + self.offset + 0.5) * self.stride,
            (i as f64 + self.offset + 0.5) * self.stride,
        )
    }

    /// Box in crop pixels from side distances at cell `(i, j)`. Distances are
    /// clipped at zero, the box is clamped to the crop and kept at least one
    /// pixel wide.
    pub fn decode(&self, i: usize, j: usize, d: [f64; 4]) -> BBox {
        let (px, py) = self.point(i, j);
        let s = self.search_res as f64;
        let [l, t, r, b] = d.map(|v| v.max(0.0));
        let span = |lo: f64, hi: f64| {
            let (lo, hi) = (lo.clamp(0.0, s), hi.clamp(0.0, s));
            if hi - lo >= 1.0 {
                (lo, hi)
            } else {
                let c = ((lo + hi) / 2.0).clamp(0.5, s - 0.5);
                (c - 0.5, c + 0.5)
            }
        };
        let (x0, x1) = span(px - l, px + r);
        let (y0, y1) = span(py - t, py + b);
        BBox::from_corners(x0, y0, x1, y1)
    }
}

/// 1-D Hann window `0.5 − 0.5·cos(2πi/(n−1))`.
pub fn hanning(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// `[h, w]` outer product of 1-D windows.
pub fn hanning2d(w: usize, h: usize) -> Tensor {
    let (wx, wy) = (hanning(w), hanning(h));
    Tensor::from_fn([h, w], |k| wy[k / w] * wx[k % w])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub window_influence: f64,
    pub penalty_k: f64,
    pub lr: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            window_influence: 0.45,
            penalty_k: 0.04,
            lr: 0.33,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.window_influence)
            || !unit.contains(&self.lr)
            || !(self.penalty_k >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid postprocess settings {self:?}"
            )));
        }
        Ok(())
    }
}

fn padded_size(w: f64, h: f64) -> f64 {
    let pad = (w + h) / 2.0;
    ((w + pad) * (h + pad)).sqrt()
}

fn change(r: f64) -> f64 {
    r.max(1.0 / r)
}

/// Multiplicative penalty for moving from `prev` to `(w, h)`; sizes floor at 1.
pub fn scale_penalty(k: f64, prev: (f64, f64), w: f64, h: f64) -> f64 {
    let (pw, ph) = (prev.0.max(1.0), prev.1.max(1.0));
    let (w, h) = (w.max(1.0), h.max(1.0));
    let s_c = change(padded_size(w, h) / padded_size(pw, ph));
    let r_c = change((pw / ph) / (w / h));
    (-k * (r_c * s_c - 1.0)).exp()
}

/// `(1−α)·penalty·fg + α·window` for every cell. `prev` is the previous box
/// size in crop pixels.
pub fn final_scores(
    fg: &Tensor,
    maps: &ScoreMaps,
    geom: &ScoreGeometry,
    prev: (f64, f64),
    window: &Tensor,
    cfg: &PostprocessConfig,
) -> Result<Tensor> {
    let (h, w) = fg.dims2("final_scores")?;
    if window.shape() != [h, w] || maps.dims()? != (h, w) {
        return Err(Error::shape(
            "final_scores",
            format!("fg {:?}, window {:?}", fg.shape(), window.shape()),
        ));
    }
    let a = cfg.window_influence;
    let out = Tensor::from_fn([h, w], |k| {
        let (i, j) = (k / w, k % w);
        let b = geom.decode(i, j, maps.distances(i, j));
        let p = scale_penalty(cfg.penalty_k, prev, b.w, b.h);
        (1.0 - a) * p * fg.data()[k] + a * window.data()[k]
    });
    out.check_finite("postprocess")
}

/// First index of the maximum.
pub fn argmax2d(t: &Tensor) -> (usize, usize) {
    let w = t.shape()[1];
    let mut best = 0;
    for (k, &v) in t.data().iter().enumerate() {
        if v > t.data()[best] {
            best = k;
        }
    }
    (best / w, best % w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    /// Smoothed box in frame pixels.
    pub bbox: BBox,
    /// Raw decoded box in frame pixels.
    pub decoded: BBox,
    pub confidence: f64,
    pub cell: (usize, usize),
}

/// Picks the best cell and turns its box into frame coordinates. The center
/// follows the decoded box; the size is blended with `prev` by `cfg.lr`.
pub fn postprocess(
    maps: &ScoreMaps,
    prev: &BBox,
    crop: &CropGeometry,
    geom: &ScoreGeometry,
    window: &Tensor,
    cfg: &PostprocessConfig,
) -> Result<Selection> {
    let fg = maps.foreground()?;
    let s = crop.scale();
    let scores = final_scores(&fg, maps, geom, (prev.w / s, prev.h / s), window, cfg)?;
    let (i, j) = argmax2d(&scores);
    let decoded = crop.box_to_frame(&geom.decode(i, j, maps.distances(i, j)));
    let bbox = BBox::new(
        decoded.cx,
        decoded.cy,
        cfg.lr * decoded.w + (1.0 - cfg.lr) * prev.w,
        cfg.lr * decoded.h + (1.0 - cfg.lr) * prev.h,
    );
    Ok(Selection {
        bbox,
        decoded,
        confidence: fg.get(&[i, j]),
        cell: (i, j),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::selftest::gradcheck::{check_store_gradients, GradCheckOptions};

    fn spike_maps(n: usize, at: (usize, usize), d: [f64; 4]) -> ScoreMaps {
        let mut cls = Tensor::zeros([n, n, 2]);
        cls.set(&[at.0, at.1, 1], 8.0);
        let reg = Tensor::from_fn([n, n, 4], |k| d[k % 4]);
        ScoreMaps { cls, reg }
    }

    #[test]
    fn hanning_values() {
        let h = hanning(3);
        assert!(h[0].abs() < 1e-15 && (h[1] - 1.0).abs() < 1e-15 && h[2].abs() < 1e-15);
        assert_eq!(hanning(1), vec![1.0]);
        let w = hanning(12);
        for i in 0..12 {
            assert!((w[i] - w[11 - i]).abs() < 1e-15);
        }
        let win = hanning2d(7, 5);
        assert_eq!(win.shape(), &[5, 7]);
        assert!((win.get(&[2, 3]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let mut store = ParamStore::new();
        let head = HeadParams::new(&mut store, &mut Init::new(0), 4, 256.0);
        store.zero_all();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let corr = tape.constant(Tensor::from_fn([6, 5, 4], |i| i as f64 * 0.01));
        let out = head_forward(cx, corr, &head).unwrap().to_maps();
        assert_eq!(out.cls.shape(), &[6, 5, 2]);
        assert_eq!(out.reg.shape(), &[6, 5, 4]);
        assert!(out.cls.max_abs() == 0.0);
        assert!(out.foreground().unwrap().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn head_gradients_through_both_branches() {
        let mut store = ParamStore::new();
        let head = HeadParams::new(&mut store, &mut Init::new(3), 3, 2.0);
        let corr = Tensor::uniform([4, 4, 3], -1.0, 1.0, Init::new(4).rng());
        let report = check_store_gradients(
            &store,
            GradCheckOptions {
                seed: 1,
                coords_per_param: Some(6),
            },
            |tape, store| {
                let cx = Ctx::new(tape, store);
                let s = head_forward(cx, tape.constant(corr.clone()), &head)?;
                let a = s.cls.flatten_tokens()?.sum()?;
                let b = s.reg.flatten_tokens()?.relu()?.sum()?;
                a.add(b)
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn full_window_picks_window_peak() {
        let geom = ScoreGeometry::new(256, 16, 5).unwrap();
        let maps = spike_maps(12, (0, 11), [10.0; 4]);
        let crop = CropGeometry {
            cx: 100.0,
            cy: 80.0,
            side: 256.0,
            out_res: 256,
        };
        let win = hanning2d(12, 12);
        let cfg = PostprocessConfig {
            window_influence: 1.0,
            ..Default::default()
        };
        let sel = postprocess(
            &maps,
            &BBox::new(100.0, 80.0, 20.0, 20.0),
            &crop,
            &geom,
            &win,
            &cfg,
        )
        .unwrap();
        let peak = win.data().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(win.get(&[sel.cell.0, sel.cell.1]), peak);
        assert!((4..=7).contains(&sel.cell.0) && (4..=7).contains(&sel.cell.1));
    }

    #[test]
    fn spike_decodes_to_hand_computed_center() {
        let geom = ScoreGeometry::new(256, 16, 5).unwrap();
        let (i, j) = (3, 9);
        let maps = spike_maps(12, (i, j), [0.0; 4]);
        let crop = CropGeometry {
            cx: 300.0,
            cy: 200.0,
            side: 128.0,
            out_res: 256,
        };
        let cfg = PostprocessConfig {
            window_influence: 0.0,
            penalty_k: 0.0,
            lr: 1.0,
        };
        let win = hanning2d(12, 12);
        let sel = postprocess(
            &maps,
            &BBox::new(300.0, 200.0, 32.0, 32.0),
            &crop,
            &geom,
            &win,
            &cfg,
        )
        .unwrap();
        assert_eq!(sel.cell, (i, j));
        let (x0, y0) = crop.origin();
        let f = crop.scale();
        assert!((sel.bbox.cx - (x0 + (j as f64 + 2.5) * 16.0 * f)).abs() < 1e-9);
        assert!((sel.bbox.cy - (y0 + (i as f64 + 2.5) * 16.0 * f)).abs() < 1e-9);
        assert!((sel.confidence - 1.0 / (1.0 + (-8.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn centered_cells_map_to_crop_center() {
        let geom = ScoreGeometry::new(256, 16, 5).unwrap();
        let (a, _) = geom.point(5, 5);
        let (b, _) = geom.point(6, 6);
        assert_eq!((a + b) / 2.0, 128.0);
    }

    #[test]
    fn decoded_boxes_stay_inside_crop() {
        let geom = ScoreGeometry::new(256, 16, 5).unwrap();
        for d in [[1e4, 1e4, 1e4, 1e4], [-5.0, 0.0, -1.0, 3.0], [0.0; 4]] {
            for (i, j) in [(0, 0), (11, 11), (4, 7)] {
                let [x0, y0, x1, y1] = geom.decode(i, j, d).corners();
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 256.0 && y1 <= 256.0);
                assert!(x1 - x0 >= 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn no_penalty_no_window_is_plain_argmax() {
        let geom = ScoreGeometry::new(256, 16, 5).unwrap();
        let mut maps = spike_maps(12, (7, 2), [30.0, 10.0, 5.0, 60.0]);
        maps.cls.set(&[1, 1, 1], 7.9);
        let fg = maps.foreground().unwrap();
        let cfg = PostprocessConfig {
            window_influence: 0.0,
            penalty_k: 0.0,
            lr: 0.5,
        };
        let s = final_scores(&fg, &maps, &geom, (40.0, 40.0), &hanning2d(12, 12), &cfg).unwrap();
        assert_eq!(argmax2d(&s), (7, 2));
    }

    #[test]
    fn penalty_is_one_for_unchanged_size() {
        assert_eq!(scale_penalty(0.04, (30.0, 10.0), 30.0, 10.0), 1.0);
        assert!(scale_penalty(0.04, (30.0, 10.0), 10.0, 30.0) < 1.0);
        assert!(scale_penalty(0.04, (30.0, 10.0), 60.0, 20.0) < 1.0);
    }
}
