//! Per-target tracking loop.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::head::{hanning2d, postprocess, ScoreMaps, Selection};
use crate::image::{crop_and_resize, frame_dims, CropGeometry};
use crate::model::{min_max_normalize, Model};
use crate::tensor::Tensor;

/// Smallest box side the tracker will report, in frame pixels.
pub const MIN_BOX_SIDE: f64 = 4.0;

pub trait Tracker {
    fn init(&mut self, frame: &Tensor, bbox: BBox) -> Result<()>;
    /// Returns the new box and a confidence in `[0, 1]`.
    fn update(&mut self, frame: &Tensor) -> Result<(BBox, f64)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub current: BBox,
    /// Fused template map, fixed after initialization.
    pub template_fused: Tensor,
    pub frame_index: usize,
    pub last_confidence: f64,
}

/// Keeps the center inside the frame and each side within
/// `[MIN_BOX_SIDE, frame side]`.
pub fn clamp_to_frame(b: &BBox, h: usize, w: usize) -> BBox {
    let (fw, fh) = (w as f64, h as f64);
    BBox::new(
        b.cx.clamp(0.0, fw),
        b.cy.clamp(0.0, fh),
        b.w.clamp(MIN_BOX_SIDE.min(fw), fw),
        b.h.clamp(MIN_BOX_SIDE.min(fh), fh),
    )
}

pub struct SiamTracker<'m> {
    model: &'m Model,
    window: Tensor,
    state: Option<TrackerState>,
}

impl<'m> SiamTracker<'m> {
    pub fn new(model: &'m Model) -> Result<Self> {
        let g = model.cfg.score_geometry()?;
        Ok(SiamTracker {
            model,
            window: hanning2d(g.cols, g.rows),
            state: None,
        })
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    fn require_state(&self) -> Result<&TrackerState> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("tracker used before init".into()))
    }

    pub fn search_geometry(&self) -> Result<CropGeometry> {
        let cfg = &self.model.cfg;
        CropGeometry::around(
            &self.require_state()?.current,
            cfg.search_context,
            cfg.search_res,
        )
    }

    /// Score maps for `frame` around the current box, without changing state.
    pub fn score(&self, frame: &Tensor) -> Result<(ScoreMaps, CropGeometry)> {
        let state = self.require_state()?;
        let geom = self.search_geometry()?;
        let crop = crop_and_resize(frame, &geom)?;
        Ok((self.model.score(&crop, &state.template_fused)?, geom))
    }

    pub fn select(&self, maps: &ScoreMaps, crop: &CropGeometry) -> Result<Selection> {
        let state = self.require_state()?;
        let cfg = &self.model.cfg;
        postprocess(
            maps,
            &state.current,
            crop,
            &cfg.score_geometry()?,
            &self.window,
            &cfg.post,
        )
    }

    /// Head-averaged attention of the central query over P3, P4 and P5 of the
    /// search crop, before normalization.
    pub fn attention_rows(&self, frame: &Tensor) -> Result<[Tensor; 3]> {
        let geom = self.search_geometry()?;
        self.model
            .lateral_attention(&crop_and_resize(frame, &geom)?)
    }

    /// [`Self::attention_rows`] min-max normalized to `[0, 1]`.
    pub fn export_attention(&self, frame: &Tensor) -> Result<[Tensor; 3]> {
        Ok(self.attention_rows(frame)?.map(|m| min_max_normalize(&m)))
    }
}

impl Tracker for SiamTracker<'_> {
    fn init(&mut self, frame: &Tensor, bbox: BBox) -> Result<()> {
        bbox.validate()?;
        let (h, w) = frame_dims(frame)?;
        let bbox = clamp_to_frame(&bbox, h, w);
        let cfg = &self.model.cfg;
        let geom = CropGeometry::around(&bbox, cfg.template_context, cfg.template_res)?;
        let template = crop_and_resize(frame, &geom)?;
        self.state = Some(TrackerState {
            current: bbox,
            template_fused: self.model.template_feature(&template)?,
            frame_index: 0,
            last_confidence: 1.0,
        });
        Ok(())
    }

    fn update(&mut self, frame: &Tensor) -> Result<(BBox, f64)> {
        let (h, w) = frame_dims(frame)?;
        let (maps, geom) = self.score(frame)?;
        let sel = self.select(&maps, &geom)?;
        let bbox = clamp_to_frame(&sel.bbox, h, w);
        let state = self.state.as_mut().expect("checked by score");
        state.current = bbox;
        state.frame_index += 1;
        state.last_confidence = sel.confidence;
        Ok((bbox, sel.confidence))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn frame() -> Tensor {
        Tensor::from_fn([120, 160, 3], |i| ((i * 7919) % 255) as f64 / 255.0)
    }

    #[test]
    fn init_caches_template_and_box() {
        let m = Model::new(ModelConfig::toy(8, 2, 1)).unwrap();
        let b = BBox::new(70.0, 60.0, 30.0, 20.0);
        let mut a = SiamTracker::new(&m).unwrap();
        let mut c = SiamTracker::new(&m).unwrap();
        a.init(&frame(), b).unwrap();
        c.init(&frame(), b).unwrap();
        let s = a.state().unwrap();
        assert_eq!(s.current, b);
        assert_eq!(s.template_fused.shape(), &[5, 5, 8]);
        assert_eq!(s.template_fused, c.state().unwrap().template_fused);
    }

    #[test]
    fn update_is_deterministic_and_keeps_template() {
        let m = Model::new(ModelConfig::toy(8, 2, 1)).unwrap();
        let mut t = SiamTracker::new(&m).unwrap();
        t.init(&frame(), BBox::new(70.0, 60.0, 30.0, 20.0)).unwrap();
        let before = t.state().unwrap().clone();
        let (b1, c1) = t.update(&frame()).unwrap();
        assert_eq!(before.template_fused, t.state().unwrap().template_fused);
        assert!((0.0..=1.0).contains(&c1));
        let mut u = SiamTracker::new(&m).unwrap();
        u.init(&frame(), before.current).unwrap();
        assert_eq!(u.update(&frame()).unwrap(), (b1, c1));
    }

    #[test]
    fn update_before_init_fails() {
        let m = Model::new(ModelConfig::toy(8, 2, 1)).unwrap();
        assert!(SiamTracker::new(&m).unwrap().update(&frame()).is_err());
    }

    #[test]
    fn clamping_keeps_boxes_in_frame() {
        let b = clamp_to_frame(&BBox::new(-10.0, 500.0, 1000.0, 0.5), 100, 200);
        assert_eq!(b, BBox::new(0.0, 100.0, 200.0, MIN_BOX_SIDE));
    }
}
