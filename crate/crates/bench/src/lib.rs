//! Seeded inputs shared by the kernel benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use siamtpn_core::attention::{AttentionOptions, MhaParams};
use siamtpn_core::image::{crop_and_resize, CropGeometry};
use siamtpn_core::model::{Model, ModelConfig};
use siamtpn_core::params::{Init, ParamStore};
use siamtpn_core::synth::{synth_sequence, SequenceSpec};
use siamtpn_core::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One attention layer with its inputs: `n_q` query tokens over an
/// `side × side` key/value map, all `channels` wide.
pub struct AttentionFixture {
    pub store: ParamStore,
    pub params: MhaParams,
    pub opts: AttentionOptions,
    pub queries: Tensor,
    pub map: Tensor,
}

impl AttentionFixture {
    pub fn new(n_q: usize, side: usize, channels: usize, heads: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let params = MhaParams::new(&mut store, &mut Init::new(seed), "bench", channels, heads)
            .expect("channels divisible by heads");
        AttentionFixture {
            store,
            params,
            opts: AttentionOptions::default(),
            queries: random_tensor(&[n_q, channels], seed + 1),
            map: random_tensor(&[side, side, channels], seed + 2),
        }
    }
}

/// A model with the template already fused and a search crop ready to score.
pub struct TrackingFixture {
    pub model: Model,
    pub template_feature: Tensor,
    pub search: Tensor,
}

impl TrackingFixture {
    pub fn new(cfg: ModelConfig) -> Self {
        let model = Model::new(cfg).expect("valid config");
        let seq = synth_sequence(&SequenceSpec::easy(2, 3, 4)).expect("valid spec");
        let c = &model.cfg;
        let crop = |i: usize, context: f64, res: usize| {
            let g = CropGeometry::around(&seq.gt[i], context, res).expect("valid box");
            crop_and_resize(&seq.frames[i], &g).expect("crop")
        };
        let template = crop(0, c.template_context, c.template_res);
        let search = crop(1, c.search_context, c.search_res);
        let template_feature = model.template_feature(&template).expect("forward");
        TrackingFixture {
            model,
            template_feature,
            search,
        }
    }
}
