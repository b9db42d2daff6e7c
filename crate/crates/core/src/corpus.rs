//! Seeded synthetic corpora: disjoint seed ranges per split and field, and
//! rendering scenes straight into cached feature examples.

use serde::{Deserialize, Serialize};

use crate::array::{multi_look_stack, FrontendConfig, MaskSource};
use crate::dsp::{FBankExtractor, Waveform};
use crate::error::Result;
use crate::manifest::FieldTag;
use crate::scene::ScenePrior;
use crate::trainer::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

/// Scene seed of utterance `index` of `split`/`field` under a corpus seed.
/// Ranges for different splits and fields never overlap for `index < 2^28`.
pub fn scene_seed(corpus_seed: u64, split: Split, field: FieldTag, index: u64) -> u64 {
    let split_bits = match split {
        Split::Train => 0u64,
        Split::Dev => 1,
        Split::Eval => 2,
    };
    let field_bits = match field {
        FieldTag::Near => 0u64,
        FieldTag::Mid => 1,
        FieldTag::Far => 2,
    };
    (corpus_seed << 32) | (split_bits << 30) | (field_bits << 28) | (index & ((1 << 28) - 1))
}

/// How model inputs are derived from a rendered scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InputView {
    /// The channels the field carries.
    #[default]
    Raw,
    /// Only channel 0.
    Reference,
    /// Beams at the configured looks plus raw channel 0 (far field only),
    /// with masks from noise-floor tracking.
    MultiLook(FrontendConfig),
}

pub fn view_waveform(w: &Waveform, view: &InputView) -> Result<Waveform> {
    match view {
        InputView::Raw => Ok(w.clone()),
        InputView::Reference => w.select(&[0]),
        InputView::MultiLook(cfg) => Ok(multi_look_stack(w, cfg, &MaskSource::default())?.waveform),
    }
}

/// Renders `count` scenes of `prior`'s field and extracts their features.
pub fn render_examples(
    prior: &ScenePrior,
    corpus_seed: u64,
    split: Split,
    count: usize,
    extractor: &FBankExtractor,
    view: &InputView,
) -> Result<Vec<Example>> {
    (0..count as u64)
        .map(|i| {
            let (scene, w) = prior.render(scene_seed(corpus_seed, split, prior.field, i))?;
            let w = view_waveform(&w, view)?;
            Ok(Example {
                feature: extractor.extract(&w)?,
                label: scene.label,
            })
        })
        .collect()
}
