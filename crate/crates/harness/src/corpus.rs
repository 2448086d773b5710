//! Synthetic question-answer corpus over rendered scenes.
//!
//! Token layout after the specials: `YES NO WHAT IS`, one token per
//! attribute, one token per attribute value, then one query token per
//! (attribute, value) pair. Open prompts read `BOS WHAT IS ATTR_a`; closed
//! prompts read `BOS IS ATTR_a Q_av`. The chosen response is the answer token
//! followed by a full scene description (`VAL` of every attribute in order)
//! and `EOS`.
//!
//! Both prompt kinds end in a token that names the attribute, so a single
//! attention layer can locate the relevant image rows from the last prompt
//! position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hscr_core::prefgen::record_seed;
use hscr_core::vlm::vocab::{BOS, EOS, FIRST_CONTENT};
use hscr_core::vlm::{ModelConfig, Scene, SceneLayout, TokenId, VisualInput};

use crate::error::{HarnessError, Result};

/// Token ids of the synthetic language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub layout: SceneLayout,
}

impl Vocabulary {
    pub fn new(layout: SceneLayout) -> Self {
        Self { layout }
    }

    pub fn yes(&self) -> TokenId {
        FIRST_CONTENT
    }

    pub fn no(&self) -> TokenId {
        FIRST_CONTENT + 1
    }

    pub fn what(&self) -> TokenId {
        FIRST_CONTENT + 2
    }

    pub fn is(&self) -> TokenId {
        FIRST_CONTENT + 3
    }

    pub fn attribute(&self, a: usize) -> TokenId {
        FIRST_CONTENT + 4 + a as TokenId
    }

    pub fn value(&self, v: usize) -> TokenId {
        FIRST_CONTENT + 4 + (self.layout.attributes + v) as TokenId
    }

    /// "Is attribute `a` equal to `v`?"
    pub fn query(&self, a: usize, v: usize) -> TokenId {
        let base = 4 + self.layout.attributes + self.layout.values;
        FIRST_CONTENT + (base + a * self.layout.values + v) as TokenId
    }

    /// Smallest vocabulary that holds every token used here.
    pub fn required_size(&self) -> usize {
        let (a, v) = (self.layout.attributes, self.layout.values);
        FIRST_CONTENT as usize + 4 + a + v + a * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_records: usize,
    pub attributes: usize,
    pub values: usize,
    pub closed_ended_fraction: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_records: 2000,
            attributes: 4,
            values: 8,
            closed_ended_fraction: 0.5,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn layout(&self) -> SceneLayout {
        SceneLayout {
            attributes: self.attributes,
            values: self.values,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        if self.num_records == 0 {
            return bad("corpus needs at least one record".into());
        }
        if !(0.0..=1.0).contains(&self.closed_ended_fraction) {
            return bad(format!(
                "closed_ended_fraction {} outside [0, 1]",
                self.closed_ended_fraction
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("invalid noise_std {}", self.noise_std));
        }
        if self.attributes == 0 || self.values < 2 {
            return bad("need at least one attribute and two values".into());
        }
        if self.values > 256 {
            return bad("at most 256 values per attribute".into());
        }
        if self.values > model.visual_dim || self.attributes > model.visual_tokens {
            return bad(format!(
                "{} attributes x {} values do not fit {} visual rows of width {}",
                self.attributes, self.values, model.visual_tokens, model.visual_dim
            ));
        }
        let vocab = Vocabulary::new(self.layout());
        if vocab.required_size() > model.vocab_size {
            return bad(format!(
                "corpus needs {} tokens, model vocabulary has {}",
                vocab.required_size(),
                model.vocab_size
            ));
        }
        if 4 + 2 + self.attributes > model.max_text_len {
            return bad("prompt plus answer exceeds T_max".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: u64,
    pub scene: Scene,
    pub visual_seed: u64,
    pub kind: QuestionKind,
    /// Attribute the question is about.
    pub attribute: usize,
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub visual: VisualInput,
}

/// Scene description response: answer token, every attribute value, EOS.
pub fn describe(vocab: &Vocabulary, scene: &Scene, answer: TokenId) -> Vec<TokenId> {
    let mut y = Vec::with_capacity(scene.attributes.len() + 2);
    y.push(answer);
    y.extend(scene.attributes.iter().map(|&v| vocab.value(v as usize)));
    y.push(EOS);
    y
}

pub fn make_corpus(spec: &CorpusSpec, model: &ModelConfig) -> Result<Vec<CorpusEntry>> {
    spec.validate(model)?;
    let layout = spec.layout();
    let vocab = Vocabulary::new(layout);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut closed_seen = 0usize;
    let mut out = Vec::with_capacity(spec.num_records);
    for id in 0..spec.num_records as u64 {
        let attrs: Vec<u8> = (0..layout.attributes)
            .map(|_| rng.random_range(0..layout.values) as u8)
            .collect();
        let scene = Scene::new(attrs, layout)?;
        let a = rng.random_range(0..layout.attributes);
        let closed = rng.random::<f64>() < spec.closed_ended_fraction;
        let truth = scene.attributes[a] as usize;
        let (kind, prompt, answer) = if closed {
            let yes = closed_seen.is_multiple_of(2);
            closed_seen += 1;
            let asked = if yes {
                truth
            } else {
                let other = rng.random_range(0..layout.values - 1);
                if other >= truth {
                    other + 1
                } else {
                    other
                }
            };
            let prompt = vec![BOS, vocab.is(), vocab.attribute(a), vocab.query(a, asked)];
            let answer = if yes { vocab.yes() } else { vocab.no() };
            (QuestionKind::Closed, prompt, answer)
        } else {
            let prompt = vec![BOS, vocab.what(), vocab.is(), vocab.attribute(a)];
            (QuestionKind::Open, prompt, vocab.value(truth))
        };
        let visual_seed = record_seed(spec.seed, id);
        let visual = VisualInput::render(&scene, layout, model, spec.noise_std, visual_seed)?;
        out.push(CorpusEntry {
            id,
            chosen: describe(&vocab, &scene, answer),
            scene,
            visual_seed,
            kind,
            attribute: a,
            prompt,
            visual,
        });
    }
    Ok(out)
}
