//! Emotion capsule: `U_t ⊕ E_t ⊕ E_v ⊕ E_a`, with zero-masking of modalities
//! for ablation runs.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

/// Nonempty-by-convention subset of {text, audio, visual}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ModalitySet {
    pub text: bool,
    pub audio: bool,
    pub visual: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet {
        text: true,
        audio: true,
        visual: true,
    };
    pub const TEXT: ModalitySet = ModalitySet {
        text: true,
        audio: false,
        visual: false,
    };
    pub const AUDIO: ModalitySet = ModalitySet {
        text: false,
        audio: true,
        visual: false,
    };
    pub const VISUAL: ModalitySet = ModalitySet {
        text: false,
        audio: false,
        visual: true,
    };

    /// Ablation rows in the order T, A, V, T+A, T+V, T+V+A.
    pub fn ablation_rows() -> [ModalitySet; 6] {
        [
            Self::TEXT,
            Self::AUDIO,
            Self::VISUAL,
            Self::TEXT.union(Self::AUDIO),
            Self::TEXT.union(Self::VISUAL),
            Self::ALL,
        ]
    }

    pub fn contains(self, m: Modality) -> bool {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }

    pub fn union(self, other: ModalitySet) -> ModalitySet {
        ModalitySet {
            text: self.text || other.text,
            audio: self.audio || other.audio,
            visual: self.visual || other.visual,
        }
    }

    pub fn intersect(self, other: ModalitySet) -> ModalitySet {
        ModalitySet {
            text: self.text && other.text,
            audio: self.audio && other.audio,
            visual: self.visual && other.visual,
        }
    }

    pub fn is_empty(self) -> bool {
        !(self.text || self.audio || self.visual)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.text {
            parts.push("T");
        }
        if self.visual {
            parts.push("V");
        }
        if self.audio {
            parts.push("A");
        }
        if parts.is_empty() {
            return f.write_str("-");
        }
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    /// Accepts `T+V+A`-style names, in any order and case.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = ModalitySet::default();
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "t" | "text" => set.text = true,
                "a" | "audio" => set.audio = true,
                "v" | "video" | "visual" => set.visual = true,
                _ => return Err(Error::Usage(format!("unknown modality {part:?} in {s:?}"))),
            }
        }
        if set.is_empty() {
            return Err(Error::Usage("empty modality set".into()));
        }
        Ok(set)
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Component extents of a capsule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleLayout {
    pub sentence: usize,
    pub text_emotion: usize,
    pub visual_emotion: usize,
    pub audio_emotion: usize,
}

impl CapsuleLayout {
    pub fn extent(&self) -> usize {
        self.sentence + self.text_emotion + self.visual_emotion + self.audio_emotion
    }

    pub fn sentence_range(&self) -> Range<usize> {
        0..self.sentence
    }

    pub fn text_emotion_range(&self) -> Range<usize> {
        let s = self.sentence;
        s..s + self.text_emotion
    }

    pub fn visual_emotion_range(&self) -> Range<usize> {
        let s = self.sentence + self.text_emotion;
        s..s + self.visual_emotion
    }

    pub fn audio_emotion_range(&self) -> Range<usize> {
        let s = self.sentence + self.text_emotion + self.visual_emotion;
        s..s + self.audio_emotion
    }

    /// Per-entry keep mask: 1 for kept components, 0 for dropped ones.
    /// Text owns both the sentence vector and the text emotion vector.
    pub fn mask(&self, keep: ModalitySet) -> Vec<f64> {
        let mut mask = vec![0.0; self.extent()];
        let mut fill = |r: Range<usize>, on: bool| {
            if on {
                mask[r].fill(1.0);
            }
        };
        fill(self.sentence_range(), keep.text);
        fill(self.text_emotion_range(), keep.text);
        fill(self.visual_emotion_range(), keep.visual);
        fill(self.audio_emotion_range(), keep.audio);
        mask
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionCapsule {
    pub vector: Tensor,
    pub present: ModalitySet,
    pub layout: CapsuleLayout,
}

impl EmotionCapsule {
    pub fn component(&self, m: Modality) -> &[f64] {
        let r = match m {
            Modality::Text => self.layout.text_emotion_range(),
            Modality::Audio => self.layout.audio_emotion_range(),
            Modality::Visual => self.layout.visual_emotion_range(),
        };
        &self.vector.data()[r]
    }

    pub fn sentence(&self) -> &[f64] {
        &self.vector.data()[self.layout.sentence_range()]
    }
}

/// Concatenate in the fixed order sentence, text, visual, audio.
pub fn build_capsule(
    sentence: &Tensor,
    text_emotion: &Tensor,
    visual_emotion: &Tensor,
    audio_emotion: &Tensor,
    layout: CapsuleLayout,
) -> Result<EmotionCapsule> {
    let parts = [
        (sentence, layout.sentence),
        (text_emotion, layout.text_emotion),
        (visual_emotion, layout.visual_emotion),
        (audio_emotion, layout.audio_emotion),
    ];
    let mut data = Vec::with_capacity(layout.extent());
    for (t, extent) in parts {
        if t.numel() != extent {
            return Err(Error::dim("build_capsule", t.shape(), &[extent]));
        }
        data.extend_from_slice(t.data());
    }
    Ok(EmotionCapsule {
        vector: Tensor::vector(data),
        present: ModalitySet::ALL,
        layout,
    })
}

/// Zero the components of modalities outside `keep`; the extent is unchanged.
pub fn mask_modalities(capsule: &EmotionCapsule, keep: ModalitySet) -> Result<EmotionCapsule> {
    if keep.is_empty() {
        return Err(Error::Usage("cannot mask away every modality".into()));
    }
    let mask = capsule.layout.mask(keep);
    let data = capsule.vector.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok(EmotionCapsule {
        vector: Tensor::vector(data),
        present: capsule.present.intersect(keep),
        layout: capsule.layout,
    })
}

/// Graph form of [`build_capsule`] followed by [`mask_modalities`] on
/// row blocks `[n × extent]`.
pub fn capsule_rows(
    g: &mut Graph<'_>,
    parts: [Var; 4],
    layout: CapsuleLayout,
    keep: ModalitySet,
) -> Result<Var> {
    let extents = [
        layout.sentence,
        layout.text_emotion,
        layout.visual_emotion,
        layout.audio_emotion,
    ];
    for (&p, &e) in parts.iter().zip(&extents) {
        if g.shape(p).last() != Some(&e) {
            return Err(Error::dim("build_capsule", g.shape(p), &[e]));
        }
    }
    let joined = g.concat_cols(&parts)?;
    if keep == ModalitySet::ALL {
        return Ok(joined);
    }
    if keep.is_empty() {
        return Err(Error::Usage("cannot mask away every modality".into()));
    }
    let rows = g.value(joined).len() / layout.extent();
    let row_mask = layout.mask(keep);
    let mask = row_mask.iter().copied().cycle().take(rows * row_mask.len()).collect();
    g.mul_const(joined, mask)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Rng as Rng;

    const LAYOUT: CapsuleLayout = CapsuleLayout {
        sentence: 8,
        text_emotion: 4,
        visual_emotion: 4,
        audio_emotion: 4,
    };

    fn sample(seed: u64) -> EmotionCapsule {
        let mut rng = Rng::new(seed);
        let mut t = |n| Tensor::uniform(&[n], 1.0, &mut rng).clone();
        let (s, e_t, e_v, e_a) = (t(8), t(4), t(4), t(4));
        build_capsule(&s, &e_t, &e_v, &e_a, LAYOUT).unwrap()
    }

    #[test]
    fn extent_and_slices() {
        let mut rng = Rng::new(1);
        let e_t = Tensor::uniform(&[4], 1.0, &mut rng);
        let cap = build_capsule(&Tensor::zeros(&[8]), &e_t, &Tensor::zeros(&[4]), &Tensor::zeros(&[4]), LAYOUT).unwrap();
        assert_eq!(cap.vector.numel(), 20);
        assert_eq!(&cap.vector.data()[8..12], e_t.data());
        let zero = build_capsule(
            &Tensor::zeros(&[8]),
            &Tensor::zeros(&[4]),
            &Tensor::zeros(&[4]),
            &Tensor::zeros(&[4]),
            LAYOUT,
        )
        .unwrap();
        assert!(zero.vector.data().iter().all(|&x| x == 0.0));
        assert!(build_capsule(&Tensor::zeros(&[7]), &e_t, &e_t, &e_t, LAYOUT).is_err());
    }

    #[test]
    fn masking_contract() {
        let cap = sample(3);
        assert_eq!(mask_modalities(&cap, ModalitySet::ALL).unwrap(), cap);

        let text = mask_modalities(&cap, ModalitySet::TEXT).unwrap();
        assert_eq!(text.sentence(), cap.sentence());
        assert_eq!(text.component(Modality::Text), cap.component(Modality::Text));
        assert!(text.component(Modality::Audio).iter().all(|&x| x == 0.0));
        assert!(text.component(Modality::Visual).iter().all(|&x| x == 0.0));
        assert_eq!(text.vector.numel(), cap.vector.numel());

        let audio = mask_modalities(&cap, ModalitySet::AUDIO).unwrap();
        for (i, v) in audio.vector.data().iter().enumerate() {
            if LAYOUT.audio_emotion_range().contains(&i) {
                assert_eq!(*v, cap.vector.data()[i]);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(matches!(mask_modalities(&cap, ModalitySet::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn names_parse_in_table_order() {
        let names: Vec<String> = ModalitySet::ablation_rows().iter().map(|m| m.to_string()).collect();
        assert_eq!(names, ["T", "A", "V", "T+A", "T+V", "T+V+A"]);
        for n in &names {
            assert_eq!(n.parse::<ModalitySet>().unwrap().to_string(), *n);
        }
        assert!("T+X".parse::<ModalitySet>().is_err());
    }

    #[test]
    fn graph_capsule_matches_plain() {
        let cap = sample(9);
        let mut g = Graph::new();
        let v = cap.vector.data();
        let parts = [0..8, 8..12, 12..16, 16..20].map(|r| g.constant(Tensor::matrix(1, r.len(), v[r].to_vec()).unwrap()));
        for keep in ModalitySet::ablation_rows() {
            let rows = capsule_rows(&mut g, parts, LAYOUT, keep).unwrap();
            assert_eq!(g.value(rows), mask_modalities(&cap, keep).unwrap().vector.data());
        }
    }

    fn any_set() -> impl Strategy<Value = ModalitySet> {
        (any::<bool>(), any::<bool>(), any::<bool>())
            .prop_filter("nonempty", |(t, a, v)| *t || *a || *v)
            .prop_map(|(text, audio, visual)| ModalitySet { text, audio, visual })
    }

    proptest! {
        #[test]
        fn masking_is_idempotent_and_composes(seed in any::<u64>(), a in any_set(), b in any_set()) {
            let cap = sample(seed);
            let once = mask_modalities(&cap, a).unwrap();
            prop_assert_eq!(mask_modalities(&once, a).unwrap(), once.clone());
            let both = a.intersect(b);
            if !both.is_empty() {
                let ab = mask_modalities(&once, b).unwrap();
                let ba = mask_modalities(&mask_modalities(&cap, b).unwrap(), a).unwrap();
                prop_assert_eq!(ab.vector.clone(), ba.vector);
                prop_assert_eq!(ab.vector, mask_modalities(&cap, both).unwrap().vector);
            }
            prop_assert_eq!(once.vector.numel(), LAYOUT.extent());
        }

        #[test]
        fn slicing_inverts_build(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let parts: Vec<Tensor> = [8, 4, 4, 4].iter().map(|&n| Tensor::normal(&[n], 5.0, &mut rng)).collect();
            let cap = build_capsule(&parts[0], &parts[1], &parts[2], &parts[3], LAYOUT).unwrap();
            prop_assert_eq!(cap.sentence(), parts[0].data());
            prop_assert_eq!(cap.component(Modality::Text), parts[1].data());
            prop_assert_eq!(cap.component(Modality::Visual), parts[2].data());
            prop_assert_eq!(cap.component(Modality::Audio), parts[3].data());
        }
    }
}
