//! One id space shared by text tokens, control specials, and image codes.
//!
//! Layout: text ids `[0, T)`, then `[bos] [eos] [boi] [eoi] [pad]` at
//! `T..T+5`, then image code `k` at `T + 5 + k`. Every id belongs to exactly
//! one of the three ranges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::BYTE_VOCAB;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("id {id} out of range for vocab of size {total}")]
    IdOutOfRange { id: u32, total: u32 },
    #[error("image code {code} out of range ({image_codes} codes)")]
    CodeOutOfRange { code: u32, image_codes: u32 },
    #[error("id {id} is not an image id")]
    NotAnImageId { id: u32 },
    #[error("text vocab size {got} is below the byte vocabulary (256)")]
    TextSizeTooSmall { got: u32 },
}

pub const SPECIAL_COUNT: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpecialToken {
    Bos,
    Eos,
    Boi,
    Eoi,
    Pad,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 5] = [
        SpecialToken::Bos,
        SpecialToken::Eos,
        SpecialToken::Boi,
        SpecialToken::Eoi,
        SpecialToken::Pad,
    ];

    pub fn offset(self) -> u32 {
        match self {
            SpecialToken::Bos => 0,
            SpecialToken::Eos => 1,
            SpecialToken::Boi => 2,
            SpecialToken::Eoi => 3,
            SpecialToken::Pad => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpecialToken::Bos => "[bos]",
            SpecialToken::Eos => "[eos]",
            SpecialToken::Boi => "[boi]",
            SpecialToken::Eoi => "[eoi]",
            SpecialToken::Pad => "[pad]",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Special(SpecialToken),
    Image,
}

/// Sizes of the three id ranges; the whole mapping is arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    text_size: u32,
    image_codes: u32,
}

impl UnifiedVocab {
    pub fn new(text_size: u32, image_codes: u32) -> Result<Self, VocabError> {
        if text_size < BYTE_VOCAB as u32 {
            return Err(VocabError::TextSizeTooSmall { got: text_size });
        }
        Ok(Self {
            text_size,
            image_codes,
        })
    }

    pub fn text_size(&self) -> u32 {
        self.text_size
    }

    pub fn image_codes(&self) -> u32 {
        self.image_codes
    }

    pub fn total(&self) -> u32 {
        self.text_size + SPECIAL_COUNT + self.image_codes
    }

    pub fn special(&self, s: SpecialToken) -> u32 {
        self.text_size + s.offset()
    }

    pub fn bos(&self) -> u32 {
        self.special(SpecialToken::Bos)
    }

    pub fn eos(&self) -> u32 {
        self.special(SpecialToken::Eos)
    }

    pub fn boi(&self) -> u32 {
        self.special(SpecialToken::Boi)
    }

    pub fn eoi(&self) -> u32 {
        self.special(SpecialToken::Eoi)
    }

    pub fn pad(&self) -> u32 {
        self.special(SpecialToken::Pad)
    }

    /// First image id; the image range is `[image_base, total)`.
    pub fn image_base(&self) -> u32 {
        self.text_size + SPECIAL_COUNT
    }

    pub fn modality_of(&self, id: u32) -> Result<Modality, VocabError> {
        if id < self.text_size {
            Ok(Modality::Text)
        } else if id < self.image_base() {
            Ok(Modality::Special(
                SpecialToken::ALL[(id - self.text_size) as usize],
            ))
        } else if id < self.total() {
            Ok(Modality::Image)
        } else {
            Err(VocabError::IdOutOfRange {
                id,
                total: self.total(),
            })
        }
    }

    pub fn is_text(&self, id: u32) -> bool {
        id < self.text_size
    }

    pub fn is_image(&self, id: u32) -> bool {
        id >= self.image_base() && id < self.total()
    }

    pub fn image_id_of_code(&self, code: u32) -> Result<u32, VocabError> {
        if code >= self.image_codes {
            return Err(VocabError::CodeOutOfRange {
                code,
                image_codes: self.image_codes,
            });
        }
        Ok(self.image_base() + code)
    }

    pub fn code_of_image_id(&self, id: u32) -> Result<u32, VocabError> {
        if id >= self.total() {
            return Err(VocabError::IdOutOfRange {
                id,
                total: self.total(),
            });
        }
        if !self.is_image(id) {
            return Err(VocabError::NotAnImageId { id });
        }
        Ok(id - self.image_base())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_layout_maps_code_zero_to_517() {
        let v = UnifiedVocab::new(512, 256).unwrap();
        assert_eq!(v.total(), 773);
        assert_eq!(v.image_id_of_code(0).unwrap(), 517);
        assert_eq!(v.code_of_image_id(517).unwrap(), 0);
    }

    #[test]
    fn modality_of_spans_all_three_ranges() {
        let v = UnifiedVocab::new(512, 256).unwrap();
        assert_eq!(v.modality_of(0).unwrap(), Modality::Text);
        assert_eq!(v.modality_of(511).unwrap(), Modality::Text);
        assert_eq!(
            v.modality_of(514).unwrap(),
            Modality::Special(SpecialToken::Boi)
        );
        assert_eq!(v.modality_of(v.total() - 1).unwrap(), Modality::Image);
        assert!(matches!(
            v.modality_of(v.total()),
            Err(VocabError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn code_mapping_is_a_bijection() {
        let v = UnifiedVocab::new(300, 64).unwrap();
        for code in 0..64 {
            let id = v.image_id_of_code(code).unwrap();
            assert_eq!(v.code_of_image_id(id).unwrap(), code);
            assert_eq!(v.modality_of(id).unwrap(), Modality::Image);
        }
        assert!(v.image_id_of_code(64).is_err());
    }

    #[test]
    fn specials_are_not_image_ids() {
        let v = UnifiedVocab::new(512, 256).unwrap();
        let err = v.code_of_image_id(v.bos()).unwrap_err();
        assert!(matches!(err, VocabError::NotAnImageId { .. }));
    }

    #[test]
    fn ranges_partition_the_vocab() {
        for (t, k) in [(256u32, 0u32), (300, 7), (512, 256)] {
            let v = UnifiedVocab::new(t, k).unwrap();
            let (mut text, mut special, mut image) = (0, 0, 0);
            for id in 0..v.total() {
                match v.modality_of(id).unwrap() {
                    Modality::Text => text += 1,
                    Modality::Special(_) => special += 1,
                    Modality::Image => image += 1,
                }
            }
            assert_eq!((text, special, image), (t, 5, k));
        }
    }

    #[test]
    fn zero_image_codes_supported() {
        let v = UnifiedVocab::new(256, 0).unwrap();
        assert_eq!(v.total(), 261);
        assert_eq!(
            v.modality_of(v.total() - 1).unwrap(),
            Modality::Special(SpecialToken::Pad)
        );
        assert!(v.image_id_of_code(0).is_err());
    }

    #[test]
    fn undersized_text_vocab_rejected() {
        assert!(matches!(
            UnifiedVocab::new(255, 4),
            Err(VocabError::TextSizeTooSmall { got: 255 })
        ));
    }
}
