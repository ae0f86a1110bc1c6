//! Token id layout shared by every model over a given registry.
//!
//! Content symbols occupy `0..C`. Two structural tokens follow: `SEP = C`
//! and `EOS = C + 1`. Language tag tokens start at `C + 2`, assigned by
//! sorted language code (English included). A translation pair encodes as
//!
//! ```text
//! [TAG_dst] src… [SEP] tgt… [EOS]
//! ```
//!
//! and the loss covers exactly the positions strictly after SEP (the target
//! tokens and the closing EOS).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::toymodel::TokenSequence;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    content: usize,
    tags: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn new(content_vocab: usize, registry: &Registry) -> Vocab {
        let mut codes: Vec<&str> = registry.languages().iter().map(|l| l.code.as_str()).collect();
        codes.sort_unstable();
        let tags = codes
            .into_iter()
            .enumerate()
            .map(|(i, code)| (code.to_string(), (content_vocab + 2 + i) as u32))
            .collect();
        Vocab {
            content: content_vocab,
            tags,
        }
    }

    pub fn content_size(&self) -> usize {
        self.content
    }

    /// Total vocabulary size: content + SEP + EOS + one tag per language.
    pub fn size(&self) -> usize {
        self.content + 2 + self.tags.len()
    }

    pub fn sep(&self) -> u32 {
        self.content as u32
    }

    pub fn eos(&self) -> u32 {
        self.content as u32 + 1
    }

    pub fn tag(&self, code: &str) -> Result<u32> {
        self.tags
            .get(code)
            .copied()
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    fn check_content(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.content) {
            return Err(Error::Validation(format!(
                "content token {bad} out of range for content vocab {}",
                self.content
            )));
        }
        Ok(())
    }

    /// `[TAG_dst] src [SEP]` — the decoding prompt for a translation.
    pub fn prefix(&self, dst: &str, src: &[u32]) -> Result<Vec<u32>> {
        self.check_content(src)?;
        let mut ids = Vec::with_capacity(src.len() + 2);
        ids.push(self.tag(dst)?);
        ids.extend_from_slice(src);
        ids.push(self.sep());
        Ok(ids)
    }

    /// Full training sequence `[TAG_dst] src [SEP] tgt [EOS]` with the loss
    /// starting at the first target token.
    pub fn encode_pair(&self, dst: &str, src: &[u32], tgt: &[u32]) -> Result<TokenSequence> {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::EmptyInput("empty side in translation pair".into()));
        }
        self.check_content(tgt)?;
        let mut ids = self.prefix(dst, src)?;
        let loss_start = ids.len();
        ids.extend_from_slice(tgt);
        ids.push(self.eos());
        Ok(TokenSequence { ids, loss_start })
    }

    /// Target tokens out of a decoded sequence: everything after the prompt,
    /// truncated at (and excluding) the first EOS.
    pub fn extract_target(&self, decoded: &[u32], prefix_len: usize) -> Vec<u32> {
        let tail = &decoded[prefix_len.min(decoded.len())..];
        let end = tail
            .iter()
            .position(|&t| t == self.eos())
            .unwrap_or(tail.len());
        tail[..end].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Registry;

    #[test]
    fn layout_is_content_sep_eos_tags() {
        let reg = Registry::builtin();
        let v = Vocab::new(64, &reg);
        assert_eq!(v.sep(), 64);
        assert_eq!(v.eos(), 65);
        assert_eq!(v.size(), 64 + 2 + 50);
        // Tags follow sorted code order; "af" is the first builtin code.
        assert_eq!(v.tag("af").unwrap(), 66);
        assert!(v.tag("en").unwrap() > 66);
        assert!(v.tag("xx").is_err());
    }

    #[test]
    fn encode_pair_shape_and_loss_start() {
        let reg = Registry::builtin();
        let v = Vocab::new(8, &reg);
        let seq = v.encode_pair("de", &[1, 2, 3], &[4, 5]).unwrap();
        assert_eq!(seq.ids.len(), 3 + 2 + 2 + 1);
        assert_eq!(seq.ids[0], v.tag("de").unwrap());
        assert_eq!(seq.ids[4], v.sep());
        assert_eq!(*seq.ids.last().unwrap(), v.eos());
        // First predicted token is the first target token, right after SEP.
        assert_eq!(seq.loss_start, 5);
        assert_eq!(seq.ids[seq.loss_start], 4);
        // Exactly one SEP.
        assert_eq!(seq.ids.iter().filter(|&&t| t == v.sep()).count(), 1);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let reg = Registry::builtin();
        let v = Vocab::new(8, &reg);
        assert!(v.encode_pair("de", &[9], &[1]).is_err());
        assert!(v.encode_pair("de", &[1], &[8]).is_err());
        assert!(v.encode_pair("qq", &[1], &[2]).is_err());
        assert!(v.encode_pair("de", &[], &[1]).is_err());
    }

    #[test]
    fn extract_target_truncates_at_eos() {
        let reg = Registry::builtin();
        let v = Vocab::new(8, &reg);
        let prefix = v.prefix("de", &[1, 2]).unwrap();
        let mut decoded = prefix.clone();
        decoded.extend_from_slice(&[5, 6, v.eos(), 7]);
        assert_eq!(v.extract_target(&decoded, prefix.len()), vec![5, 6]);
        // No EOS: take everything after the prompt.
        let mut open = prefix.clone();
        open.extend_from_slice(&[3, 3]);
        assert_eq!(v.extract_target(&open, prefix.len()), vec![3, 3]);
        // Decoder stopped before producing anything.
        assert_eq!(v.extract_target(&prefix, prefix.len()), Vec::<u32>::new());
    }
}
