use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::corpus::grammar::vocabulary;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const CLS: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<cls>"];

/// Integer-encoded sentence. Encoded captions carry BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// Word-level tokenizer over the closed grammar vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn grammar() -> Self {
        let vocab: Vec<String> = SPECIALS
            .iter()
            .copied()
            .chain(vocabulary())
            .map(str::to_string)
            .collect();
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { vocab, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Words only, no BOS/EOS.
    pub fn encode_words(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = vec![BOS];
        ids.extend(self.encode_words(text)?);
        ids.push(EOS);
        Ok(TokenSeq(ids))
    }

    /// Joins non-special tokens up to the first EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.vocab {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Right-pads with PAD; returns the flat ids and the padded length.
pub fn pad_batch(seqs: &[&[u32]]) -> (Vec<u32>, usize) {
    let t = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(seqs.len() * t);
    for s in seqs {
        out.extend_from_slice(s);
        out.extend(std::iter::repeat_n(PAD, t - s.len()));
    }
    (out, t)
}

/// Teacher-forcing pairs: inputs drop the last token, targets drop the first.
pub fn shift_batch(seqs: &[&[u32]]) -> (Vec<u32>, Vec<u32>, usize) {
    let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let targets: Vec<&[u32]> = seqs.iter().map(|s| &s[1..]).collect();
    let (i, t) = pad_batch(&inputs);
    let (o, _) = pad_batch(&targets);
    (i, o, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{caption_of, gen_scene, SceneParams};
    use crate::rng::SeedStreams;

    #[test]
    fn ids_are_dense_and_specials_distinct() {
        let tok = Tokenizer::grammar();
        for (i, w) in tok.vocab.iter().enumerate() {
            assert_eq!(tok.id(w), Some(i as u32));
        }
        let specials = [PAD, BOS, EOS, CLS];
        for (a, b) in specials.iter().zip(specials.iter().skip(1)) {
            assert_ne!(a, b);
        }
    }

    #[test]
    fn encode_decode_inverse_on_captions() {
        let tok = Tokenizer::grammar();
        let mut rng = SeedStreams::new(0).stream("tok");
        for i in 0..300 {
            let s = gen_scene(&mut rng, &SceneParams::default());
            let c = caption_of(&s, i % 3).unwrap();
            let ids = tok.encode(&c.text).unwrap();
            assert_eq!(ids.0[0], BOS);
            assert_eq!(*ids.0.last().unwrap(), EOS);
            assert_eq!(tok.decode(&ids.0), c.text);
        }
    }

    #[test]
    fn unknown_words_rejected() {
        assert!(matches!(
            Tokenizer::grammar().encode("a purple circle"),
            Err(Error::UnknownToken(w)) if w == "purple"
        ));
    }

    #[test]
    fn shift_pads_targets() {
        let a = [BOS, 10, 11, EOS];
        let b = [BOS, 12, EOS];
        let (i, o, t) = shift_batch(&[&a, &b]);
        assert_eq!(t, 3);
        assert_eq!(i, vec![BOS, 10, 11, BOS, 12, PAD]);
        assert_eq!(o, vec![10, 11, EOS, 12, EOS, PAD]);
    }
}
