use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
const SPECIALS: usize = 4;

/// One id space shared by text, speaker and speech tokens.
///
/// Layout: `[PAD, BOS, EOS, SEP | text characters | speaker tags | speech]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub text_tokens: usize,
    pub speakers: usize,
    pub speech_tokens: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            text_tokens: 24,
            speakers: 4,
            speech_tokens: 96,
        }
    }
}

impl Vocabulary {
    pub fn validate(&self) -> Result<()> {
        if self.text_tokens == 0 {
            return Err(Error::config("vocab.text_tokens", "must be positive"));
        }
        if self.speakers == 0 {
            return Err(Error::config("vocab.speakers", "must be positive"));
        }
        if self.speech_tokens < 8 {
            return Err(Error::config("vocab.speech_tokens", "must be at least 8"));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        SPECIALS + self.text_tokens + self.speakers + self.speech_tokens
    }

    pub fn text_id(&self, ch: usize) -> TokenId {
        debug_assert!(ch < self.text_tokens);
        (SPECIALS + ch) as TokenId
    }

    pub fn speaker_id(&self, speaker: usize) -> TokenId {
        debug_assert!(speaker < self.speakers);
        (SPECIALS + self.text_tokens + speaker) as TokenId
    }

    pub fn speech_id(&self, index: usize) -> TokenId {
        debug_assert!(index < self.speech_tokens);
        (SPECIALS + self.text_tokens + self.speakers + index) as TokenId
    }

    /// Character index of a text token.
    pub fn text_index(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        (SPECIALS..SPECIALS + self.text_tokens)
            .contains(&id)
            .then(|| id - SPECIALS)
    }

    pub fn speaker_index(&self, id: TokenId) -> Option<usize> {
        let start = SPECIALS + self.text_tokens;
        let id = id as usize;
        (start..start + self.speakers).contains(&id).then(|| id - start)
    }

    /// Position of a speech token inside the speech range.
    pub fn speech_index(&self, id: TokenId) -> Option<usize> {
        let start = SPECIALS + self.text_tokens + self.speakers;
        let id = id as usize;
        (start..start + self.speech_tokens)
            .contains(&id)
            .then(|| id - start)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.size()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompt,
    Response,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub role: Role,
}

impl TokenSequence {
    pub fn prompt(ids: Vec<TokenId>) -> Self {
        TokenSequence {
            ids,
            role: Role::Prompt,
        }
    }

    pub fn response(ids: Vec<TokenId>) -> Self {
        TokenSequence {
            ids,
            role: Role::Response,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    /// Tokens before the first EOS.
    pub fn content(&self) -> &[TokenId] {
        let end = self.ids.iter().position(|&t| t == EOS).unwrap_or(self.ids.len());
        &self.ids[..end]
    }

    /// A response ends with EOS unless it was cut at `max_len`.
    pub fn validate(&self, vocab: &Vocabulary, max_len: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Sequence(format!("empty {:?}", self.role)));
        }
        if let Some(&bad) = self.ids.iter().find(|&&t| !vocab.contains(t)) {
            return Err(Error::Sequence(format!(
                "token {bad} outside vocabulary of {}",
                vocab.size()
            )));
        }
        if self.role == Role::Response {
            if self.ids.len() > max_len {
                return Err(Error::Sequence(format!(
                    "response length {} exceeds max {max_len}",
                    self.ids.len()
                )));
            }
            if !self.ends_with_eos() && self.ids.len() < max_len {
                return Err(Error::Sequence("response must end with EOS".into()));
            }
            if self.ids[..self.ids.len() - 1].contains(&EOS) {
                return Err(Error::Sequence("EOS before end of response".into()));
            }
        }
        Ok(())
    }
}
