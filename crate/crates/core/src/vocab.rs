//! Token vocabulary shared by the policy, the task generators and the verifier.

use std::collections::HashMap;

use crate::{Error, Result};

/// Dense token index in `[0, V)`.
pub type TokenId = usize;

pub const EOS: &str = "<eos>";
pub const BOX_OPEN: &str = "\\boxed{";
pub const BOX_CLOSE: &str = "}";
/// Prompt suffix asking for a boxed final answer.
pub const BOX_REQUEST: &str = "box:";
pub const REFLECTION_WORDS: [&str; 3] = ["rethink", "recheck", "recalculate"];

const STANDARD_TOKENS: &[&str] = &[
    EOS, "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "/", ".", "=", "mod",
    "dsum", BOX_REQUEST, BOX_OPEN, BOX_CLOSE, " ", "rethink", "recheck", "recalculate",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
}

impl Vocab {
    /// The vocabulary used by every task family.
    pub fn standard() -> Self {
        Self::new(STANDARD_TOKENS.iter().map(|s| s.to_string()).collect())
            .expect("standard vocabulary is well formed")
    }

    /// Builds a vocabulary from an ordered token list. Exactly one token must be `<eos>`.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::InvalidInput("empty token string".into()));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {tok:?}")));
            }
        }
        let eos = *index
            .get(EOS)
            .ok_or_else(|| Error::InvalidInput("vocabulary has no <eos> token".into()))?;
        Ok(Self { tokens, index, eos })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Looks up a list of token strings.
    pub fn ids_of<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::InvalidInput(format!("unknown token {:?}", t.as_ref())))
            })
            .collect()
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.len()) {
            Some(id) => Err(Error::InvalidInput(format!(
                "token id {id} out of range for vocabulary of size {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }

    /// Greedy longest-match tokenization.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let max_len = self.tokens.iter().map(String::len).max().unwrap_or(0);
        let mut ids = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let found = (1..=max_len.min(rest.len()))
                .rev()
                .filter(|&n| rest.is_char_boundary(n))
                .find_map(|n| self.id(&rest[..n]).map(|id| (id, n)));
            match found {
                Some((id, n)) => {
                    ids.push(id);
                    rest = &rest[n..];
                }
                None => {
                    return Err(Error::InvalidInput(format!(
                        "cannot tokenize {:?}",
                        rest.chars().take(16).collect::<String>()
                    )))
                }
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        self.check(ids)?;
        Ok(ids.iter().map(|&id| self.tokens[id].as_str()).collect())
    }

    /// Renders a response for the verifier: everything up to the first EOS.
    pub fn render_response(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&id| id != self.eos)
            .filter_map(|&id| self.token(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_vocab_has_single_eos() {
        let v = Vocab::standard();
        assert_eq!(v.tokens().iter().filter(|t| t.as_str() == EOS).count(), 1);
        assert_eq!(v.token(v.eos()), Some(EOS));
        for w in REFLECTION_WORDS {
            assert!(v.id(w).is_some());
        }
    }

    #[test]
    fn encode_boxed_answer() {
        let v = Vocab::standard();
        let ids = v.encode("\\boxed{12}<eos>").unwrap();
        assert_eq!(v.ids_of(&[BOX_OPEN, "1", "2", BOX_CLOSE, EOS]).unwrap(), ids);
        assert_eq!(v.render_response(&ids), "\\boxed{12}");
    }

    #[test]
    fn rejects_unknown_text_and_ids() {
        let v = Vocab::standard();
        assert!(v.encode("xyz").is_err());
        assert!(v.decode(&[v.len()]).is_err());
        assert!(Vocab::new(vec!["a".into(), "b".into()]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(ids in proptest::collection::vec(0usize..26, 0..24)) {
            let v = Vocab::standard();
            let text = v.decode(&ids).unwrap();
            prop_assert_eq!(v.encode(&text).unwrap(), ids);
        }
    }
}
