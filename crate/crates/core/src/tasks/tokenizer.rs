use super::TaskError;
use crate::model::Token;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const SEP: Token = 3;

const FIRST_CHAR: u8 = b' ';
const LAST_CHAR: u8 = b'~';
const CHAR_OFFSET: Token = 4;

/// 95 printable ASCII characters plus PAD, BOS, EOS and SEP.
pub const VOCAB_SIZE: usize = (LAST_CHAR - FIRST_CHAR + 1) as usize + CHAR_OFFSET as usize;

/// Character-level tokenizer over printable ASCII.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, s: &str) -> Result<Vec<Token>, TaskError> {
        s.chars()
            .map(|c| match c {
                ' '..='~' => Ok(c as u8 as Token - FIRST_CHAR as Token + CHAR_OFFSET),
                other => Err(TaskError::Vocabulary(other)),
            })
            .collect()
    }

    pub fn is_special(&self, t: Token) -> bool {
        t < CHAR_OFFSET
    }

    /// Renders character tokens, stopping at the first EOS. PAD and BOS are
    /// dropped; SEP is shown as `" | "`. Out-of-range ids render as `'?'`.
    pub fn decode(&self, tokens: &[Token]) -> String {
        let mut out = String::with_capacity(tokens.len());
        for &t in tokens {
            match t {
                EOS => break,
                PAD | BOS => {}
                SEP => out.push_str(" | "),
                t if (t as usize) < VOCAB_SIZE => out.push((t - CHAR_OFFSET + FIRST_CHAR as Token) as u8 as char),
                _ => out.push('?'),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_is_99() {
        assert_eq!(VOCAB_SIZE, 99);
        let all: String = (b' '..=b'~').map(|b| b as char).collect();
        let ids = Tokenizer.encode(&all).unwrap();
        assert_eq!(ids.first(), Some(&4));
        assert_eq!(ids.last(), Some(&98));
        assert!(ids.iter().all(|&t| !Tokenizer.is_special(t)));
    }

    #[test]
    fn rejects_non_printable() {
        assert!(matches!(Tokenizer.encode("a\nb"), Err(TaskError::Vocabulary('\n'))));
        assert!(Tokenizer.encode("é").is_err());
    }

    #[test]
    fn decode_stops_at_eos() {
        let mut ids = Tokenizer.encode("ab").unwrap();
        ids.push(EOS);
        ids.extend(Tokenizer.encode("zz").unwrap());
        assert_eq!(Tokenizer.decode(&ids), "ab");
    }

    proptest! {
        #[test]
        fn round_trip(s in "[ -~]{0,64}") {
            let ids = Tokenizer.encode(&s).unwrap();
            prop_assert_eq!(Tokenizer.decode(&ids), s);
        }
    }
}
