use std::path::Path;

use super::CodecId;
use crate::error::{Error, Result};

/// Token ids tagged with the codec that produced them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub codec: CodecId,
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(codec: CodecId, tokens: Vec<u32>) -> Result<Self> {
        let vocab = codec.vocab_size();
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Format(format!("token {t} outside the {codec:?} vocabulary of {vocab}")));
        }
        Ok(Self { codec, tokens })
    }

    pub fn vocab_size(&self) -> usize {
        self.codec.vocab_size()
    }
}

/// Space-separated ids, newline-terminated.
pub fn format_tokens(tokens: &[u32]) -> String {
    let mut s: String = tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

pub fn parse_tokens(text: &str, path: Option<&Path>) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut col = 0;
        for piece in line.split(' ') {
            let trimmed = piece.trim();
            if !trimmed.is_empty() {
                let offset = piece.len() - piece.trim_start().len();
                out.push(trimmed.parse().map_err(|_| Error::Parse {
                    path: path.map(Path::to_path_buf),
                    line: ln + 1,
                    column: col + offset + 1,
                    message: format!("{trimmed:?} is not a token id"),
                })?);
            }
            col += piece.len() + 1;
        }
    }
    Ok(out)
}

pub fn read_token_file(path: &Path) -> Result<Vec<u32>> {
    parse_tokens(&std::fs::read_to_string(path)?, Some(path))
}

pub fn write_token_file(path: &Path, tokens: &[u32]) -> Result<()> {
    std::fs::write(path, format_tokens(tokens))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        assert_eq!(format_tokens(&[1, 22, 3]), "1 22 3\n");
        assert_eq!(parse_tokens("1 22 3\n4\n", None).unwrap(), vec![1, 22, 3, 4]);
        assert!(matches!(parse_tokens("1 x", None), Err(Error::Parse { line: 1, column: 3, .. })));
        assert!(TokenSequence::new(CodecId::Performance, vec![388]).is_err());
        assert!(TokenSequence::new(CodecId::JsbGrid, vec![128]).is_ok());
    }
}
