//! Character-level tokenization for enzyme sequences and SMILES strings.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// The twenty standard amino acids followed by `X` for unknown residues.
pub const AMINO_ACIDS: &[u8; 21] = b"ACDEFGHIKLMNPQRSTVWYX";
pub const ENZYME_VOCAB: usize = AMINO_ACIDS.len();

const PRINTABLE_FIRST: u8 = b' ';
const PRINTABLE_LAST: u8 = b'~';
pub const SUBSTRATE_VOCAB: usize = (PRINTABLE_LAST - PRINTABLE_FIRST + 1) as usize;

pub fn enzyme_token(c: char) -> Option<u8> {
    let up = c.to_ascii_uppercase();
    AMINO_ACIDS.iter().position(|&a| a as char == up).map(|i| i as u8)
}

pub fn enzyme_char(token: u8) -> char {
    AMINO_ACIDS[token as usize] as char
}

pub fn tokenize_enzyme(seq: &str) -> Result<Vec<u8>> {
    seq.chars()
        .enumerate()
        .map(|(position, token)| {
            enzyme_token(token).ok_or(Error::Vocabulary {
                vocabulary: "enzyme",
                position,
                token,
            })
        })
        .collect()
}

pub fn substrate_token(c: char) -> Option<u8> {
    let b = u32::from(c);
    (u32::from(PRINTABLE_FIRST)..=u32::from(PRINTABLE_LAST))
        .contains(&b)
        .then(|| (b - u32::from(PRINTABLE_FIRST)) as u8)
}

pub fn substrate_char(token: u8) -> char {
    (PRINTABLE_FIRST + token) as char
}

pub fn tokenize_substrate(smiles: &str) -> Result<Vec<u8>> {
    smiles
        .chars()
        .enumerate()
        .map(|(position, token)| {
            substrate_token(token).ok_or(Error::Vocabulary {
                vocabulary: "substrate",
                position,
                token,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let t = tokenize_enzyme("MKVX").unwrap();
        let back: alloc::string::String = t.iter().map(|&x| enzyme_char(x)).collect();
        assert_eq!(back, "MKVX");
        let s = tokenize_substrate("CC(=O)O").unwrap();
        let back: alloc::string::String = s.iter().map(|&x| substrate_char(x)).collect();
        assert_eq!(back, "CC(=O)O");
        assert_eq!(SUBSTRATE_VOCAB, 95);
    }

    #[test]
    fn unknown_tokens_name_position() {
        assert_eq!(
            tokenize_enzyme("AC1"),
            Err(Error::Vocabulary {
                vocabulary: "enzyme",
                position: 2,
                token: '1'
            })
        );
        assert!(tokenize_enzyme("B").is_err());
        assert!(matches!(
            tokenize_substrate("C\u{e9}"),
            Err(Error::Vocabulary { position: 1, .. })
        ));
    }
}
