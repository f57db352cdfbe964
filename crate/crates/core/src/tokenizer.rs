//! Byte-level tokenizer. Every byte is its own token; three specials follow.

pub type Token = u16;

pub const BYTE_VOCAB: usize = 256;
pub const BOS: Token = 256;
pub const EOS: Token = 257;
pub const PAD: Token = 258;
pub const VOCAB_SIZE: usize = 259;

/// Tokens used for training: `BOS bytes.. EOS`.
pub fn encode(text: &str) -> Vec<Token> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(text.bytes().map(Token::from));
    out.push(EOS);
    out
}

/// Raw byte tokens without specials (used for shingling and prompts).
pub fn encode_bytes(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

pub fn decode(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| (t as usize) < BYTE_VOCAB)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let t = encode("hi there");
        assert_eq!(t.first(), Some(&BOS));
        assert_eq!(t.last(), Some(&EOS));
        assert_eq!(t.len(), 10);
        assert_eq!(decode(&t), "hi there");
        assert_eq!(encode_bytes("ab"), vec![97, 98]);
    }
}
