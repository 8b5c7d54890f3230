//! Byte-level tokenizer with two specials.

pub const BOS: usize = 256;
/// Document separator.
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Lossy for specials and invalid UTF-8 splits.
pub fn decode(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Printable form of a single token.
pub fn token_str(t: usize) -> String {
    match t {
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        b if b < 256 => {
            let c = b as u8 as char;
            if c.is_ascii_graphic() || c == ' ' {
                c.to_string()
            } else {
                format!("\\x{b:02x}")
            }
        }
        other => format!("<{other}>"),
    }
}
