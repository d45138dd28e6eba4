//! Byte-level tokenizer: token id = byte value, specials from 256 upward.

use crate::error::{Error, Result};

pub const MASK_TOKEN: u32 = 256;
pub const EOS_TOKEN: u32 = 257;
pub const PAD_TOKEN: u32 = 258;
/// Smallest vocabulary that holds every byte plus the specials.
pub const MIN_VOCAB: usize = 259;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Renders tokens back to text; specials and out-of-byte ids are shown
/// as `<mask>`, `<eos>`, `<pad>` or `<id:N>`.
pub fn decode(tokens: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &t in tokens {
        if t < 256 {
            bytes.push(t as u8);
            continue;
        }
        flush(&mut bytes, &mut out);
        match t {
            MASK_TOKEN => out.push_str("<mask>"),
            EOS_TOKEN => out.push_str("<eos>"),
            PAD_TOKEN => out.push_str("<pad>"),
            other => out.push_str(&format!("<id:{other}>")),
        }
    }
    flush(&mut bytes, &mut out);
    out
}

/// Parses a comma-separated list of token ids, e.g. `"72, 105, 257"`.
pub fn parse_token_ids(list: &str) -> Result<Vec<u32>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .map_err(|_| Error::Usage(format!("invalid token id {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let text = "héllo, world";
        assert_eq!(decode(&encode(text)), text);
        assert_eq!(encode("AB"), vec![65, 66]);
    }

    #[test]
    fn specials_render() {
        assert_eq!(
            decode(&[104, 105, MASK_TOKEN, EOS_TOKEN, 300]),
            "hi<mask><eos><id:300>"
        );
    }

    #[test]
    fn id_lists() {
        assert_eq!(parse_token_ids("1, 2,3,").unwrap(), vec![1, 2, 3]);
        assert!(parse_token_ids("1,x").is_err());
    }
}
