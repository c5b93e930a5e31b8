use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, NdFloat};

use super::forward::{decode_recon, encode, quantize};
use super::params::BeatParams;
use crate::error::{Error, Result};
use crate::quantizer::UsageStats;

pub const START_TOKEN: &str = "<ECG_START>";
pub const END_TOKEN: &str = "<ECG_END>";
const INDEX_PREFIX: &str = "<ECG_Index_";

/// Assignment of one query: core index, then residual index if present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Code {
    pub core: usize,
    pub residual: Option<usize>,
}

/// Discrete representation of one segment: `m` codes in query order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub codes: Vec<Code>,
    /// Core book size, the offset of residual indices on the wire.
    pub k1: usize,
    pub k2: usize,
}

impl TokenSequence {
    /// Flat index list: core `i` maps to `i`, residual `j` to `k1 + j`.
    pub fn indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.codes.len() * 2);
        for c in &self.codes {
            out.push(c.core);
            if let Some(r) = c.residual {
                out.push(self.k1 + r);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.indices().len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Encodes and quantizes a `T x C` context.
pub fn tokenize<F: NdFloat>(
    params: &BeatParams<F>,
    x: ArrayView2<F>,
    stats: Option<&mut UsageStats>,
) -> Result<TokenSequence> {
    let latent_q = encode(params, x)?;
    let dvq = quantize(params, latent_q.view(), stats)?;
    Ok(TokenSequence {
        codes: dvq
            .iter()
            .map(|r| Code {
                core: r.core_index,
                residual: r.residual_index,
            })
            .collect(),
        k1: params.config.k1,
        k2: params.config.residual_size(),
    })
}

pub fn serialize_tokens(seq: &TokenSequence) -> String {
    let mut s = String::from(START_TOKEN);
    for i in seq.indices() {
        write!(s, "{INDEX_PREFIX}{i}>").expect("writing to a string");
    }
    s.push_str(END_TOKEN);
    s
}

/// Parses the wire format back into codes. `levels` decides whether indices
/// alternate core/residual; every index is range-checked.
pub fn parse_tokens(text: &str, k1: usize, k2: usize, levels: usize) -> Result<TokenSequence> {
    let err = |position: usize, message: String| Error::Token { position, message };
    let mut rest = text.trim();
    rest = rest
        .strip_prefix(START_TOKEN)
        .ok_or_else(|| err(0, format!("expected {START_TOKEN}")))?;
    let mut indices = Vec::new();
    loop {
        let position = indices.len() + 1;
        if let Some(tail) = rest.strip_prefix(END_TOKEN) {
            if !tail.trim().is_empty() {
                return Err(err(position + 1, "trailing text after end token".into()));
            }
            break;
        }
        let body = rest
            .strip_prefix(INDEX_PREFIX)
            .ok_or_else(|| err(position, "expected an index token or end token".into()))?;
        let close = body
            .find('>')
            .ok_or_else(|| err(position, "unterminated index token".into()))?;
        let index: usize = body[..close]
            .parse()
            .map_err(|_| err(position, format!("bad index {:?}", &body[..close])))?;
        indices.push((position, index));
        rest = &body[close + 1..];
    }
    if levels == 2 && indices.len() % 2 != 0 {
        return Err(err(indices.len() + 1, "odd number of indices for two levels".into()));
    }
    let mut codes = Vec::new();
    for chunk in indices.chunks(levels.max(1)) {
        let (pos, core) = chunk[0];
        if core >= k1 {
            return Err(err(pos, format!("core index {core} out of range 0..{k1}")));
        }
        let residual = match chunk.get(1) {
            Some(&(pos, i)) => {
                if i < k1 || i >= k1 + k2 {
                    return Err(err(pos, format!("residual index {i} out of range {k1}..{}", k1 + k2)));
                }
                Some(i - k1)
            }
            None => None,
        };
        codes.push(Code { core, residual });
    }
    Ok(TokenSequence { codes, k1, k2 })
}

/// Looks the codes up and runs the reconstruction decoder.
pub fn decode_tokens<F: NdFloat>(params: &BeatParams<F>, seq: &TokenSequence) -> Result<Array2<F>> {
    let cfg = &params.config;
    if seq.codes.len() != cfg.queries {
        return Err(Error::Token {
            position: 0,
            message: format!("{} codes, model expects {}", seq.codes.len(), cfg.queries),
        });
    }
    let mut quantized = Array2::zeros((cfg.queries, cfg.dim));
    for (i, code) in seq.codes.iter().enumerate() {
        if code.core >= params.core_codebook.size() {
            return Err(Error::Token {
                position: i,
                message: format!("core index {} out of range", code.core),
            });
        }
        let mut row = quantized.row_mut(i);
        row += &params.core_codebook.entry(code.core);
        match (code.residual, &params.residual_codebook) {
            (Some(r), Some(book)) if r < book.size() => row += &book.entry(r),
            (None, None) => {}
            _ => {
                return Err(Error::Token {
                    position: i,
                    message: "residual code does not match the model".into(),
                })
            }
        }
    }
    decode_recon(params, quantized.view())
}
