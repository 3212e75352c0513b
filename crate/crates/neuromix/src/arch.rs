//! Architecture strings: `C<n>` convolution with n filters, `M` 2×2
//! max-pooling, `F<n>` fully connected with n outputs. The final token must
//! be an `F` whose width is the cluster count; flattening before the first
//! `F` after spatial layers is implicit.

use crate::error::{Error, Result};
use crate::layers::POOL_WINDOW;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchToken {
    Conv(usize),
    Pool,
    Dense(usize),
}

impl ArchToken {
    fn render(&self) -> String {
        match self {
            ArchToken::Conv(n) => format!("C{n}"),
            ArchToken::Pool => "M".to_string(),
            ArchToken::Dense(n) => format!("F{n}"),
        }
    }
}

/// A validated architecture: token list plus the per-sample input shape it
/// was checked against (`[d]` for vectors, `[c, h, w]` for images).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    tokens: Vec<ArchToken>,
    input_shape: Vec<usize>,
}

impl ArchSpec {
    pub fn tokens(&self) -> &[ArchToken] {
        &self.tokens
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Width of the final dense layer (the cluster count K).
    pub fn clusters(&self) -> usize {
        match self.tokens.last() {
            Some(ArchToken::Dense(n)) => *n,
            _ => unreachable!("validated arch ends with a dense token"),
        }
    }

    /// Canonical textual form; `parse_arch(render(a)) == a`.
    pub fn render(&self) -> String {
        self.tokens.iter().map(ArchToken::render).collect::<Vec<_>>().join(" ")
    }
}

fn parse_token(tok: &str, position: usize) -> Result<ArchToken> {
    let err = |msg: String| Error::parse(format!("token {position}"), msg);
    if tok == "M" {
        return Ok(ArchToken::Pool);
    }
    if let Some(digits) = tok.strip_prefix('C') {
        let n: usize =
            digits.parse().map_err(|_| err(format!("bad filter count in {tok:?}")))?;
        if n == 0 {
            return Err(err("filter count must be positive".into()));
        }
        return Ok(ArchToken::Conv(n));
    }
    if let Some(digits) = tok.strip_prefix('F') {
        let n: usize = digits.parse().map_err(|_| err(format!("bad width in {tok:?}")))?;
        if n == 0 {
            return Err(err("dense width must be positive".into()));
        }
        return Ok(ArchToken::Dense(n));
    }
    Err(err(format!("unknown token {tok:?}")))
}

/// Parses and validates an architecture string against an input shape.
///
/// Errors carry the 1-based token position: unknown tokens, convolution or
/// pooling after the network has flattened (or on vector input), and a
/// non-`F` terminal token are all rejected.
pub fn parse_arch(spec: &str, input_shape: &[usize]) -> Result<ArchSpec> {
    let words: Vec<&str> = spec.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::parse("token 1", "empty architecture"));
    }
    if input_shape.len() != 1 && input_shape.len() != 3 {
        return Err(Error::shape(format!(
            "input shape must be [d] or [c, h, w], got {input_shape:?}"
        )));
    }
    if input_shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero dimension in input shape {input_shape:?}")));
    }

    let mut tokens = Vec::with_capacity(words.len());
    // None once flattened to a vector; Some((c, h, w)) while spatial.
    let mut spatial: Option<(usize, usize, usize)> = match input_shape {
        [c, h, w] => Some((*c, *h, *w)),
        _ => None,
    };
    for (idx, word) in words.iter().enumerate() {
        let position = idx + 1;
        let tok = parse_token(word, position)?;
        match tok {
            ArchToken::Conv(n) => match spatial {
                Some((_, h, w)) => spatial = Some((n, h, w)),
                None => {
                    return Err(Error::parse(
                        format!("token {position}"),
                        "convolution requires spatial input (after flatten or on vector data)",
                    ))
                }
            },
            ArchToken::Pool => match spatial {
                Some((c, h, w)) => {
                    spatial = Some((c, h.div_ceil(POOL_WINDOW), w.div_ceil(POOL_WINDOW)))
                }
                None => {
                    return Err(Error::parse(
                        format!("token {position}"),
                        "pooling requires spatial input",
                    ))
                }
            },
            ArchToken::Dense(_) => spatial = None,
        }
        tokens.push(tok);
    }
    if !matches!(tokens.last(), Some(ArchToken::Dense(_))) {
        return Err(Error::parse(
            format!("token {}", words.len()),
            "architecture must end with a dense F<K> token",
        ));
    }
    Ok(ArchSpec { tokens, input_shape: input_shape.to_vec() })
}
