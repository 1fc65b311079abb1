//! Plain-text architecture descriptions for the cost report.
//!
//! One layer per line, `#` starts a comment:
//!
//! ```text
//! input 32 1          # window side, channels
//! conv 16 5 same      # filters, kernel side, padding
//! pool 2
//! lcn
//! fc 2
//! softmax
//! ```

use dcf_core::error::{DcfError, Result};
use dcf_core::layers::{LayerSpec, LcnParams, NetworkSpec};
use dcf_core::tensor::Padding;

fn number(line: usize, tok: Option<&str>) -> Result<usize> {
    let tok = tok.ok_or_else(|| DcfError::Format(format!("arch line {line}: missing number")))?;
    tok.parse().map_err(|_| DcfError::Format(format!("arch line {line}: `{tok}` is not a number")))
}

pub fn parse(text: &str) -> Result<NetworkSpec> {
    let mut spec = NetworkSpec { input_channels: 1, window_side: 0, layers: Vec::new() };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut toks = raw.split('#').next().unwrap_or("").split_whitespace();
        let Some(kind) = toks.next() else { continue };
        match kind {
            "input" => {
                spec.window_side = number(line, toks.next())?;
                if let Some(c) = toks.next() {
                    spec.input_channels = number(line, Some(c))?;
                }
            }
            "conv" => {
                let filters = number(line, toks.next())?;
                let size = number(line, toks.next())?;
                let padding = match toks.next().unwrap_or("valid") {
                    "valid" => Padding::Valid,
                    "same" => Padding::Same,
                    p => return Err(DcfError::Format(format!("arch line {line}: unknown padding `{p}`"))),
                };
                spec.layers.push(LayerSpec::Conv { filters, size, padding });
            }
            "pool" => spec.layers.push(LayerSpec::Pool { size: number(line, toks.next())? }),
            "lcn" => spec.layers.push(LayerSpec::Lcn(LcnParams::reference())),
            "fc" => spec.layers.push(LayerSpec::Fc { outputs: number(line, toks.next())? }),
            "softmax" => spec.layers.push(LayerSpec::Softmax),
            k => return Err(DcfError::Format(format!("arch line {line}: unknown layer `{k}`"))),
        }
        if let Some(extra) = toks.next() {
            return Err(DcfError::Format(format!("arch line {line}: unexpected `{extra}`")));
        }
    }
    if spec.window_side == 0 {
        return Err(DcfError::Format("architecture needs an `input` line".into()));
    }
    Ok(spec)
}
