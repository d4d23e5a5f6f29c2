//! Checkpoint format: text header of `key=value` lines closed by
//! `end_header`, then theta as little-endian f64.
//!
//! ```text
//! minirl-checkpoint 1
//! arch=tabular_kgram
//! vocab_size=12
//! context_len=3
//! hidden_sizes=
//! embed_dim=0
//! param_count=26364
//! end_header
//! <param_count * 8 bytes>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{PolicyParams, PolicySpec};
use crate::error::{Error, Result};

const MAGIC: &str = "minirl-checkpoint 1";
const END: &str = "end_header";

pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut out: W) -> Result<()> {
    let spec = &params.spec;
    let hidden: Vec<String> = spec.hidden_sizes.iter().map(|h| h.to_string()).collect();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "arch={}", spec.arch)?;
    writeln!(out, "vocab_size={}", spec.vocab_size)?;
    writeln!(out, "context_len={}", spec.context_len)?;
    writeln!(out, "hidden_sizes={}", hidden.join(","))?;
    writeln!(out, "embed_dim={}", spec.embed_dim)?;
    writeln!(out, "param_count={}", params.theta.len())?;
    writeln!(out, "{END}")?;
    let mut bytes = Vec::with_capacity(params.theta.len() * 8);
    for x in &params.theta {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<PolicyParams> {
    let mut reader = BufReader::new(input);
    let bad = |line: usize, message: String| Error::Parse {
        path: "<checkpoint>".into(),
        line,
        message,
    };

    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad(1, format!("expected `{MAGIC}`")));
    }
    let mut fields = std::collections::BTreeMap::new();
    let mut lineno = 1;
    loop {
        line.clear();
        lineno += 1;
        if reader.read_line(&mut line)? == 0 {
            return Err(bad(lineno, "header not terminated".into()));
        }
        let l = line.trim_end_matches('\n');
        if l == END {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| bad(lineno, format!("expected key=value, got `{l}`")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| bad(lineno, format!("missing header field `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| bad(lineno, format!("field `{k}` is not an integer")))
    };
    let hidden_sizes = {
        let raw = get("hidden_sizes")?;
        if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',')
                .map(|h| h.parse().map_err(|_| bad(lineno, format!("bad hidden size `{h}`"))))
                .collect::<Result<Vec<usize>>>()?
        }
    };
    let spec = PolicySpec {
        arch: get("arch")?.parse()?,
        vocab_size: num("vocab_size")?,
        context_len: num("context_len")?,
        hidden_sizes,
        embed_dim: num("embed_dim")?,
    };
    spec.validate()?;
    let count = num("param_count")?;
    if count != spec.param_count() {
        return Err(bad(
            lineno,
            format!("param_count {count} does not match spec ({})", spec.param_count()),
        ));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(bad(
            lineno,
            format!("expected {} payload bytes, found {}", count * 8, bytes.len()),
        ));
    }
    let theta = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PolicyParams::from_theta(spec, theta)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    read_checkpoint(fs::File::open(path)?)
}
