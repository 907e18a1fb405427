//! Checkpoint text format: a header line carrying the model config, then
//! one line per parameter block `name<TAB>rows<TAB>cols<TAB>base64`.

use std::fmt::Write as _;
use std::path::Path;

use super::{AlignmentModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::store::{decode_f64s, encode_f64s, header_value, parse_field};

pub const CHECKPOINT_MAGIC: &str = "RAAP-CHECKPOINT";
const VERSION: u32 = 1;

pub fn checkpoint_to_string(m: &AlignmentModel) -> String {
    let c = m.config();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{CHECKPOINT_MAGIC}\tversion={VERSION}\tblocks={}\theight={}\twidth={}\tchannels={}\tpatch={}\td={}\tn_heads={}\td_ff={}\tn_layers={}\tk_max={}\tfilm_hidden={}\tgate_hidden={}\thead_hidden={}\teps={:?}\tattention={}",
        m.names().len(),
        c.height,
        c.width,
        c.channels,
        c.patch,
        c.d,
        c.n_heads,
        c.d_ff,
        c.n_layers,
        c.k_max,
        c.film_hidden,
        c.gate_hidden,
        c.head_hidden,
        c.eps,
        c.attention.as_str(),
    );
    for (name, t) in m.names().iter().zip(m.params()) {
        let (r, c) = t.dims2().expect("parameters are matrices");
        let _ = writeln!(out, "{name}\t{r}\t{c}\t{}", encode_f64s(t.data()));
    }
    out
}

pub fn checkpoint_from_str(text: &str) -> Result<AlignmentModel> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty checkpoint".into(),
    })?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.first() != Some(&CHECKPOINT_MAGIC) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("missing {CHECKPOINT_MAGIC} header"),
        });
    }
    let num = |key: &str| -> Result<usize> { parse_field(header_value(&fields, key, 1)?, key, 1) };
    let version = num("version")?;
    if version != VERSION as usize {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let blocks = num("blocks")?;
    let config = ModelConfig {
        height: num("height")?,
        width: num("width")?,
        channels: num("channels")?,
        patch: num("patch")?,
        d: num("d")?,
        n_heads: num("n_heads")?,
        d_ff: num("d_ff")?,
        n_layers: num("n_layers")?,
        k_max: num("k_max")?,
        film_hidden: num("film_hidden")?,
        gate_hidden: num("gate_hidden")?,
        head_hidden: num("head_hidden")?,
        eps: parse_field(header_value(&fields, "eps", 1)?, "eps", 1)?,
        attention: header_value(&fields, "attention", 1)?
            .parse()
            .map_err(|e: Error| Error::Parse {
                line: 1,
                msg: e.to_string(),
            })?,
    };
    let mut names = Vec::with_capacity(blocks);
    let mut params = Vec::with_capacity(blocks);
    let mut last = 1;
    for (ln, line) in lines {
        last = ln;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 4 fields, found {}", parts.len()),
            });
        }
        let rows: usize = parse_field(parts[1], "rows", ln)?;
        let cols: usize = parse_field(parts[2], "cols", ln)?;
        let data = decode_f64s(parts[3], ln)?;
        let t = Tensor::matrix(rows, cols, data).map_err(|e| Error::Parse {
            line: ln,
            msg: e.to_string(),
        })?;
        names.push(parts[0].to_string());
        params.push(t);
    }
    if names.len() != blocks {
        return Err(Error::Parse {
            line: last + 1,
            msg: format!("expected {blocks} parameter blocks, found {}", names.len()),
        });
    }
    AlignmentModel::from_parts(config, names, params)
}

pub fn save_checkpoint(m: &AlignmentModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_string(m)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AlignmentModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
