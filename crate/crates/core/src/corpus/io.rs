use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Context, Mention, Vocabulary};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    tokens: Vec<usize>,
    mentions: Vec<(i64, usize, usize)>,
}

fn encode(ctx: &Context) -> Line {
    Line {
        tokens: ctx.tokens.clone(),
        mentions: ctx
            .mentions
            .iter()
            .map(|m| (m.entity.map_or(-1, |e| e as i64), m.start, m.end))
            .collect(),
    }
}

/// Reads a JSON-lines corpus. Blank lines are ignored; line numbers are 1-based.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Context>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let raw: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let mut mentions = Vec::with_capacity(raw.mentions.len());
        for (entity, start, end) in raw.mentions {
            if end < start {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("mention end {end} before start {start}"),
                });
            }
            let entity = match entity {
                -1 => None,
                e if e >= 0 => Some(e as usize),
                e => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("entity id {e} is negative and not -1"),
                    })
                }
            };
            mentions.push(Mention::new(entity, start, end));
        }
        let ctx = Context {
            tokens: raw.tokens,
            mentions,
        };
        if let Err(e) = ctx.validate() {
            return Err(Error::Validation(vec![format!("context {} (line {lineno}): {e}", out.len())]));
        }
        out.push(ctx);
    }
    Ok(out)
}

/// Writes one compact JSON object per line. Output is canonical: reading and
/// re-writing a file produced here yields identical bytes.
pub fn write_corpus(path: impl AsRef<Path>, contexts: &[Context]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ctx in contexts {
        serde_json::to_writer(&mut w, &encode(ctx)).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_vocabulary(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(vocab).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
