//! Caption TSV: one `id<TAB>caption` record per line, words separated by
//! single spaces. An id may repeat to carry several references.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionRecord {
    pub id: String,
    pub words: Vec<String>,
}

pub fn write_captions(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        if r.id.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!("clip id {:?} contains a tab or newline", r.id)));
        }
        text.push_str(&r.id);
        text.push('\t');
        text.push_str(&r.words.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, caption)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                message: "expected `id<TAB>caption`".into(),
            });
        };
        out.push(CaptionRecord {
            id: id.to_owned(),
            words: caption.split_whitespace().map(str::to_owned).collect(),
        });
    }
    Ok(out)
}
