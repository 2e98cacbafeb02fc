//! File formats. Record files are JSON Lines (one object per line, UTF-8, blank lines
//! skipped); trees and hierarchies are single JSON documents; feature tables are text.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::RleMask;
use crate::nms::{BBox, Proposal};
use crate::taxonomy::{CategoryRecord, CategorySet, ClassificationTree};
use crate::tree_builder::{FeatureTable, Hierarchy};

/// Streams typed records from a JSON Lines file, yielding `(line_number, record)`.
pub struct JsonlReader<T> {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    _marker: PhantomData<T>,
}

impl<T: DeserializeOwned> JsonlReader<T> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(JsonlReader {
            path,
            lines: BufReader::new(file).lines(),
            line_no: 0,
            _marker: PhantomData,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<T: DeserializeOwned> Iterator for JsonlReader<T> {
    type Item = Result<(usize, T)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(serde_json::from_str(&line).map(|r| (self.line_no, r)).map_err(|e| {
                Error::Record {
                    path: self.path.clone(),
                    line: self.line_no,
                    message: e.to_string(),
                }
            }));
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    JsonlReader::open(path)?.map(|r| r.map(|(_, v)| v)).collect()
}

pub fn create(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl_line<W: Write, T: Serialize>(out: &mut W, value: &T, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| Error::invalid(e.to_string()))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, values: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for v in values {
        write_jsonl_line(&mut out, v, path)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_text(path, &(to_json_pretty(value)? + "\n"))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_categories(path: impl AsRef<Path>, strict: bool) -> Result<CategorySet> {
    let path = path.as_ref();
    let mut records = Vec::new();
    for item in JsonlReader::<CategoryRecord>::open(path)? {
        records.push(item?.1);
    }
    CategorySet::from_records(records, strict).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn write_categories(path: impl AsRef<Path>, categories: &CategorySet) -> Result<()> {
    write_jsonl(path, &categories.to_records())
}

pub fn read_tree(path: impl AsRef<Path>) -> Result<ClassificationTree> {
    read_json(path)
}

pub fn write_tree(path: impl AsRef<Path>, tree: &ClassificationTree) -> Result<()> {
    write_json(path, tree)
}

pub fn read_hierarchy(path: impl AsRef<Path>) -> Result<Hierarchy> {
    read_json(path)
}

#[derive(Debug, Deserialize, Serialize)]
struct TableHeader {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "D")]
    d: usize,
}

/// Parses a feature table: a JSON header line `{"N": rows, "D": cols}` followed by `N` lines
/// of `D` whitespace-separated numbers. Row `i` holds class `i`. `#` starts a comment line.
pub fn parse_feature_table(text: &str, path: &Path) -> Result<FeatureTable> {
    let err = |line: usize, message: String| Error::Record { path: path.to_path_buf(), line, message };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or_else(|| err(1, "missing {N, D} header".into()))?;
    let header: TableHeader = serde_json::from_str(header).map_err(|e| err(hline, format!("bad header: {e}")))?;
    let mut data = Vec::with_capacity(header.n * header.d);
    let mut rows = 0;
    for (line, l) in lines {
        let row = l
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| err(line, format!("not a number: `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.d {
            return Err(err(line, format!("{} values, expected D={}", row.len(), header.d)));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(err(line, "non-finite feature value".into()));
        }
        data.extend(row);
        rows += 1;
    }
    if rows != header.n {
        return Err(err(hline, format!("header declares N={} rows, found {rows}", header.n)));
    }
    FeatureTable::new(header.n, header.d, data)
}

pub fn read_feature_table(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_table(&text, path)
}

pub fn format_feature_table(table: &FeatureTable) -> String {
    let mut out = serde_json::to_string(&TableHeader { n: table.rows(), d: table.dim() }).unwrap();
    out.push('\n');
    for i in 0..table.rows() {
        let row: Vec<String> = table.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_feature_table(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    write_text(path, &format_feature_table(table))
}

/// One line of a mask fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub class_id: usize,
    pub rle: RleMask,
}

/// Reads a mask fixture file and groups masks by class; every class in `0..n` needs one.
pub fn read_class_masks(path: impl AsRef<Path>, n: usize) -> Result<Vec<Vec<RleMask>>> {
    let path = path.as_ref();
    let mut masks = vec![Vec::new(); n];
    for item in JsonlReader::<MaskRecord>::open(path)? {
        let (line, rec) = item?;
        let slot = masks
            .get_mut(rec.class_id)
            .ok_or_else(|| Error::ClassOutOfRange { class_id: rec.class_id, n }.at_line(path, line))?;
        slot.push(rec.rle);
    }
    if let Some(c) = masks.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("{}: class {c} has no masks", path.display())));
    }
    Ok(masks)
}

/// One line of a proposal file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: String,
    #[serde(flatten)]
    pub proposal: Proposal,
}

/// One line of a kept-proposal output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptProposalRecord {
    pub image_id: String,
    #[serde(flatten)]
    pub proposal: Proposal,
    pub kept_rank: usize,
}

/// Ground truth as used by proposal labelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBoxRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}
