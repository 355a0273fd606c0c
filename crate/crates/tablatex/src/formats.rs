//! On-disk formats: vocabulary listings, JSONL label and prediction files,
//! CSV tables and PNG images.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tablatex_core::vocab::{Category, VocabEntry, ROW_SEPARATOR};
use tablatex_core::{ImageTensor, Task, Vocabulary};

use crate::error::{Error, Result};

/// Category column value for rare tokens folded into `LATEX_TOKEN`.
pub const REPLACED: &str = "replaced";

/// One line per token: `text\tcategory\tfrequency`, plus a fourth
/// `row-separator` column on flagged tokens. Folded rare tokens follow as
/// `text\treplaced\tfrequency` lines.
pub fn vocab_to_string(v: &Vocabulary) -> String {
    let mut out = String::new();
    for e in v.entries() {
        let _ = write!(out, "{}\t{}\t{}", e.text, e.category.as_str(), e.frequency);
        if e.row_separator {
            out.push_str("\trow-separator");
        }
        out.push('\n');
    }
    for (text, n) in v.replaced() {
        let _ = writeln!(out, "{text}\t{REPLACED}\t{n}");
    }
    out
}

pub fn vocab_from_str(s: &str, task: Task, max_seq_len: usize) -> Result<Vocabulary> {
    let mut entries = Vec::new();
    let mut replaced = BTreeMap::new();
    for (n, line) in s.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Data(format!("vocabulary line {}: {m}", n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(bad("expected 3 or 4 tab-separated columns"));
        }
        let frequency: u64 = cols[2].parse().map_err(|_| bad("frequency is not an integer"))?;
        if cols[1] == REPLACED {
            replaced.insert(cols[0].to_string(), frequency);
            continue;
        }
        let category: Category = cols[1].parse().map_err(|_| bad("unknown category"))?;
        let flagged = match cols.get(3) {
            None => false,
            Some(&"row-separator") => true,
            Some(_) => return Err(bad("fourth column must be `row-separator`")),
        };
        entries.push(VocabEntry {
            text: cols[0].to_string(),
            category,
            frequency,
            row_separator: flagged || cols[0] == ROW_SEPARATOR,
        });
    }
    Ok(Vocabulary::from_entries(entries, task, max_seq_len)?.with_replaced(replaced)?)
}

pub fn read_vocab(path: &Path, task: Task, max_seq_len: usize) -> Result<Vocabulary> {
    vocab_from_str(&read_text(path)?, task, max_seq_len)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

pub fn write_text(path: &Path, s: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, s).map_err(Error::io(path))
}

/// Ground-truth record: image path relative to the labels file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub id: String,
    pub image: String,
    pub label: String,
}

/// A prediction or any `{id, label}` record; `image` is accepted and ignored
/// so ground-truth files can be read the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredRecord {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn jsonl_string<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    out
}

/// Pairs records by id. Ids missing on either side are an error that lists
/// up to ten of them; duplicate ids are an error too.
pub fn join_by_id<'a>(pred: &'a [PredRecord], gt: &'a [PredRecord]) -> Result<Vec<(&'a PredRecord, &'a PredRecord)>> {
    let index = |recs: &'a [PredRecord], what: &str| -> Result<BTreeMap<&'a str, &'a PredRecord>> {
        let mut m = BTreeMap::new();
        for r in recs {
            if m.insert(r.id.as_str(), r).is_some() {
                return Err(Error::Data(format!("duplicate id `{}` in {what}", r.id)));
            }
        }
        Ok(m)
    };
    let p = index(pred, "predictions")?;
    let g = index(gt, "ground truth")?;
    let missing_pred: Vec<&str> = g.keys().filter(|k| !p.contains_key(*k)).copied().collect();
    let missing_gt: Vec<&str> = p.keys().filter(|k| !g.contains_key(*k)).copied().collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let head = |v: &[&str]| v.iter().take(10).copied().collect::<Vec<_>>().join(", ");
        return Err(Error::Data(format!(
            "id mismatch: {} missing from predictions [{}], {} missing from ground truth [{}]",
            missing_pred.len(),
            head(&missing_pred),
            missing_gt.len(),
            head(&missing_gt)
        )));
    }
    Ok(g.iter().map(|(k, gr)| (p[k], *gr)).collect())
}

/// `x,y` rows with a header and LF endings.
pub fn xy_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("x,y\n");
    for (x, y) in rows {
        let _ = writeln!(out, "{},{}", csv_field(x), y);
    }
    out
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn load_image(path: &Path, channels: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = if channels == 1 {
        img.to_luma8().into_raw().into_iter().map(|p| f32::from(p) / 255.0).collect()
    } else {
        let rgb = img.to_rgb8().into_raw();
        (0..3).flat_map(|c| rgb.iter().skip(c).step_by(3).map(|&p| f32::from(p) / 255.0).collect::<Vec<_>>()).collect()
    };
    Ok(ImageTensor::new(channels, h, w, data)?)
}

/// 8-bit grayscale PNG (RGB images are reduced to luma).
pub fn save_png(path: &Path, img: &ImageTensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.to_gray_u8())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Distinct whitespace tokens of a set of labels, for building ad-hoc vocabularies.
pub fn token_set<'a>(labels: impl IntoIterator<Item = &'a str>) -> BTreeSet<&'a str> {
    labels.into_iter().flat_map(str::split_whitespace).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_file_round_trip_with_replacements() {
        let corpus = ["a b \\\\ 2c", "a b \\\\", "a \\hline"];
        let v = Vocabulary::build(corpus, Task::Tsr, 2).unwrap();
        let text = vocab_to_string(&v);
        assert!(text.starts_with("<sos>\tspecial\t0\n<eos>\tspecial\t0\n<pad>\tspecial\t0\n<unk>\tspecial\t0\n"));
        assert!(text.contains("\\\\\tstructure\t2\trow-separator\n"));
        assert!(text.ends_with("2c\treplaced\t1\n\\hline\treplaced\t1\n"));
        let back = vocab_from_str(&text, Task::Tsr, 250).unwrap();
        assert_eq!(back, v);
        assert_eq!(vocab_to_string(&back), text);
    }

    #[test]
    fn vocab_file_rejects_bad_lines() {
        assert!(vocab_from_str("<sos>\tspecial\n", Task::Tsr, 10).is_err());
        let good = "<sos>\tspecial\t0\n<eos>\tspecial\t0\n<pad>\tspecial\t0\n<unk>\tspecial\t0\n";
        assert!(vocab_from_str(&format!("{good}x\tweird\t1\n"), Task::Tsr, 10).is_err());
        assert!(vocab_from_str(&format!("{good}x\tcontent\t1\tbogus\n"), Task::Tsr, 10).is_err());
        let v = vocab_from_str(&format!("{good}NEWROW\tstructure\t3\trow-separator\n"), Task::Tsr, 10).unwrap();
        assert!(v.is_row_separator(4));
    }

    #[test]
    fn join_reports_missing_ids() {
        let r = |id: &str| PredRecord { id: id.into(), label: "x".into(), logprob: None };
        let p = vec![r("a"), r("b")];
        let g = vec![r("b"), r("a")];
        let pairs = join_by_id(&p, &g).unwrap();
        assert_eq!(pairs.len(), 2);
        let err = join_by_id(&p, &[r("a"), r("c")]).unwrap_err().to_string();
        assert!(err.contains("[c]") && err.contains("[b]"), "{err}");
        assert!(join_by_id(&[r("a"), r("a")], &g).is_err());
    }

    #[test]
    fn csv_quotes_awkward_fields() {
        let rows = vec![("a,b".to_string(), 1.0), ("plain".to_string(), 0.5)];
        assert_eq!(xy_csv(&rows), "x,y\n\"a,b\",1\nplain,0.5\n");
    }
}
