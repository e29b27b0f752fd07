use std::fs;
use std::io::Write;
use std::path::Path;

use super::{dedup_pairs, FeatureMatrix, InteractionLog, Vocab};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"M2VF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Splits a record on TAB, or on runs of whitespace when the line holds no TAB.
fn fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Reads `user<TAB>item[<TAB>...]` rows. Tokens get dense indices in
/// first-seen order and repeated pairs are dropped.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let text = read_text(path)?;
    let mut users = Vocab::default();
    let mut items = Vocab::default();
    let mut entries = Vec::new();
    for (line, rec) in records(&text) {
        let f = fields(rec);
        if f.len() < 2 || f[0].is_empty() || f[1].is_empty() {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: format!("expected `user<TAB>item`, got {rec:?}"),
            });
        }
        entries.push((users.intern(f[0]), items.intern(f[1])));
    }
    if entries.is_empty() {
        return Err(Error::Empty(path.into()));
    }
    Ok(InteractionLog {
        entries: dedup_pairs(entries),
        user_count: users.len(),
        item_count: items.len(),
        users,
        items,
    })
}

/// Attribute rows aligned with an item vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTable {
    pub rows: Vec<Vec<usize>>,
    pub vocab: Vocab,
    /// Items absent from the file or listed with no attributes.
    pub flagged: Vec<usize>,
}

/// Reads `item<TAB>attr[,attr...]` rows against a known item vocabulary.
pub fn load_attributes(path: &Path, items: &Vocab) -> Result<AttributeTable> {
    let text = read_text(path)?;
    let mut vocab = Vocab::default();
    let mut rows = vec![Vec::new(); items.len()];
    for (line, rec) in records(&text) {
        let (item_tok, rest) = match rec.split_once('\t') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => {
                let mut it = rec.splitn(2, char::is_whitespace);
                (it.next().unwrap_or("").trim(), it.next().unwrap_or("").trim())
            }
        };
        let item = items.get(item_tok).ok_or_else(|| Error::Parse {
            path: path.into(),
            line,
            msg: format!("unknown item `{item_tok}`"),
        })?;
        for tok in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            rows[item].push(vocab.intern(tok));
        }
    }
    for row in &mut rows {
        row.sort_unstable();
        row.dedup();
    }
    let flagged = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_empty())
        .map(|(i, _)| i)
        .collect();
    Ok(AttributeTable { rows, vocab, flagged })
}

/// Reads image features in either the `M2VF` binary container or the
/// `item<TAB>v1,v2,...` text form; the format is sniffed from the magic bytes.
pub fn load_image_features(path: &Path, items: &Vocab, dim: Option<usize>) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(FEATURE_MAGIC) {
        read_binary(path, &bytes, items, dim)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
            path: path.into(),
            line: 0,
            msg: "neither an M2VF container nor UTF-8 text".into(),
        })?;
        read_text_features(path, &text, items, dim)
    }
}

fn read_binary(path: &Path, bytes: &[u8], items: &Vocab, dim: Option<usize>) -> Result<FeatureMatrix> {
    let bad = |msg: String| Error::Parse {
        path: path.into(),
        line: 0,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if let Some(want) = dim {
        if want != d {
            return Err(bad(format!("feature width {d}, expected {want}")));
        }
    }
    if n != items.len() {
        return Err(bad(format!("{n} feature rows for {} items", items.len())));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * d * 4 {
        return Err(bad(format!(
            "payload holds {} bytes, header promises {}",
            payload.len(),
            n * d * 4
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    for (i, row) in data.chunks(d.max(1)).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Feature {
                item: items.token(i).to_string(),
                msg: "non-finite value".into(),
            });
        }
    }
    Ok(FeatureMatrix::new(n, d, data))
}

fn read_text_features(path: &Path, text: &str, items: &Vocab, dim: Option<usize>) -> Result<FeatureMatrix> {
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; items.len()];
    let mut width = dim;
    for (line, rec) in records(text) {
        let (item_tok, rest) = rec.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.into(),
            line,
            msg: "expected `item<TAB>v1,v2,...`".into(),
        })?;
        let item_tok = item_tok.trim();
        let item = items.get(item_tok).ok_or_else(|| Error::Parse {
            path: path.into(),
            line,
            msg: format!("unknown item `{item_tok}`"),
        })?;
        let mut row = Vec::new();
        for tok in rest.split(',').map(str::trim) {
            // Stored at f32 precision, the same as the binary container.
            let v: f32 = tok.parse().map_err(|_| Error::Feature {
                item: item_tok.to_string(),
                msg: format!("line {line}: cannot parse `{tok}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Feature {
                    item: item_tok.to_string(),
                    msg: format!("line {line}: non-finite value `{tok}`"),
                });
            }
            row.push(f64::from(v));
        }
        match width {
            Some(w) if w != row.len() => {
                return Err(Error::Feature {
                    item: item_tok.to_string(),
                    msg: format!("width {}, expected {w}", row.len()),
                })
            }
            None => width = Some(row.len()),
            _ => {}
        }
        rows[item] = Some(row);
    }
    let d = width.ok_or_else(|| Error::Empty(path.into()))?;
    let mut data = Vec::with_capacity(items.len() * d);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| Error::Feature {
            item: items.token(i).to_string(),
            msg: "missing from feature file".into(),
        })?;
        data.extend(row);
    }
    Ok(FeatureMatrix::new(items.len(), d, data))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_interactions(path: &Path, log: &InteractionLog) -> Result<()> {
    let mut w = create(path)?;
    for &(u, i) in &log.entries {
        writeln!(w, "{}\t{}", log.users.token(u), log.items.token(i)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes one row per item in `items` order; attribute tokens come from
/// `attr_tokens` (index → token).
pub fn write_attributes(path: &Path, items: &Vocab, rows: &[Vec<usize>], attr_tokens: &[String]) -> Result<()> {
    let mut w = create(path)?;
    for (i, row) in rows.iter().enumerate() {
        let toks: Vec<&str> = row.iter().map(|&a| attr_tokens[a].as_str()).collect();
        writeln!(w, "{}\t{}", items.token(i), toks.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the `M2VF` container. Values are stored as `f32`.
pub fn write_image_features_binary(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + features.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(features.cols as u32).to_le_bytes());
    for &v in &features.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Text form; values are printed as the `f32` they would be stored as in
/// the binary container, so both encodings load identically.
pub fn write_image_features_text(path: &Path, items: &Vocab, features: &FeatureMatrix) -> Result<()> {
    let mut w = create(path)?;
    for i in 0..features.rows {
        let vals: Vec<String> = features.row(i).iter().map(|&v| format!("{}", v as f32)).collect();
        writeln!(w, "{}\t{}", items.token(i), vals.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write(dir: &TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn interactions_count_and_dedup() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "a.tsv", "u1\ti1\nu1\ti2\nu2\ti1\n");
        let log = load_interactions(&p).unwrap();
        assert_eq!((log.user_count, log.item_count, log.len()), (2, 2, 3));

        let p = write(&dir, "b.tsv", "u1\ti1\nu1\ti2\nu1\ti1\nu2\ti1\t5\t99\n");
        assert_eq!(load_interactions(&p).unwrap().len(), 3);
    }

    #[test]
    fn interactions_errors() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "a.tsv", "u1\ti1\nu1\n");
        match load_interactions(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let p = write(&dir, "e.tsv", "");
        assert!(matches!(load_interactions(&p), Err(Error::Empty(_))));
    }

    #[test]
    fn attributes_encode_and_flag() {
        let dir = TempDir::new().unwrap();
        let items = Vocab::from_tokens(vec!["i1".into(), "i2".into(), "i3".into()]);
        let p = write(&dir, "attr.tsv", "i1\ta,b\ni2\tc\ni3\t\n");
        let t = load_attributes(&p, &items).unwrap();
        assert_eq!(t.vocab.len(), 3);
        assert_eq!(t.rows[0], vec![0, 1]);
        assert_eq!(t.flagged, vec![2]);

        let p = write(&dir, "attr2.tsv", "i1\ta,b\ni3\tc\n");
        let t = load_attributes(&p, &items).unwrap();
        assert_eq!(t.rows[1], Vec::<usize>::new());
        assert_eq!(t.flagged, vec![1]);

        let p = write(&dir, "attr3.tsv", "iX\ta\n");
        assert!(load_attributes(&p, &items).is_err());
    }

    #[test]
    fn features_binary_and_text_agree() {
        let dir = TempDir::new().unwrap();
        let items = Vocab::from_tokens(vec!["i1".into(), "i2".into()]);
        let m = FeatureMatrix::new(
            2,
            4,
            vec![0.5, -1.25, 3.0, 0.1f32 as f64, 7.0, 8.0, -9.5, 1e-3f32 as f64],
        );
        let bin = dir.path().join("f.bin");
        let txt = dir.path().join("f.txt");
        write_image_features_binary(&bin, &m).unwrap();
        write_image_features_text(&txt, &items, &m).unwrap();
        let a = load_image_features(&bin, &items, Some(4)).unwrap();
        let b = load_image_features(&txt, &items, None).unwrap();
        assert_eq!(a, m);
        assert_eq!(a, b);
    }

    #[test]
    fn feature_errors_name_the_item() {
        let dir = TempDir::new().unwrap();
        let items = Vocab::from_tokens(vec!["i1".into(), "i2".into()]);
        let p = write(&dir, "nan.txt", "i1\t1,2\ni2\tnan,1\n");
        let err = load_image_features(&p, &items, None).unwrap_err().to_string();
        assert!(err.contains("i2"), "{err}");
        let p = write(&dir, "w.txt", "i1\t1,2\ni2\t1,2,3\n");
        assert!(load_image_features(&p, &items, None).is_err());
        let p = write(&dir, "miss.txt", "i1\t1,2\n");
        let err = load_image_features(&p, &items, None).unwrap_err().to_string();
        assert!(err.contains("i2"), "{err}");

        let bin = dir.path().join("short.bin");
        let m = FeatureMatrix::new(2, 2, vec![1.0; 4]);
        write_image_features_binary(&bin, &m).unwrap();
        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&bin, &bytes).unwrap();
        assert!(load_image_features(&bin, &items, None).is_err());
        // wrong declared width
        write_image_features_binary(&bin, &m).unwrap();
        assert!(load_image_features(&bin, &items, Some(3)).is_err());
    }
}
