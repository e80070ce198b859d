//! Tab-separated dataset manifests.
//!
//! ```text
//! #attrs\tcolor_red\tcolor_orange\t...
//! image_00000.png\t-\ta red sedan ...\t100000001000\t3\t1
//! ```
//! Paths are relative to the manifest's directory; `-` marks an absent sketch or caption.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const HEADER: &str = "#attrs";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub sketch: Option<PathBuf>,
    pub caption: Option<String>,
    pub attributes: Vec<u8>,
    pub identity: u64,
    pub fine_label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    root: PathBuf,
    attribute_names: Vec<String>,
    records: Vec<ManifestRecord>,
}

fn check_field(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s == "-" || s.contains(['\t', '\n', '\r']) {
        return Err(Error::Input(format!("{what} {s:?} cannot be stored in a manifest field")));
    }
    Ok(())
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, attribute_names: Vec<String>) -> Result<Self> {
        for n in &attribute_names {
            check_field("attribute name", n)?;
        }
        Ok(Self { root: root.into(), attribute_names, records: Vec::new() })
    }

    pub fn push(&mut self, record: ManifestRecord) -> Result<()> {
        if record.attributes.len() != self.attribute_names.len() {
            return Err(Error::Input(format!(
                "record has {} attribute bits, dataset declares {}",
                record.attributes.len(),
                self.attribute_names.len()
            )));
        }
        if record.attributes.iter().any(|&b| b > 1) {
            return Err(Error::Input("attribute bits must be 0 or 1".into()));
        }
        check_field("image path", &record.image.to_string_lossy())?;
        if let Some(s) = &record.sketch {
            check_field("sketch path", &s.to_string_lossy())?;
        }
        if let Some(c) = &record.caption {
            check_field("caption", c)?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        for n in &self.attribute_names {
            out.push('\t');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.records {
            let bits: String = r.attributes.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
            let bits = if bits.is_empty() { "-".to_string() } else { bits };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.image.display(),
                r.sketch.as_deref().map_or("-".into(), |p| p.display().to_string()),
                r.caption.as_deref().unwrap_or("-"),
                bits,
                r.identity,
                r.fine_label
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses manifest text without touching the file system. Records are numbered from 1.
    pub fn parse(text: &str, root: impl Into<PathBuf>, source_name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::parse(source_name, 0, "empty manifest"))?;
        let mut cols = header.split('\t');
        if cols.next() != Some(HEADER) {
            return Err(Error::parse(source_name, 0, format!("header must start with {HEADER:?}")));
        }
        let names = cols.map(str::to_string).collect();
        let mut manifest = Self::new(root, names).map_err(|e| Error::parse(source_name, 0, e.to_string()))?;
        for (record, (_, line)) in lines.enumerate().map(|(k, l)| (k + 1, l)) {
            let rec =
                parse_record(line, manifest.attribute_names.len()).map_err(|m| Error::parse(source_name, record, m))?;
            manifest.push(rec).map_err(|e| Error::parse(source_name, record, e.to_string()))?;
        }
        Ok(manifest)
    }
}

fn optional(field: &str) -> Option<&str> {
    (field != "-").then_some(field)
}

fn parse_record(line: &str, width: usize) -> std::result::Result<ManifestRecord, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 6 {
        return Err(format!("expected 6 tab-separated fields, found {}", f.len()));
    }
    let attributes = match f[3] {
        "-" if width == 0 => Vec::new(),
        bits => bits
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(format!("attribute bit {other:?} is not 0 or 1")),
            })
            .collect::<std::result::Result<Vec<u8>, _>>()?,
    };
    if attributes.len() != width {
        return Err(format!("attribute width {} does not match the header's {width}", attributes.len()));
    }
    Ok(ManifestRecord {
        image: PathBuf::from(f[0]),
        sketch: optional(f[1]).map(PathBuf::from),
        caption: optional(f[2]).map(str::to_string),
        attributes,
        identity: f[4].parse().map_err(|_| format!("identity {:?} is not a nonnegative integer", f[4]))?,
        fine_label: f[5].parse().map_err(|_| format!("fine label {:?} is not a nonnegative integer", f[5]))?,
    })
}

/// Reads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path.display().to_string();
    let manifest = DatasetManifest::parse(&text, root, &name)?;
    for (k, r) in manifest.records.iter().enumerate() {
        for p in std::iter::once(&r.image).chain(r.sketch.as_ref()) {
            if !manifest.resolve(p).is_file() {
                return Err(Error::parse(&name, k + 1, format!("file {} does not exist", p.display())));
            }
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "#attrs\tred\tsedan\tbus\n\
        a.png\t-\ta red sedan\t110\t7\t2\n\
        b.png\tb.sketch.png\t-\t001\t0\t11\n\
        \n\
        c.png\t-\t-\t000\t12\t0\n";

    #[test]
    fn fixture_parses_field_by_field() {
        let m = DatasetManifest::parse(FIXTURE, "/data", "fixture").unwrap();
        assert_eq!(m.attribute_names(), ["red", "sedan", "bus"]);
        let expect = [
            ("a.png", None, Some("a red sedan"), vec![1, 1, 0], 7, 2),
            ("b.png", Some("b.sketch.png"), None, vec![0, 0, 1], 0, 11),
            ("c.png", None, None, vec![0, 0, 0], 12, 0),
        ];
        assert_eq!(m.len(), 3);
        for (r, (img, sk, cap, bits, id, fine)) in m.records().iter().zip(expect) {
            assert_eq!(r.image, PathBuf::from(img));
            assert_eq!(r.sketch, sk.map(PathBuf::from));
            assert_eq!(r.caption.as_deref(), cap);
            assert_eq!((r.attributes.clone(), r.identity, r.fine_label), (bits, id, fine));
        }
        assert_eq!(m.resolve(Path::new("a.png")), PathBuf::from("/data/a.png"));
        assert_eq!(DatasetManifest::parse(&m.to_text(), "/data", "again").unwrap(), m);
    }

    #[test]
    fn malformed_records_are_located() {
        let cases = [
            ("#attrs\tx\na.png\t-\t-\t10\t0\t0\n", 1),
            ("#attrs\tx\na.png\t-\t-\t1\t0\t0\nb.png\t-\t-\t2\t0\t0\n", 2),
            ("#attrs\tx\na.png\t-\t-\t1\t0\n", 1),
            ("#attrs\tx\na.png\t-\t-\t1\t-3\t0\n", 1),
            ("#attrs\tx\na.png\t-\t-\t1\t0\t0\na.png\t-\t-\t1\t0\tz\n", 2),
        ];
        for (text, want) in cases {
            match DatasetManifest::parse(text, ".", "t") {
                Err(Error::Parse { record, .. }) => assert_eq!(record, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(matches!(DatasetManifest::parse("a\tb", ".", "t"), Err(Error::Parse { record: 0, .. })));
        assert!(DatasetManifest::parse("", ".", "t").is_err());
    }

    #[test]
    fn dangling_path_names_its_record() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        let text = "#attrs\na.png\t-\t-\t-\t0\t0\nmissing.png\t-\t-\t-\t0\t0\n";
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, text).unwrap();
        match load_manifest(&path) {
            Err(Error::Parse { record, message, .. }) => {
                assert_eq!(record, 2);
                assert!(message.contains("missing.png"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unstorable_fields_are_rejected() {
        let mut m = DatasetManifest::new(".", vec!["a".into()]).unwrap();
        let rec = |caption: &str| ManifestRecord {
            image: "x.png".into(),
            sketch: None,
            caption: Some(caption.into()),
            attributes: vec![1],
            identity: 0,
            fine_label: 0,
        };
        assert!(m.push(rec("tab\there")).is_err());
        assert!(m.push(rec("-")).is_err());
        assert!(m.push(ManifestRecord { attributes: vec![], ..rec("ok") }).is_err());
        m.push(rec("ok")).unwrap();
    }
}
