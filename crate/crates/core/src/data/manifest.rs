//! Dataset manifests: one `subject_id,run_id,label,path` record per line.
//! Lines starting with `#` and blank lines are skipped. Relative paths are
//! resolved against the manifest's directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Label;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "# subject_id,run_id,label,path";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub run_id: u32,
    pub label: Label,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = DatasetManifest { records };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        let mut labels: HashMap<&str, Label> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.subject_id.is_empty() {
                return Err(Error::Data(format!("record {i} has an empty subject id")));
            }
            if let Some(j) = seen.insert((r.subject_id.as_str(), r.run_id), i) {
                return Err(Error::Data(format!(
                    "subject `{}` run {} listed twice (records {j} and {i})",
                    r.subject_id, r.run_id
                )));
            }
            match labels.get(r.subject_id.as_str()) {
                Some(&l) if l != r.label => {
                    return Err(Error::Data(format!("subject `{}` has conflicting labels", r.subject_id)));
                }
                _ => {
                    labels.insert(&r.subject_id, r.label);
                }
            }
        }
        Ok(())
    }

    /// Parses manifest text. `origin` names the source in diagnostics and
    /// relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let line_start = offset;
            offset += line.len() as u64;
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = body.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::format(
                    origin,
                    line_start,
                    format!("expected 4 comma-separated fields, found {}", fields.len()),
                ));
            }
            let run_id = fields[1]
                .parse::<u32>()
                .map_err(|_| Error::format(origin, line_start, format!("run id `{}` is not an integer", fields[1])))?;
            let label = fields[2]
                .parse::<Label>()
                .map_err(|_| Error::format(origin, line_start, format!("label `{}` is not 0 or 1", fields[2])))?;
            if fields[3].is_empty() {
                return Err(Error::format(origin, line_start, "empty volume path"));
            }
            let path = Path::new(fields[3]);
            records.push(ManifestRecord {
                subject_id: fields[0].to_string(),
                run_id,
                label,
                path: if path.is_absolute() { path.to_path_buf() } else { base.join(path) },
            });
        }
        Self::new(records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Serializes with paths made relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let p = r.path.strip_prefix(base).unwrap_or(&r.path);
            out.push_str(&format!("{},{},{},{}\n", r.subject_id, r.run_id, r.label.index(), p.display()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }

    /// Distinct subjects with their labels, in order of first appearance.
    pub fn subjects(&self) -> Vec<(String, Label)> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.subject_id.as_str(), ()).is_none() {
                out.push((r.subject_id.clone(), r.label));
            }
        }
        out
    }

    /// Record indices per subject, runs in manifest order.
    pub fn runs_by_subject(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.subject_id.as_str()).or_default().push(i);
        }
        map
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "# subject_id,run_id,label,path\n\
                        s01,1,1,vols/s01_r1.vol\n\
                        \n\
                        s01,2,1,/abs/s01_r2.vol\n\
                        s02, 1, 0, vols/s02_r1.vol\n";

    #[test]
    fn parses_and_resolves_paths() {
        let m = DatasetManifest::parse(TEXT, Path::new("/data"), Path::new("m.csv")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records[0].path, PathBuf::from("/data/vols/s01_r1.vol"));
        assert_eq!(m.records[1].path, PathBuf::from("/abs/s01_r2.vol"));
        assert_eq!(m.records[2].label, Label::Control);
        assert_eq!(m.subjects(), vec![("s01".into(), Label::Patient), ("s02".into(), Label::Control)]);
        assert_eq!(m.runs_by_subject()["s01"], vec![0, 1]);
    }

    #[test]
    fn text_round_trip() {
        let m = DatasetManifest::parse(TEXT, Path::new("/data"), Path::new("m.csv")).unwrap();
        let again = DatasetManifest::parse(&m.to_text(Path::new("/data")), Path::new("/data"), Path::new("m.csv")).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn rejects_duplicates_and_label_conflicts() {
        let dup = "a,1,0,x\na,1,0,y\n";
        assert!(matches!(DatasetManifest::parse(dup, Path::new("."), Path::new("m")), Err(Error::Data(_))));
        let conflict = "a,1,0,x\na,2,1,y\n";
        assert!(matches!(DatasetManifest::parse(conflict, Path::new("."), Path::new("m")), Err(Error::Data(_))));
    }

    #[test]
    fn malformed_lines_carry_offsets() {
        let text = "a,1,0,x\nb,two,0,y\n";
        match DatasetManifest::parse(text, Path::new("."), Path::new("m")).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 8),
            e => panic!("{e}"),
        }
        assert!(DatasetManifest::parse("a,1,2,x\n", Path::new("."), Path::new("m")).is_err());
        assert!(DatasetManifest::parse("a,1,0\n", Path::new("."), Path::new("m")).is_err());
    }
}
