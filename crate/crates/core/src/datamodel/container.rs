//! Binary dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "NFE1" | version u32
//! n_subjects u32 | H u16 | W u16 | D u16 | T u16 | T_active u16 | M u16 | cohort u8
//! per subject: id_len u16 | id (UTF-8)
//!              f32 frames ordered (phase, run, time, H, W, D)
//! JSON metadata trailer (UTF-8) running to end of file
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::subject::{Cohort, FrameDims, Run, SequenceShape, SubjectRecord, TraitRecord};
use super::Dataset;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NFE1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SubjectMeta {
    id: String,
    cohort: Cohort,
    traits: TraitRecord,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    subjects: Vec<SubjectMeta>,
    provenance: serde_json::Value,
}

fn narrow(value: usize, what: &str) -> Result<u16> {
    u16::try_from(value).map_err(|_| Error::Data(format!("{what} = {value} does not fit the container header")))
}

pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let s = &dataset.shape;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let n = u32::try_from(dataset.subjects.len()).map_err(|_| Error::Data("too many subjects".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for (v, what) in [
        (s.dims.h, "H"),
        (s.dims.w, "W"),
        (s.dims.d, "D"),
        (s.t_passive, "T"),
        (s.t_active, "T_active"),
        (s.runs, "M"),
    ] {
        out.extend_from_slice(&narrow(v, what)?.to_le_bytes());
    }
    out.push(dataset.cohort.code());

    for subj in &dataset.subjects {
        let id = subj.subject_id.as_bytes();
        out.extend_from_slice(&narrow(id.len(), "id length")?.to_le_bytes());
        out.extend_from_slice(id);
        for phase in 0..2 {
            for run in &subj.runs {
                let frames = if phase == 0 { &run.passive } else { &run.active };
                for v in frames {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    let trailer = Trailer {
        subjects: dataset
            .subjects
            .iter()
            .map(|s| SubjectMeta {
                id: s.subject_id.clone(),
                cohort: s.cohort,
                traits: s.traits.clone(),
            })
            .collect(),
        provenance: dataset.provenance.clone(),
    };
    serde_json::to_writer(&mut out, &trailer)?;
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not a dataset container"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported container version {version}")));
    }
    let n = r.u32("subject count")? as usize;
    let h = r.u16("H")? as usize;
    let w = r.u16("W")? as usize;
    let d = r.u16("D")? as usize;
    let t = r.u16("T")? as usize;
    let t_active = r.u16("T_active")? as usize;
    let m = r.u16("M")? as usize;
    let cohort_at = r.pos;
    let code = r.take(1, "cohort")?[0];
    let cohort =
        Cohort::from_code(code).ok_or_else(|| Error::format(cohort_at as u64, format!("unknown cohort code {code}")))?;
    if h == 0 || w == 0 || d == 0 || t == 0 || t_active == 0 || m == 0 {
        return Err(Error::format(12, "zero-sized dimension in header"));
    }
    let shape = SequenceShape {
        dims: FrameDims::new(h, w, d),
        t_passive: t,
        t_active,
        runs: m,
    };
    let f = shape.frame_size();

    let mut subjects = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u16("id length")? as usize;
        let id_at = r.pos;
        let id = std::str::from_utf8(r.take(len, "subject id")?)
            .map_err(|_| Error::format(id_at as u64, "subject id is not UTF-8"))?
            .to_string();
        let mut passive = Vec::with_capacity(m);
        for _ in 0..m {
            passive.push(r.f32s(t * f, "passive frames")?);
        }
        let mut runs = Vec::with_capacity(m);
        for p in passive {
            runs.push(Run {
                passive: p,
                active: r.f32s(t_active * f, "active frames")?,
            });
        }
        subjects.push(SubjectRecord {
            subject_id: id,
            cohort,
            runs,
            traits: TraitRecord::default(),
        });
    }

    let trailer_at = r.pos;
    let trailer: Trailer = serde_json::from_slice(&bytes[trailer_at..])
        .map_err(|e| Error::format(trailer_at as u64, format!("metadata trailer: {e}")))?;
    if trailer.subjects.len() != subjects.len() {
        return Err(Error::format(
            trailer_at as u64,
            format!("trailer lists {} subjects, payload has {}", trailer.subjects.len(), subjects.len()),
        ));
    }
    for (s, meta) in subjects.iter_mut().zip(trailer.subjects) {
        if meta.id != s.subject_id {
            return Err(Error::format(
                trailer_at as u64,
                format!("trailer id {} does not match payload id {}", meta.id, s.subject_id),
            ));
        }
        s.cohort = meta.cohort;
        s.traits = meta.traits;
    }

    let dataset = Dataset {
        shape,
        cohort,
        subjects,
        provenance: trailer.provenance,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode(&fs::read(path)?)
}

/// Writes one row per subject: id, cohort and every trait (empty when absent).
pub fn write_traits_csv<W: std::io::Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "cohort".to_string()];
    header.extend(super::TraitKind::ALL.iter().map(|k| k.name().to_string()));
    w.write_record(&header)?;
    for s in &dataset.subjects {
        let mut row = vec![s.subject_id.clone(), format!("{:?}", s.cohort).to_lowercase()];
        for k in super::TraitKind::ALL {
            row.push(s.traits.value(k).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::NfExperience;

    pub(crate) fn tiny() -> Dataset {
        let shape = SequenceShape {
            dims: FrameDims::new(2, 1, 2),
            t_passive: 3,
            t_active: 2,
            runs: 2,
        };
        let f = shape.frame_size();
        let subjects = (0..3)
            .map(|i| SubjectRecord {
                subject_id: format!("sub-{i}"),
                cohort: Cohort::Synthetic,
                runs: (0..2)
                    .map(|r| Run {
                        passive: (0..3 * f).map(|k| (i * 100 + r * 10 + k) as f32 * 0.1).collect(),
                        active: (0..2 * f).map(|k| -((i * 100 + r * 10 + k) as f32) / 7.0).collect(),
                    })
                    .collect(),
                traits: TraitRecord {
                    tas20: Some(50.0 + i as f64 / 3.0),
                    stai: None,
                    caps5: Some(0.1),
                    age: Some(33.0),
                    nf_experience: Some(NfExperience::TwoSessions),
                },
            })
            .collect();
        Dataset {
            shape,
            cohort: Cohort::Synthetic,
            subjects,
            provenance: serde_json::json!({"source": "unit"}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = tiny();
        let back = decode(&encode(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn payload_order_is_phase_run_time() {
        let ds = tiny();
        let bytes = encode(&ds).unwrap();
        // header 4+4+4+6*2+1, id 2+5
        let start = 25 + 7;
        let first = f32::from_le_bytes(bytes[start..start + 4].try_into().unwrap());
        assert_eq!(first, ds.subjects[0].runs[0].passive[0]);
        let second_run = start + 3 * 4 * 4;
        let v = f32::from_le_bytes(bytes[second_run..second_run + 4].try_into().unwrap());
        assert_eq!(v, ds.subjects[0].runs[1].passive[0]);
        let active = start + 2 * 3 * 4 * 4;
        let v = f32::from_le_bytes(bytes[active..active + 4].try_into().unwrap());
        assert_eq!(v, ds.subjects[0].runs[0].active[0]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode(&tiny()).unwrap();
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_version_and_truncation_report_offsets() {
        let mut bytes = encode(&tiny()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));

        let bytes = encode(&tiny()).unwrap();
        match decode(&bytes[..40]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 32),
            other => panic!("{other:?}"),
        }
        let cut = bytes.len() - 3;
        assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nfe");
        let ds = tiny();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let mut buf = Vec::new();
        write_traits_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "subject_id,cohort,tas20,stai,caps5,age,nf_experience"
        );
        assert_eq!(lines.next().unwrap(), "sub-0,synthetic,50,,0.1,33,1");
    }
}
