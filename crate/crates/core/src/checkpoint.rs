//! Binary checkpoint container: magic "FGLC", a format version, and named
//! sections of named f64 tensors. Encoding is fully deterministic, so
//! save -> load -> save produces byte-identical files.

use crate::dpnet::DpnetModel;
use crate::error::{Error, Result};
use crate::fgl::ControlGenerator;
use crate::ioutil::atomic_write;
use crate::param::Param;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FGLC";
pub const VERSION: u32 = 1;
/// The only tensor dtype currently defined: 64-bit little-endian floats.
const DTYPE_F64: u8 = 1;

pub const MODEL_SECTION: &str = "model";
pub const GENERATOR_SECTION: &str = "generator";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub records: Vec<TensorRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

fn named_params_to_records(entries: Vec<(String, &Param)>) -> Vec<TensorRecord> {
    entries
        .into_iter()
        .map(|(name, p)| TensorRecord {
            name,
            shape: p.shape.clone(),
            data: p.data.clone(),
        })
        .collect()
}

fn records_to_entries(records: &[TensorRecord]) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    records
        .iter()
        .map(|r| (r.name.clone(), r.shape.clone(), r.data.clone()))
        .collect()
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Replaces or appends a section, keeping one section per name.
    pub fn put_section(&mut self, section: Section) {
        match self.sections.iter_mut().find(|s| s.name == section.name) {
            Some(slot) => *slot = section,
            None => self.sections.push(section),
        }
    }

    pub fn put_model(&mut self, model: &DpnetModel) {
        self.put_section(Section {
            name: MODEL_SECTION.into(),
            records: named_params_to_records(model.named_tensors()),
        });
    }

    pub fn put_generator(&mut self, gen: &ControlGenerator) {
        self.put_section(Section {
            name: GENERATOR_SECTION.into(),
            records: named_params_to_records(gen.named_tensors()),
        });
    }

    /// Loads the model section into an existing model of matching shape.
    pub fn load_model(&self, model: &mut DpnetModel) -> Result<()> {
        let section = self
            .section(MODEL_SECTION)
            .ok_or_else(|| Error::Checkpoint("no model section".into()))?;
        model.load_named(&records_to_entries(&section.records))
    }

    pub fn load_generator(&self, gen: &mut ControlGenerator) -> Result<()> {
        let section = self
            .section(GENERATOR_SECTION)
            .ok_or_else(|| Error::Checkpoint("no generator section".into()))?;
        gen.load_named(&records_to_entries(&section.records))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.sections.len(), "section count")?.to_le_bytes());
        for section in &self.sections {
            write_str(&mut out, &section.name)?;
            out.extend_from_slice(&u32_of(section.records.len(), "record count")?.to_le_bytes());
            for r in &section.records {
                write_str(&mut out, &r.name)?;
                out.push(DTYPE_F64);
                let numel: usize = r.shape.iter().product();
                if numel != r.data.len() {
                    return Err(Error::Checkpoint(format!(
                        "{}: shape {:?} does not cover {} values",
                        r.name,
                        r.shape,
                        r.data.len()
                    )));
                }
                out.push(u8::try_from(r.shape.len()).map_err(|_| Error::Checkpoint("rank > 255".into()))?);
                for &d in &r.shape {
                    out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
                }
                for &v in &r.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let mut sections = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let mut records = Vec::new();
            for _ in 0..r.u32()? {
                let rec_name = r.string()?;
                let dtype = r.take(1)?[0];
                if dtype != DTYPE_F64 {
                    return Err(Error::Checkpoint(format!("{rec_name}: unknown dtype code {dtype}")));
                }
                let rank = r.take(1)?[0] as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u32()? as usize);
                }
                let numel: usize = shape.iter().product();
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                }
                records.push(TensorRecord { name: rec_name, shape, data });
            }
            sections.push(Section { name, records });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last section",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&std::fs::read(path)?)
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds u32")))
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&u32_of(s.len(), "string length")?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
    }
}
