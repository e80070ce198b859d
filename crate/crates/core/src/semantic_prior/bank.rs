//! Embedding bank files: `VMAE-EMB v1 <M> <dim>` header, then one record per row.
//!
//! Text files (`.tsv`, `.txt`, anything not `.bin`) hold `<id>\t<f32,f32,...>`
//! lines with 9 significant digits, enough to round-trip every `f32`. Binary
//! files (`.bin`) keep the same header line, then per record a little-endian
//! `u32` id length, the UTF-8 id bytes and `dim` little-endian `f32` values.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "VMAE-EMB";
const VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
}

impl EmbeddingBank {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), vectors: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Structural(format!(
                "record {id} has {} values, bank dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if id.contains(['\t', '\n']) {
            return Err(Error::Input(format!("bank id {id:?} contains a tab or newline")));
        }
        if self.ids.contains(&id) {
            return Err(Error::Input(format!("duplicate bank id {id}")));
        }
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
    pub fn ids(&self) -> &[String] {
        &self.ids
    }
    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|i| i == id).map(|k| self.vectors[k].as_slice())
    }

    fn header(&self) -> String {
        format!("{MAGIC} {VERSION} {} {}\n", self.len(), self.dim)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = self.header().into_bytes();
        if is_binary(path) {
            for (id, v) in self.ids.iter().zip(&self.vectors) {
                out.extend_from_slice(&(id.len() as u32).to_le_bytes());
                out.extend_from_slice(id.as_bytes());
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        } else {
            for (id, v) in self.ids.iter().zip(&self.vectors) {
                let values: Vec<String> = v.iter().map(|x| format!("{x:.8e}")).collect();
                writeln!(out, "{id}\t{}", values.join(",")).expect("writing to a Vec cannot fail");
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::parse(&name, 0, "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(&name, 0, "header is not UTF-8"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != MAGIC || fields[1] != VERSION {
            return Err(Error::parse(&name, 0, format!("malformed header {header:?}")));
        }
        let m: usize =
            fields[2].parse().map_err(|_| Error::parse(&name, 0, format!("bad record count {:?}", fields[2])))?;
        let dim: usize =
            fields[3].parse().map_err(|_| Error::parse(&name, 0, format!("bad dimension {:?}", fields[3])))?;
        let body = &bytes[nl + 1..];
        let records = if is_binary(path) { parse_binary(&name, body, m, dim)? } else { parse_text(&name, body, dim)? };
        if records.len() != m {
            return Err(Error::parse(
                &name,
                records.len() + 1,
                format!("header declares {m} records, found {}", records.len()),
            ));
        }
        let mut seen = HashSet::new();
        let mut bank = Self::new(dim);
        for (k, (id, v)) in records.into_iter().enumerate() {
            if !seen.insert(id.clone()) {
                return Err(Error::parse(&name, k + 1, format!("duplicate id {id}")));
            }
            bank.ids.push(id);
            bank.vectors.push(v);
        }
        Ok(bank)
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("bin"))
}

fn parse_text(name: &str, body: &[u8], dim: usize) -> Result<Vec<(String, Vec<f32>)>> {
    let text = std::str::from_utf8(body).map_err(|_| Error::parse(name, 1, "records are not UTF-8"))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let record = k + 1;
        let (id, values) = line.split_once('\t').ok_or_else(|| Error::parse(name, record, "missing tab separator"))?;
        let v: Vec<f32> = values
            .split(',')
            .map(|s| s.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(name, record, format!("record {id}: {e}")))?;
        if v.len() != dim {
            return Err(Error::parse(name, record, format!("record {id} has {} values, header says {dim}", v.len())));
        }
        out.push((id.to_string(), v));
    }
    Ok(out)
}

fn parse_binary(name: &str, mut body: &[u8], m: usize, dim: usize) -> Result<Vec<(String, Vec<f32>)>> {
    let mut out = Vec::with_capacity(m);
    while !body.is_empty() {
        let record = out.len() + 1;
        let truncated = || Error::parse(name, record, "truncated record");
        if body.len() < 4 {
            return Err(truncated());
        }
        let len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
        body = &body[4..];
        if body.len() < len + 4 * dim {
            return Err(truncated());
        }
        let id = String::from_utf8(body[..len].to_vec()).map_err(|_| Error::parse(name, record, "id is not UTF-8"))?;
        body = &body[len..];
        let v = body[..4 * dim].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        body = &body[4 * dim..];
        out.push((id, v));
    }
    Ok(out)
}
