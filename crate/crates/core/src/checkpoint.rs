//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ASBU" | version u32 | spec_len u32 | spec text (UTF-8)
//! entry*: name_len u16 | name | rank u8 | dims u32 × rank | payload
//! crc32 of everything before it (u32)
//! ```
//!
//! Version 1 payloads are raw `f32` values. Version 2 (quantized) payloads are
//! `scale f32 | zero_point i32 | i8 × count`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::network::Network;
use crate::spec::NetworkSpec;

pub const MAGIC: &[u8; 4] = b"ASBU";
pub const VERSION_F32: u32 = 1;
pub const VERSION_INT8: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Int8 {
        scale: f32,
        zero_point: i32,
        values: Vec<i8>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    fn count(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub version: u32,
    pub spec_text: String,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(self.spec_text.len())
                .map_err(|_| fmt_err("spec too long"))?
                .to_le_bytes(),
        );
        out.extend_from_slice(self.spec_text.as_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(
                &u16::try_from(name.len())
                    .map_err(|_| fmt_err("name too long"))?
                    .to_le_bytes(),
            );
            out.extend_from_slice(name);
            out.push(u8::try_from(e.dims.len()).map_err(|_| fmt_err("rank too large"))?);
            for &d in &e.dims {
                out.extend_from_slice(
                    &u32::try_from(d)
                        .map_err(|_| fmt_err("dimension too large"))?
                        .to_le_bytes(),
                );
            }
            match (&e.payload, self.version) {
                (Payload::F32(v), VERSION_F32) if v.len() == e.count() => {
                    v.iter()
                        .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                (
                    Payload::Int8 {
                        scale,
                        zero_point,
                        values,
                    },
                    VERSION_INT8,
                ) if values.len() == e.count() => {
                    out.extend_from_slice(&scale.to_le_bytes());
                    out.extend_from_slice(&zero_point.to_le_bytes());
                    out.extend(values.iter().map(|&q| q as u8));
                }
                _ => {
                    return Err(fmt_err(format!(
                        "entry {} does not fit version {}",
                        e.name, self.version
                    )))
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(fmt_err(format!("file truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt_err("bad magic bytes"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(fmt_err("CRC mismatch: file truncated or corrupted"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION_F32 && version != VERSION_INT8 {
            return Err(fmt_err(format!("unsupported format version {version}")));
        }
        let spec_len = r.u32()? as usize;
        let spec_text = String::from_utf8(r.take(spec_len)?.to_vec())
            .map_err(|_| fmt_err("spec is not UTF-8"))?;
        let mut entries = Vec::new();
        while r.pos < body.len() {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| fmt_err("entry name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let payload = if version == VERSION_F32 {
                let raw = r.take(
                    count
                        .checked_mul(4)
                        .ok_or_else(|| fmt_err("entry too large"))?,
                )?;
                Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                let scale = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
                let zero_point = i32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
                let values = r.take(count)?.iter().map(|&b| b as i8).collect();
                Payload::Int8 {
                    scale,
                    zero_point,
                    values,
                }
            };
            entries.push(Entry {
                name,
                dims,
                payload,
            });
        }
        Ok(Container {
            version,
            spec_text,
            entries,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Container::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| fmt_err("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Float container for `net`; values are narrowed to `f32`.
pub fn to_container(net: &Network) -> Container {
    let mut entries = Vec::new();
    net.visit_params(&mut |name, role, t| {
        entries.push(Entry {
            name: name.to_string(),
            dims: role.dims(t),
            payload: Payload::F32(t.data().iter().map(|&v| v as f32).collect()),
        });
    });
    Container {
        version: VERSION_F32,
        spec_text: net.spec().to_text(),
        entries,
    }
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    to_container(net).encode()
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

/// Checks that `entries` carry exactly the names and dims of `net`, in order.
pub fn check_shape_table(net: &Network, entries: &[Entry]) -> Result<()> {
    let table = net.shape_table();
    if table.len() != entries.len() {
        return Err(Error::ShapeTableMismatch(format!(
            "network has {} tensors, checkpoint has {}",
            table.len(),
            entries.len()
        )));
    }
    for ((name, _, dims), e) in table.iter().zip(entries) {
        if *name != e.name || *dims != e.dims {
            return Err(Error::ShapeTableMismatch(format!(
                "expected {name} {dims:?}, found {} {:?}",
                e.name, e.dims
            )));
        }
    }
    Ok(())
}

/// Overwrites the weights of `net` from a float container.
pub fn load_into(net: &mut Network, c: &Container) -> Result<()> {
    if c.version != VERSION_F32 {
        return Err(fmt_err(format!(
            "expected a float checkpoint (version {VERSION_F32}), got version {}",
            c.version
        )));
    }
    check_shape_table(net, &c.entries)?;
    let mut it = c.entries.iter();
    net.visit_params_mut(&mut |_, _, t| {
        if let Some(Entry {
            payload: Payload::F32(v),
            ..
        }) = it.next()
        {
            t.data_mut()
                .iter_mut()
                .zip(v)
                .for_each(|(d, &s)| *d = s as f64);
        }
    });
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let c = Container::decode(bytes)?;
    let spec = NetworkSpec::from_text(&c.spec_text)?;
    let mut net = Network::zeroed(&spec)?;
    load_into(&mut net, &c)?;
    Ok(net)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::Scaling;

    #[test]
    fn container_round_trip_both_versions() {
        let c = Container {
            version: VERSION_INT8,
            spec_text: "scaling = 1/8\n".into(),
            entries: vec![
                Entry {
                    name: "a".into(),
                    dims: vec![2, 1, 1, 2],
                    payload: Payload::Int8 {
                        scale: 0.5,
                        zero_point: 0,
                        values: vec![-127, 0, 5, 127],
                    },
                },
                Entry {
                    name: "act".into(),
                    dims: vec![],
                    payload: Payload::Int8 {
                        scale: 0.1,
                        zero_point: 7,
                        values: vec![0],
                    },
                },
            ],
        };
        // rank 0 entries hold one element
        assert_eq!(Container::decode(&c.encode().unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let net = Network::build(&NetworkSpec::default_for(Scaling::Eighth), 1).unwrap();
        let bytes = to_bytes(&net).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Format(_))
        ));
        assert!(matches!(from_bytes(&bytes[..8]), Err(Error::Format(_))));
        let mut v3 = bytes[..bytes.len() - 4].to_vec();
        v3[4] = 3;
        let crc = crc32fast::hash(&v3);
        v3.extend_from_slice(&crc.to_le_bytes());
        let err = from_bytes(&v3).unwrap_err().to_string();
        assert!(err.contains("version 3"), "{err}");
    }

    #[test]
    fn eighth_checkpoint_does_not_fit_sixteenth_network() {
        let small = Network::build(&NetworkSpec::default_for(Scaling::Eighth), 1).unwrap();
        let mut big = Network::build(&NetworkSpec::default_for(Scaling::Sixteenth), 1).unwrap();
        let c = to_container(&small);
        assert!(matches!(
            load_into(&mut big, &c),
            Err(Error::ShapeTableMismatch(_))
        ));
    }
}
