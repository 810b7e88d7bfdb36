//! Text checkpoint container for network parameters.
//!
//! ```text
//! nowcast-checkpoint 1
//! spec layer1_filters 8
//! ...
//! meta <key> <value>
//! tensor layer1.w_xi 8 11 2 2
//! <row-major values separated by spaces>
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle reproduces every parameter bit for bit. Metadata keys contain no
//! whitespace; values run to the end of the line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::convlstm::{CellActivation, NetworkParams, NetworkSpec};
use crate::error::{Error, Result};

pub const MAGIC: &str = "nowcast-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub metadata: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: NetworkParams) -> Result<Self> {
        params.validate(&spec)?;
        Ok(Self {
            spec,
            params,
            metadata: BTreeMap::new(),
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        let s = &self.spec;
        writeln!(w, "{MAGIC} {VERSION}").map_err(io)?;
        writeln!(w, "spec layer1_filters {}", s.layer1_filters).map_err(io)?;
        writeln!(w, "spec layer2_filters {}", s.layer2_filters).map_err(io)?;
        writeln!(w, "spec kernel {} {}", s.kernel.0, s.kernel.1).map_err(io)?;
        writeln!(w, "spec activation {}", s.activation).map_err(io)?;
        writeln!(w, "spec input_channels {}", s.input_channels).map_err(io)?;
        writeln!(w, "spec grid {} {}", s.grid.0, s.grid.1).map_err(io)?;
        writeln!(w, "spec peepholes {}", s.peepholes).map_err(io)?;
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("metadata entry {k:?} cannot be written")));
            }
            writeln!(w, "meta {k} {v}").map_err(io)?;
        }
        for t in self.params.tensors() {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            writeln!(w, "tensor {} {}", t.name, dims.join(" ")).map_err(io)?;
            let vals: Vec<String> = t.data.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", vals.join(" ")).map_err(io)?;
        }
        writeln!(w, "end").map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = || -> Result<Option<(usize, String)>> {
            match lines.next() {
                Some((n, Ok(l))) => Ok(Some((n + 1, l))),
                Some((n, Err(e))) => Err(bad(format!("line {}: {e}", n + 1))),
                None => Ok(None),
            }
        };

        let (_, header) = next()?.ok_or_else(|| bad("empty file"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(bad("missing header"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version"))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }

        let mut spec_fields: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let mut ended = false;
        while let Some((n, line)) = next()? {
            let at = |m: &str| bad(format!("line {n}: {m}"));
            let mut words = line.split_whitespace();
            match words.next() {
                Some("spec") => {
                    let key = words.next().ok_or_else(|| at("spec key missing"))?;
                    spec_fields.insert(key.to_string(), words.map(String::from).collect());
                }
                Some("meta") => {
                    let rest = line["meta".len()..].trim_start();
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    metadata.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let name = words.next().ok_or_else(|| at("tensor name missing"))?.to_string();
                    let shape: Vec<usize> = words
                        .map(|d| d.parse().map_err(|_| at("bad dimension")))
                        .collect::<Result<_>>()?;
                    let (vn, values_line) = next()?.ok_or_else(|| at("tensor values missing"))?;
                    let values: Vec<f64> = values_line
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| bad(format!("line {vn}: bad value {v:?}"))))
                        .collect::<Result<_>>()?;
                    if values.len() != shape.iter().product::<usize>() {
                        return Err(bad(format!("line {vn}: {name} has {} values for shape {shape:?}", values.len())));
                    }
                    tensors.push((name, shape, values));
                }
                Some("end") => {
                    ended = true;
                    break;
                }
                Some(other) => return Err(at(&format!("unexpected record {other:?}"))),
                None => {}
            }
        }
        if !ended {
            return Err(bad("truncated file (no end marker)"));
        }

        let field = |k: &str, i: usize| -> Result<&str> {
            spec_fields
                .get(k)
                .and_then(|v| v.get(i))
                .map(String::as_str)
                .ok_or_else(|| bad(format!("spec field {k} missing")))
        };
        let num = |k: &str, i: usize| -> Result<usize> {
            field(k, i)?.parse().map_err(|_| bad(format!("spec field {k} is not a count")))
        };
        let spec = NetworkSpec {
            layer1_filters: num("layer1_filters", 0)?,
            layer2_filters: num("layer2_filters", 0)?,
            kernel: (num("kernel", 0)?, num("kernel", 1)?),
            activation: field("activation", 0)?.parse::<CellActivation>()?,
            input_channels: num("input_channels", 0)?,
            grid: (num("grid", 0)?, num("grid", 1)?),
            peepholes: field("peepholes", 0)?
                .parse()
                .map_err(|_| bad("spec field peepholes is not a boolean"))?,
        };
        spec.validate()?;

        let mut params = NetworkParams::zeros(&spec);
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if tensors.len() != expected.len() {
            return Err(bad(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
        }
        let mut flat = Vec::with_capacity(params.num_params());
        for ((name, shape, values), (want_name, want_shape)) in tensors.into_iter().zip(expected) {
            if name != want_name || shape != want_shape {
                return Err(bad(format!(
                    "tensor {name} {shape:?} where {want_name} {want_shape:?} was expected"
                )));
            }
            flat.extend(values);
        }
        params.set_flat(&flat)?;
        Ok(Self { spec, params, metadata })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convlstm::init_params;

    fn small() -> Checkpoint {
        let spec = NetworkSpec {
            layer1_filters: 3,
            layer2_filters: 2,
            ..NetworkSpec::default()
        };
        let params = init_params(&spec, 17);
        let mut c = Checkpoint::new(spec, params).unwrap();
        c.metadata.insert("lead".into(), "6".into());
        c.metadata.insert("note".into(), "two words".into());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = small();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.params.to_flat().iter().zip(c.params.to_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_damaged_files() {
        let c = small();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(Checkpoint::read_from(text.replace("nowcast-checkpoint 1", "nowcast-checkpoint 2").as_bytes()).is_err());
        assert!(Checkpoint::read_from(text.replace("\nend\n", "\n").as_bytes()).is_err());
        assert!(Checkpoint::read_from(text.replace("layer2.b_o 2", "layer2.b_o 3").as_bytes()).is_err());
        assert!(Checkpoint::read_from(text.replace("spec layer1_filters 3", "spec layer1_filters 4").as_bytes()).is_err());
    }
}
