//! On-disk formats: JSON with 17-significant-digit floats, the network
//! document, CSV tables and two-column plot-data series.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use iforge_core::densela::Matrix;
use iforge_core::gametheory::InteractionReport;
use iforge_core::netcore::{Arch, Layer, ReluNet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::WbError;

/// `{:.16e}`: 17 significant digits, enough to round-trip any finite f64.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // NaN / ±inf have no JSON spelling; CSV and .dat keep the Rust names
        format!("{v}")
    }
}

/// Pretty printer that writes every float with [`fmt_f64`].
struct SciFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for SciFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String, WbError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WbError + '_ {
    move |source| WbError::Io { path: path.to_path_buf(), source }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), WbError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), WbError> {
    write_text(path, &to_json_string(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, WbError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| WbError::Parse { path: path.to_path_buf(), msg: e.to_string() })
}

/// Writes a CSV with a header row; floats go through [`fmt_f64`].
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), WbError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| WbError::Io { path: path.to_path_buf(), source: e.into_error() })?;
    write_text(path, &String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}

/// Whitespace-separated two-column series with a `#` comment header.
pub fn write_dat(path: &Path, columns: (&str, &str), points: &[(f64, f64)]) -> Result<(), WbError> {
    let mut s = format!("# {} {}\n", columns.0, columns.1);
    for (x, y) in points {
        s.push_str(&fmt_f64(*x));
        s.push(' ');
        s.push_str(&fmt_f64(*y));
        s.push('\n');
    }
    write_text(path, &s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    /// Row-major `n_in × n_out`.
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Network document `{arch, dims, layers: [{W, b}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetFile {
    pub arch: Arch,
    pub dims: Vec<usize>,
    pub layers: Vec<LayerFile>,
}

impl From<&ReluNet> for NetFile {
    fn from(net: &ReluNet) -> Self {
        NetFile {
            arch: net.arch,
            dims: net.dims(),
            layers: net.layers.iter().map(|l| LayerFile { w: l.w.data.clone(), b: l.b.clone() }).collect(),
        }
    }
}

impl NetFile {
    pub fn into_net(self) -> Result<ReluNet, WbError> {
        if self.dims.len() != self.layers.len() + 1 {
            return Err(WbError::Core(iforge_core::Error::BadSpec(
                "dims must list one more width than there are layers".into(),
            )));
        }
        let layers = self
            .layers
            .into_iter()
            .zip(self.dims.windows(2))
            .map(|(l, d)| Ok(Layer { w: Matrix::from_vec(d[0], d[1], l.w)?, b: l.b }))
            .collect::<Result<Vec<_>, iforge_core::Error>>()?;
        Ok(ReluNet::new(self.arch, layers)?)
    }
}

pub fn save_net(path: &Path, net: &ReluNet) -> Result<(), WbError> {
    write_json(path, &NetFile::from(net))
}

pub fn load_net(path: &Path) -> Result<ReluNet, WbError> {
    read_json::<NetFile>(path)?.into_net()
}

/// Pairwise matrix as CSV (row-major, one row per unit).
pub fn write_interaction_csv(path: &Path, report: &InteractionReport) -> Result<(), WbError> {
    let n = report.n_units;
    if n == 0 {
        return Err(WbError::Core(iforge_core::Error::Empty));
    }
    let names: Vec<String> = (0..n).map(|b| format!("u{b}")).collect();
    let mut header = vec!["unit"];
    header.extend(names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = (0..n)
        .map(|a| {
            let mut r = vec![format!("u{a}")];
            r.extend((0..n).map(|b| fmt_f64(report.get(a, b))));
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn out_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 5e-324, f64::MAX, 123456789.0, -0.0] {
            let back: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v}");
            let json: f64 = serde_json::from_str(&to_json_string(&v).unwrap()).unwrap();
            assert_eq!(json.to_bits(), v.to_bits(), "{v}");
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }
}
