//! Dense row-major tensor values and their on-disk record format.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// A dense, row-major array of `f64` values.
///
/// All arithmetic runs in double precision. Records on disk are stored as
/// little-endian `f32`, so a value that went through a save/load cycle is
/// exactly representable in single precision and saves back to the same bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", "shape", format!("{shape:?}"), "positive dims"));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                "data",
                format!("{} values", data.len()),
                format!("{numel} values for shape {shape:?}"),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i} is {}", data[i])));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without validation. Callers guarantee the length.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", "shape", format!("{shape:?}"), format!("{:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Writes `name ndim dims...\n` followed by the little-endian f32 payload.
    pub fn write_record<W: Write>(&self, name: &str, w: &mut W) -> Result<()> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{} {} {}", name, self.shape.len(), dims.join(" "))?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads one record written by [`Tensor::write_record`]. Returns `None` at end of input.
    pub fn read_record<R: BufRead>(r: &mut R) -> Result<Option<(String, Tensor)>> {
        let mut header = String::new();
        if r.read_line(&mut header)? == 0 {
            return Ok(None);
        }
        let header = header.trim_end_matches('\n');
        let mut parts = header.split(' ');
        let name = parts
            .next()
            .filter(|n| !n.is_empty())
            .ok_or_else(|| Error::Format("empty tensor record header".into()))?
            .to_string();
        let ndim: usize = parse_field(parts.next(), &name, "ndim")?;
        let shape = (0..ndim).map(|_| parse_field(parts.next(), &name, "dim")).collect::<Result<Vec<usize>>>()?;
        if parts.next().is_some() {
            return Err(Error::Format(format!("trailing fields in header of {name}")));
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(|_| Error::Format(format!("truncated payload for {name}")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        Ok(Some((name, t)))
    }
}

fn parse_field(field: Option<&str>, name: &str, what: &str) -> Result<usize> {
    field.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format(format!("bad {what} in header of {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn record_roundtrip() {
        let t = Tensor::new(vec![2, 2], vec![0.5, -1.25, 3.0, 1e-3]).unwrap();
        let mut buf = Vec::new();
        t.write_record("enc.0.w", &mut buf).unwrap();
        assert!(buf.starts_with(b"enc.0.w 2 2 2\n"));
        let mut cur = std::io::Cursor::new(buf.clone());
        let (name, back) = Tensor::read_record(&mut cur).unwrap().unwrap();
        assert_eq!(name, "enc.0.w");
        assert_eq!(back.shape(), &[2, 2]);
        let mut again = Vec::new();
        back.write_record(&name, &mut again).unwrap();
        assert_eq!(buf, again);
        assert!(Tensor::read_record(&mut cur).unwrap().is_none());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut cur = std::io::Cursor::new(b"w 1 3\n\0\0\0\0".to_vec());
        assert!(Tensor::read_record(&mut cur).is_err());
    }
}
