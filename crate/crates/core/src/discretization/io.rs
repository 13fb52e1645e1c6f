//! CSV and compact binary layouts for nodal fields.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic   b"QLCF"
//! u32     version (1)
//! u32     number of spatial dims n
//! u32 x n node counts per axis
//! f64 x 2n (lo, hi) per axis
//! u32     number of time layers L
//! f64     time horizon (0 for a single snapshot)
//! f64 x L*nodes payload, layer-major, x index fastest
//! ```

use std::io::{Read, Write};
use std::sync::Arc;

use super::grid::{Grid, ScalarField, SpaceTimeField, TimeGrid};
use crate::error::{Error, Result};
use crate::geometry::SpatialDomain;

const MAGIC: &[u8; 4] = b"QLCF";
const VERSION: u32 = 1;

fn coord_header(grid: &Grid) -> String {
    ["x", "y"][..grid.dims()].join(",")
}

fn coord_cells(grid: &Grid, node: usize) -> String {
    grid.coords(node)
        .iter()
        .map(|c| format!("{c}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_field_csv(field: &ScalarField, out: &mut impl Write) -> Result<()> {
    let grid = field.grid();
    writeln!(out, "{},value", coord_header(grid))?;
    for (n, v) in field.values().iter().enumerate() {
        writeln!(out, "{},{v}", coord_cells(grid, n))?;
    }
    Ok(())
}

pub fn write_spacetime_csv(field: &SpaceTimeField, out: &mut impl Write) -> Result<()> {
    let grid = field.grid();
    writeln!(out, "t,{},value", coord_header(grid))?;
    for k in 0..field.layer_count() {
        let t = field.time().time(k);
        for (n, v) in field.layer(k).iter().enumerate() {
            writeln!(out, "{t},{},{v}", coord_cells(grid, n))?;
        }
    }
    Ok(())
}

/// Decoded binary file: grid, optional time grid, flat payload.
#[derive(Debug, Clone)]
pub struct BinaryField {
    pub grid: Arc<Grid>,
    pub time: Option<TimeGrid>,
    pub layers: usize,
    pub data: Vec<f64>,
}

impl BinaryField {
    pub fn into_spacetime(self) -> Result<SpaceTimeField> {
        let time = self
            .time
            .ok_or_else(|| Error::Format("file holds a single snapshot".into()))?;
        SpaceTimeField::from_flat(self.grid, time, self.data)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        match &self.time {
            Some(tg) => write_spacetime_csv(
                &SpaceTimeField::from_flat(self.grid.clone(), *tg, self.data.clone())?,
                out,
            ),
            None => write_field_csv(&ScalarField::new(self.grid.clone(), self.data.clone())?, out),
        }
    }
}

fn write_header(grid: &Grid, layers: usize, horizon: f64, out: &mut impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(grid.dims() as u32).to_le_bytes())?;
    for &c in grid.counts() {
        out.write_all(&(c as u32).to_le_bytes())?;
    }
    for &(lo, hi) in grid.domain().bounds() {
        out.write_all(&lo.to_le_bytes())?;
        out.write_all(&hi.to_le_bytes())?;
    }
    out.write_all(&(layers as u32).to_le_bytes())?;
    out.write_all(&horizon.to_le_bytes())?;
    Ok(())
}

fn write_payload(values: &[f64], out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_field_binary(field: &ScalarField, out: &mut impl Write) -> Result<()> {
    write_header(field.grid(), 1, 0.0, out)?;
    write_payload(field.values(), out)
}

pub fn write_spacetime_binary(field: &SpaceTimeField, out: &mut impl Write) -> Result<()> {
    let tg = field.time();
    write_header(field.grid(), tg.layers(), tg.horizon, out)?;
    write_payload(field.data(), out)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(input: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_binary(input: &mut impl Read) -> Result<BinaryField> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dims = read_u32(input)? as usize;
    if !(1..=2).contains(&dims) {
        return Err(Error::Format(format!("unsupported dimension {dims}")));
    }
    let counts: Vec<usize> = (0..dims)
        .map(|_| read_u32(input).map(|c| c as usize))
        .collect::<Result<_>>()?;
    let mut bounds = Vec::with_capacity(dims);
    for _ in 0..dims {
        bounds.push((read_f64(input)?, read_f64(input)?));
    }
    let layers = read_u32(input)? as usize;
    let horizon = read_f64(input)?;
    let domain = if dims == 1 {
        SpatialDomain::interval(bounds[0].0, bounds[0].1, counts[0])
    } else {
        SpatialDomain::rectangle(bounds[0], bounds[1], (counts[0], counts[1]))
    }
    .map_err(|e| Error::Format(e.to_string()))?;
    let grid = Grid::new(domain);
    let total = layers * grid.node_count();
    let mut raw = vec![0u8; total * 8];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let time = if layers > 1 {
        Some(TimeGrid {
            horizon,
            steps: layers - 1,
        })
    } else {
        None
    };
    Ok(BinaryField {
        grid,
        time,
        layers,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(values in proptest::collection::vec(-1e6f64..1e6, 17 * 9 * 3)) {
            let grid = Grid::new(SpatialDomain::rectangle((0.0, 1.0), (-1.0, 2.0), (17, 9)).unwrap());
            let tg = TimeGrid { horizon: 0.25, steps: 2 };
            let field = SpaceTimeField::from_flat(grid, tg, values).unwrap();
            let mut buf = Vec::new();
            write_spacetime_binary(&field, &mut buf).unwrap();
            let back = read_binary(&mut buf.as_slice()).unwrap().into_spacetime().unwrap();
            prop_assert_eq!(back.data(), field.data());
            prop_assert_eq!(back.time(), field.time());
            prop_assert_eq!(back.grid().counts(), field.grid().counts());
        }
    }

    #[test]
    fn csv_has_coordinates_and_values() {
        let grid = Grid::new(SpatialDomain::interval(0.0, 1.0, 9).unwrap());
        let f = ScalarField::from_fn(grid, |x| x[0] * 2.0);
        let mut out = Vec::new();
        write_field_csv(&f, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "x,value");
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[9], "1,2");
    }

    #[test]
    fn truncated_file_is_an_error() {
        let grid = Grid::new(SpatialDomain::interval(0.0, 1.0, 9).unwrap());
        let f = ScalarField::from_fn(grid, |x| x[0]);
        let mut buf = Vec::new();
        write_field_binary(&f, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_binary(&mut buf.as_slice()).is_err());
    }
}
