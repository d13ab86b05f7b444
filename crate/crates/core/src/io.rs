//! On-disk formats.
//!
//! Binary matrix container (little endian throughout):
//!
//! ```text
//! magic   8 bytes  b"CUBMAT01"
//! count   u64      number of matrices that follow
//! repeat count times:
//!   rows  u64
//!   cols  u64
//!   data  rows*cols f64, row-major
//! ```
//!
//! Dataset CSV columns: `x_coord,y_coord,x1..xp,z,omega,split` where `split`
//! is `train` or `test`. `omega` may be left empty for observed data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spatial_sim::{SpatialDataset, Split};

pub const MATRIX_MAGIC: &[u8; 8] = b"CUBMAT01";

pub fn write_matrices<T: Real, W: Write>(mut w: W, mats: &[&Array2<T>]) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(mats.len() as u64).to_le_bytes())?;
    for m in mats {
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_matrices<T: Real, R: Read>(mut r: R) -> Result<Vec<Array2<T>>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Malformed { row: 0, message: "bad matrix container magic".into() });
    }
    let count = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| Error::Malformed {
            row: idx,
            message: format!("matrix dimensions {rows}x{cols} overflow"),
        })?;
        let mut data = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            data.push(T::lit(f64::from_bits(read_u64(&mut r)?)));
        }
        out.push(Array2::from_shape_vec((rows, cols), data).expect("length matches dims"));
    }
    Ok(out)
}

pub fn save_matrices<T: Real>(path: &Path, mats: &[&Array2<T>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrices(&mut w, mats)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrices<T: Real>(path: &Path) -> Result<Vec<Array2<T>>> {
    read_matrices(BufReader::new(File::open(path)?))
}

/// Writes a dataset in the documented CSV layout.
pub fn write_dataset_csv<T: Real, W: Write>(w: W, ds: &SpatialDataset<T>) -> Result<()> {
    ds.validate()?;
    let mut wtr = csv::Writer::from_writer(w);
    let p = ds.n_covariates();
    let mut header = vec!["x_coord".to_string(), "y_coord".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    header.extend(["z", "omega", "split"].map(String::from));
    wtr.write_record(&header)?;
    let mut is_train = vec![false; ds.len()];
    for &i in &ds.split.train {
        is_train[i] = true;
    }
    for i in 0..ds.len() {
        let mut rec = vec![fmt(ds.locations[(i, 0)]), fmt(ds.locations[(i, 1)])];
        rec.extend((0..p).map(|j| fmt(ds.x[(i, j)])));
        rec.push(fmt(ds.z[i]));
        rec.push(ds.omega.as_ref().map(|o| fmt(o[i])).unwrap_or_default());
        rec.push(if is_train[i] { "train" } else { "test" }.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset_csv<T: Real>(path: &Path, ds: &SpatialDataset<T>) -> Result<()> {
    write_dataset_csv(BufWriter::new(File::create(path)?), ds)
}

/// Shortest round-trip decimal rendering of the value as `f64`.
pub fn fmt<T: Real>(v: T) -> String {
    format!("{}", v.to_f64_lossy())
}

/// Options for reading a tabular dataset.
#[derive(Debug, Clone, Default)]
pub struct TabularOptions {
    /// Replace the response by its natural logarithm (responses must be positive).
    pub log_response: bool,
    /// When set, ignore any `split` column and draw a random partition with
    /// this training fraction and seed.
    pub resplit: Option<(f64, u64)>,
}

/// Reads a dataset CSV. Required columns: `x_coord`, `y_coord`, `z`; every
/// column named `x<k>` is a covariate (ordered by `k`). `omega` and `split`
/// are optional; without a split column `opts.resplit` must be given.
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn read_dataset_csv<T: Real, R: Read>(r: R, opts: &TabularOptions) -> Result<SpatialDataset<T>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut seen = std::collections::HashSet::new();
    for h in headers.iter() {
        if !seen.insert(h.trim()) {
            return Err(Error::Malformed { row: 0, message: format!("duplicate column '{}'", h.trim()) });
        }
    }
    let missing = |name: &str| Error::Malformed { row: 0, message: format!("missing column '{name}'") };
    let cx = find("x_coord").ok_or_else(|| missing("x_coord"))?;
    let cy = find("y_coord").ok_or_else(|| missing("y_coord"))?;
    let cz = find("z").ok_or_else(|| missing("z"))?;
    let comega = find("omega");
    let csplit = find("split");
    let mut cov_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| {
            let h = h.trim();
            h.strip_prefix('x')
                .and_then(|k| k.parse::<usize>().ok())
                .map(|k| (k, c))
        })
        .collect();
    cov_cols.sort_unstable();

    let mut loc = Vec::new();
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut omegas = Vec::new();
    let mut any_omega = false;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        let num = |c: usize, what: &str| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::Malformed {
                row,
                message: format!("cannot parse {what} value '{raw}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Malformed { row, message: format!("non-finite {what} value '{raw}'") });
            }
            Ok(v)
        };
        loc.push(num(cx, "x_coord")?);
        loc.push(num(cy, "y_coord")?);
        for &(_, c) in &cov_cols {
            xs.push(num(c, "covariate")?);
        }
        let mut z = num(cz, "z")?;
        if opts.log_response {
            if z <= 0.0 {
                return Err(Error::Malformed { row, message: format!("log transform needs z > 0, got {z}") });
            }
            z = z.ln();
        }
        zs.push(z);
        match comega.map(|c| rec.get(c).unwrap_or("").trim()) {
            Some(s) if !s.is_empty() => {
                any_omega = true;
                omegas.push(num(comega.unwrap(), "omega")?);
            }
            _ => omegas.push(f64::NAN),
        }
        if opts.resplit.is_none() {
            let c = csplit.ok_or_else(|| missing("split"))?;
            match rec.get(c).unwrap_or("").trim() {
                "train" => train.push(idx),
                "test" => test.push(idx),
                other => {
                    return Err(Error::Malformed { row, message: format!("split must be train or test, got '{other}'") })
                }
            }
        }
    }
    let n = zs.len();
    if n == 0 {
        return Err(Error::EmptyInput("dataset rows"));
    }
    let split = match opts.resplit {
        Some((frac, seed)) => {
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::InvalidParameter(format!("train fraction must be in (0,1), got {frac}")));
            }
            let n_train = ((n as f64) * frac).round() as usize;
            Split::random(n, n_train.clamp(1, n - 1), seed)
        }
        None => Split { train, test },
    };
    let omega = if any_omega {
        if let Some(pos) = omegas.iter().position(|v| v.is_nan()) {
            return Err(Error::Malformed { row: pos + 1, message: "omega missing on some rows only".into() });
        }
        Some(Array1::from_iter(omegas.into_iter().map(T::lit)))
    } else {
        None
    };
    let ds = SpatialDataset {
        locations: Array2::from_shape_vec((n, 2), loc.into_iter().map(T::lit).collect()).expect("shape"),
        x: Array2::from_shape_vec((n, cov_cols.len()), xs.into_iter().map(T::lit).collect()).expect("shape"),
        z: Array1::from_iter(zs.into_iter().map(T::lit)),
        omega,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset_csv<T: Real>(path: &Path, opts: &TabularOptions) -> Result<SpatialDataset<T>> {
    read_dataset_csv(BufReader::new(File::open(path)?), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial_sim::{simulate_dataset, SimConfig};
    use ndarray::array;

    #[test]
    fn matrix_container_round_trip() {
        let a: Array2<f64> = array![[1.0, -2.5, 3.0], [0.1, f64::MIN_POSITIVE, 1e300]];
        let b: Array2<f64> = Array2::zeros((0, 4));
        let mut buf = Vec::new();
        write_matrices(&mut buf, &[&a, &b]).unwrap();
        assert_eq!(&buf[..8], MATRIX_MAGIC);
        assert_eq!(buf.len(), 8 + 8 + 16 + 6 * 8 + 16);
        let back: Vec<Array2<f64>> = read_matrices(buf.as_slice()).unwrap();
        assert_eq!(back, vec![a, b]);
        buf[0] = b'X';
        assert!(read_matrices::<f64, _>(buf.as_slice()).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = SimConfig { n_total: 40, n_train: 30, ..SimConfig::default() };
        let ds: SpatialDataset<f64> = simulate_dataset(&cfg).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &ds).unwrap();
        let header = std::str::from_utf8(&buf).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, "x_coord,y_coord,x1,x2,z,omega,split");
        let back: SpatialDataset<f64> = read_dataset_csv(buf.as_slice(), &TabularOptions::default()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn nan_row_is_reported() {
        let text = "x_coord,y_coord,x1,z,split\n0.1,0.2,1.0,2.0,train\n0.3,0.4,1.0,NaN,test\n";
        match read_dataset_csv::<f64, _>(text.as_bytes(), &TabularOptions::default()) {
            Err(Error::Malformed { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn log_transform_and_resplit() {
        let text = "x_coord,y_coord,x1,z\n0.1,0.2,1.0,2.0\n0.3,0.4,1.0,5.0\n0.5,0.5,0.0,7.5\n0.9,0.1,2.0,1.0\n";
        let opts = TabularOptions { log_response: true, resplit: Some((0.5, 4)) };
        let ds: SpatialDataset<f64> = read_dataset_csv(text.as_bytes(), &opts).unwrap();
        for (z, raw) in ds.z.iter().zip([2.0f64, 5.0, 7.5, 1.0]) {
            assert!((z - raw.ln()).abs() < 1e-12);
        }
        assert_eq!(ds.split.train.len(), 2);
        assert!(ds.omega.is_none());
        let bad = "x_coord,y_coord,z\n0.1,0.2,-1.0\n";
        assert!(read_dataset_csv::<f64, _>(bad.as_bytes(), &opts).is_err());
    }

    #[test]
    fn duplicate_header_rejected() {
        let text = "x_coord,y_coord,z,z,split\n0.1,0.2,1,1,train\n";
        assert!(read_dataset_csv::<f64, _>(text.as_bytes(), &TabularOptions::default()).is_err());
    }
}
