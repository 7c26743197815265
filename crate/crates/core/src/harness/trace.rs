//! CSV trace emission and parsing.
//!
//! Columns: `k,samples,phi,grad_norm,eps_theta,eps_theta_L,eps_V,eps_V_L,
//! x_0..x_{d-1},zeta,alpha,beta,w,tau`. Reals are written in scientific
//! notation with 17 significant digits, which round-trips every `f64`.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::actor_critic::TraceRecord;
use crate::error::{Error, Result};
use crate::oracles::Residuals;
use crate::schedule::StepSizes;

const LEADING: [&str; 8] = ["k", "samples", "phi", "grad_norm", "eps_theta", "eps_theta_L", "eps_V", "eps_V_L"];
const TRAILING: [&str; 5] = ["zeta", "alpha", "beta", "w", "tau"];

pub fn header(dim_x: usize) -> Vec<String> {
    let mut h: Vec<String> = LEADING.iter().map(|s| s.to_string()).collect();
    h.extend((0..dim_x).map(|i| format!("x_{i}")));
    h.extend(TRAILING.iter().map(|s| s.to_string()));
    h
}

/// 17 significant digits; `NaN`, `inf` and `-inf` for non-finite values.
pub fn format_real(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("malformed trace: {other:?}")),
    }
}

/// Writes the header and one row per record.
pub fn write_trace<W: Write>(out: W, dim_x: usize, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(dim_x)).map_err(csv_err)?;
    for r in records {
        if r.x.len() != dim_x {
            return Err(Error::Dimension(format!("record at k={} has {} coordinates, expected {dim_x}", r.k, r.x.len())));
        }
        let mut row = vec![r.k.to_string(), r.samples.to_string()];
        let res = &r.residuals;
        row.extend([r.phi, r.grad_norm, res.eps_theta, res.eps_theta_l, res.eps_v, res.eps_v_l].map(format_real));
        row.extend(r.x.iter().map(|&v| format_real(v)));
        let s = &r.sizes;
        row.extend([s.zeta, s.alpha, s.beta, s.w, s.tau].map(format_real));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn trace_to_string(dim_x: usize, records: &[TraceRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_trace(&mut buf, dim_x, records)?;
    Ok(String::from_utf8(buf).expect("trace text is ASCII"))
}

fn parse_real(field: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("malformed trace value `{field}`")))
}

/// Parses a trace, checking the header layout.
pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let head: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if head.len() < LEADING.len() + TRAILING.len() {
        return Err(Error::InvalidArgument("trace header is too short".into()));
    }
    let dim_x = head.len() - LEADING.len() - TRAILING.len();
    if head != header(dim_x) {
        return Err(Error::InvalidArgument(format!("unexpected trace header {head:?}")));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let f: Vec<&str> = row.iter().collect();
        let int = |s: &str| s.parse::<u64>().map_err(|_| Error::InvalidArgument(format!("malformed trace integer `{s}`")));
        let reals = f[2..].iter().map(|s| parse_real(s)).collect::<Result<Vec<f64>>>()?;
        let t = &reals[6 + dim_x..];
        records.push(TraceRecord {
            k: int(f[0])?,
            samples: int(f[1])?,
            phi: reals[0],
            grad_norm: reals[1],
            residuals: Residuals { eps_theta: reals[2], eps_theta_l: reals[3], eps_v: reals[4], eps_v_l: reals[5] },
            x: DVector::from_column_slice(&reals[6..6 + dim_x]),
            sizes: StepSizes { zeta: t[0], alpha: t[1], beta: t[2], w: t[3], tau: t[4] },
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(k: u64, x: Vec<f64>, phi: f64) -> TraceRecord {
        TraceRecord {
            k,
            samples: 2 * k,
            phi,
            grad_norm: f64::NAN,
            residuals: Residuals { eps_theta: 0.1, eps_theta_l: f64::NAN, eps_v: 1e-300, eps_v_l: -0.0 },
            x: DVector::from_vec(x),
            sizes: StepSizes { zeta: 1.0 / 3.0, alpha: 0.2, beta: 0.3, w: 0.4, tau: 0.5 },
        }
    }

    #[test]
    fn header_layout() {
        assert_eq!(
            header(2).join(","),
            "k,samples,phi,grad_norm,eps_theta,eps_theta_L,eps_V,eps_V_L,x_0,x_1,zeta,alpha,beta,w,tau"
        );
        assert_eq!(trace_to_string(3, &[]).unwrap().lines().count(), 1);
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(format_real(1.0 / 3.0), "3.3333333333333331e-1");
        assert_eq!(format_real(-2.5), "-2.5000000000000000e0");
        assert_eq!(format_real(f64::NAN), "NaN");
        assert_eq!(format_real(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn round_trip_with_non_finite_fields() {
        let recs = vec![record(0, vec![4.5, 4.5], -400.0), record(7, vec![8.9, 0.1 + 0.2], f64::INFINITY)];
        let text = trace_to_string(2, &recs).unwrap();
        let back = read_trace(text.as_bytes()).unwrap();
        assert_eq!(format!("{back:?}"), format!("{recs:?}"));
        assert_eq!(trace_to_string(2, &back).unwrap(), text);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_trace("a,b\n1,2\n".as_bytes()).is_err());
        let mut text = trace_to_string(1, &[record(0, vec![1.0], 0.0)]).unwrap();
        text = text.replace("1.0000000000000000e0,", "one,");
        assert!(read_trace(text.as_bytes()).is_err());
        assert!(write_trace(Vec::new(), 3, &[record(0, vec![1.0], 0.0)]).is_err());
    }

    proptest! {
        #[test]
        fn reals_round_trip_bit_exactly(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            let back: f64 = format_real(v).parse().unwrap();
            if v.is_nan() {
                prop_assert!(back.is_nan());
            } else {
                prop_assert_eq!(back.to_bits(), v.to_bits());
            }
        }
    }
}
