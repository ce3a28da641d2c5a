//! CSV emission and ingestion. Floats are printed with 17 significant
//! digits so values round-trip exactly and logs are byte-stable.

use grelu_core::data::Dataset;
use grelu_core::matrix::Matrix;
use grelu_core::ntk::KernelMatrix;
use grelu_core::theory::TheoryReport;
use grelu_core::train::TrainLog;
use std::io::Write;
use thiserror::Error;

/// 17 significant digits: enough to reproduce any f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_train_log(w: &mut impl Write, log: &TrainLog) -> std::io::Result<()> {
    let with_hamming = log.rows.iter().any(|r| r.hamming.is_some());
    if with_hamming {
        writeln!(w, "iter,loss,grad_norm,grad_tdiff,tau,eta,wall_ms,hamming")?;
    } else {
        writeln!(w, "iter,loss,grad_norm,grad_tdiff,tau,eta,wall_ms")?;
    }
    for r in &log.rows {
        write!(
            w,
            "{},{},{},{},{},{},{}",
            r.iter,
            fmt_f64(r.loss),
            fmt_f64(r.grad_norm),
            fmt_f64(r.grad_tdiff),
            fmt_f64(r.tau),
            fmt_f64(r.eta),
            r.wall_ms
        )?;
        if with_hamming {
            write!(w, ",{}", fmt_f64(r.hamming.unwrap_or(0.0)))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Minimal train-log reader (the columns the probes need: iter, loss, eta).
pub fn read_train_log_rows(text: &str) -> Result<Vec<(usize, f64, f64)>, CsvError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 7 {
            return Err(CsvError::Parse { line: idx + 1, what: format!("expected >= 7 fields, got {}", fields.len()) });
        }
        let parse = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| CsvError::Parse { line: idx + 1, what: format!("bad {what}: {s}") })
        };
        let iter = fields[0]
            .parse::<usize>()
            .map_err(|_| CsvError::Parse { line: idx + 1, what: format!("bad iter: {}", fields[0]) })?;
        rows.push((iter, parse(fields[1], "loss")?, parse(fields[5], "eta")?));
    }
    Ok(rows)
}

pub fn write_theory_report(w: &mut impl Write, report: &TheoryReport) -> std::io::Result<()> {
    writeln!(w, "quantity,k,i,j,measured,bound,pass")?;
    for r in &report.records {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.quantity,
            opt(r.k),
            opt(r.i),
            opt(r.j),
            fmt_f64(r.measured),
            fmt_f64(r.bound),
            r.pass
        )?;
    }
    Ok(())
}

pub fn write_kernel(
    w: &mut impl Write,
    kernel: &KernelMatrix,
    m: usize,
    depth: usize,
) -> std::io::Result<()> {
    let n = kernel.k.rows();
    writeln!(w, "# ntk p={} n={} m={} L={}", kernel.p, n, m, depth)?;
    for i in 0..n {
        let row: Vec<String> = kernel.k.row(i).iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Dataset import from CSV with header `x0,..,x{d-1},y0,..`.
///
/// When `normalize` is set, input rows are rescaled to unit norm and labels
/// to `max |y| = 1` (recording the scale); otherwise the rows must already
/// satisfy the dataset invariants.
pub fn import_dataset_csv(text: &str, normalize: bool) -> Result<Dataset, CsvError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(CsvError::Parse { line: 1, what: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d_x = cols.iter().take_while(|c| c.starts_with('x')).count();
    let d_y = cols.len() - d_x;
    if d_x == 0 || d_y == 0 || !cols[d_x..].iter().all(|c| c.starts_with('y')) {
        return Err(CsvError::Parse {
            line: 1,
            what: format!("header must be x0..x{{d-1}},y0..; got `{header}`"),
        });
    }
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d_x + d_y {
            return Err(CsvError::Parse {
                line: idx + 1,
                what: format!("expected {} fields, got {}", d_x + d_y, fields.len()),
            });
        }
        for (c, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| CsvError::Parse {
                line: idx + 1,
                what: format!("bad number `{f}`"),
            })?;
            if c < d_x {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(CsvError::Parse { line: 2, what: "no data rows".into() });
    }
    let mut x = Matrix::from_vec(n, d_x, xs);
    let mut y = Matrix::from_vec(n, d_y, ys);
    let mut label_scale = 1.0;
    if normalize {
        for i in 0..n {
            let row = x.row_mut(i);
            let norm = grelu_core::matrix::norm2(row);
            if norm == 0.0 {
                return Err(CsvError::Parse { line: i + 2, what: "zero input row".into() });
            }
            let inv = 1.0 / norm;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let max = y.max_abs();
        if max > 0.0 {
            label_scale = max;
            y.scale(1.0 / max);
        }
    }
    Dataset::from_parts(x, y, label_scale)
        .map_err(|e| CsvError::Parse { line: 1, what: e.to_string() })
}
