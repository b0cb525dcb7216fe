//! Small text formats: parameter vectors, landmark lists and score columns.

use std::path::Path;

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::model::{Dims, FaceParameters};
use crate::real::{self, lit, Real};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_f64(s: &str, name: &str, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        path: name.to_string(),
        line,
        message: format!("bad number {:?}", s.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: name.to_string(),
            line,
            message: format!("non-finite value {v}"),
        });
    }
    Ok(v)
}

/// Lines `shape,v1,v2,...`, `texture,...` and `expression,...`. A missing
/// block is all zeros.
pub fn write_params<T: Real>(p: &FaceParameters<T>) -> String {
    let row = |name: &str, a: &Array1<T>| {
        let vals: Vec<String> = a.iter().map(|v| format!("{:?}", real::to_f64(*v))).collect();
        format!("{name},{}\n", vals.join(","))
    };
    row("shape", &p.shape) + &row("texture", &p.texture) + &row("expression", &p.expression)
}

pub fn parse_params<T: Real>(text: &str, dims: Dims, name: &str) -> Result<FaceParameters<T>> {
    let mut p = FaceParameters::<T>::zeros(dims);
    let mut seen = [false; 3];
    for (line, l) in content_lines(text) {
        let mut fields = l.split(',');
        let key = fields.next().unwrap_or("").trim();
        let (slot, target) = match key {
            "shape" => (0, &mut p.shape),
            "texture" => (1, &mut p.texture),
            "expression" => (2, &mut p.expression),
            _ => {
                return Err(Error::Parse {
                    path: name.to_string(),
                    line,
                    message: format!("unknown block {key:?}"),
                })
            }
        };
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::Parse {
                path: name.to_string(),
                line,
                message: format!("duplicate block {key:?}"),
            });
        }
        let vals = fields
            .filter(|f| !f.trim().is_empty())
            .map(|f| parse_f64(f, name, line))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != target.len() {
            return Err(Error::Parse {
                path: name.to_string(),
                line,
                message: format!("{key} has {} values, model expects {}", vals.len(), target.len()),
            });
        }
        *target = vals.into_iter().map(lit).collect();
    }
    Ok(p)
}

pub fn load_params<T: Real>(path: impl AsRef<Path>, dims: Dims) -> Result<FaceParameters<T>> {
    let path = path.as_ref();
    parse_params(&read_text(path)?, dims, &path.display().to_string())
}

/// One `index x y` line per landmark, in index order.
pub fn parse_landmarks(text: &str, count: usize, name: &str) -> Result<Vec<[f64; 2]>> {
    let err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let mut out = vec![None; count];
    for (line, l) in content_lines(text) {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err(line, format!("expected `index x y`, got {l:?}")));
        }
        let i: usize = f[0].parse().map_err(|_| err(line, format!("bad landmark index {:?}", f[0])))?;
        if i >= count {
            return Err(err(line, format!("landmark index {i} out of range 0..{count}")));
        }
        if out[i].is_some() {
            return Err(err(line, format!("landmark {i} given twice")));
        }
        out[i] = Some([parse_f64(f[1], name, line)?, parse_f64(f[2], name, line)?]);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::Validation(format!("{name}: landmark {i} missing"))))
        .collect()
}

pub fn write_landmarks(points: &[[f64; 2]]) -> String {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{i} {:?} {:?}\n", p[0], p[1]))
        .collect()
}

pub fn load_landmarks(path: impl AsRef<Path>, count: usize) -> Result<Vec<[f64; 2]>> {
    let path = path.as_ref();
    parse_landmarks(&read_text(path)?, count, &path.display().to_string())
}

/// One score per line, taken from the last comma-separated field so that
/// `key,score` rows work too. A non-numeric first line is a header.
pub fn parse_scores(text: &str, name: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, (line, l)) in content_lines(text).enumerate() {
        let field = l.rsplit(',').next().unwrap_or("");
        match parse_f64(field, name, line) {
            Ok(v) => out.push(v),
            Err(_) if k == 0 && field.trim().parse::<f64>().is_err() => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    parse_scores(&read_text(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_and_defaults() {
        let dims = Dims {
            shape: 2,
            texture: 1,
            expression: 2,
        };
        let mut p = FaceParameters::<f64>::zeros(dims);
        p.shape[1] = 0.1;
        p.expression[0] = -3.5e-7;
        assert_eq!(parse_params::<f64>(&write_params(&p), dims, "p").unwrap(), p);
        let only = parse_params::<f64>("# c\nshape, 1, 2\n", dims, "p").unwrap();
        assert_eq!(only.shape.to_vec(), vec![1.0, 2.0]);
        assert_eq!(only.texture.to_vec(), vec![0.0]);
        assert!(matches!(
            parse_params::<f64>("shape,1\n", dims, "p"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn landmarks_need_every_index() {
        assert!(parse_landmarks("0 1 2\n", 2, "l").is_err());
        assert_eq!(parse_landmarks("1 3 4\n0 1 2\n", 2, "l").unwrap(), vec![[1.0, 2.0], [3.0, 4.0]]);
        assert!(matches!(parse_landmarks("0 1 2\n0 1 2\n", 2, "l"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn scores_with_header_and_keys() {
        assert_eq!(parse_scores("key,score\na,0.5\nb,-0.25\n", "s").unwrap(), vec![0.5, -0.25]);
        assert!(matches!(parse_scores("0.1\nx\n", "s"), Err(Error::Parse { line: 2, .. })));
    }
}
