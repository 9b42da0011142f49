//! CSV datasets (`id,label,f0,…,f{d-1}`) and the synthetic blob generator.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contrastive::{Dataset, LabeledPoint};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of the isotropic noise around each class mean.
    pub spread: f64,
    pub ood_offset: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            n_classes: 3,
            per_class: 200,
            dim: 2,
            spread: 0.5,
            ood_offset: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSets {
    pub train: Dataset,
    pub test: Dataset,
    /// Labeled `n_classes`, a class never seen in training.
    pub ood: Dataset,
}

/// Vertices of a regular simplex with `n` vertices at unit distance from the
/// origin, written in the first `n − 1` of `dim` coordinates.
fn simplex_vertices(n: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::Argument("need at least two classes".into()));
    }
    if dim + 1 < n {
        return Err(Error::Argument(format!(
            "{n} equidistant class means need dim ≥ {}, got {dim}",
            n - 1
        )));
    }
    // Centered basis vectors of Rⁿ, expressed in an orthonormal basis of
    // their (n − 1)-dimensional span via Gram-Schmidt.
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|k| if k == c { 1.0 } else { 0.0 } - 1.0 / n as f64).collect())
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in centered.iter().take(n - 1) {
        let mut w = v.clone();
        for b in &basis {
            let proj: f64 = w.iter().zip(b).map(|(a, c)| a * c).sum();
            w.iter_mut().zip(b).for_each(|(a, c)| *a -= proj * c);
        }
        let nrm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        basis.push(w.into_iter().map(|a| a / nrm).collect());
    }
    let radius = ((n - 1) as f64 / n as f64).sqrt();
    Ok(centered
        .iter()
        .map(|v| {
            let mut coords: Vec<f64> = basis
                .iter()
                .map(|b| v.iter().zip(b).map(|(a, c)| a * c).sum::<f64>() / radius)
                .collect();
            coords.resize(dim, 0.0);
            coords
        })
        .collect())
}

/// Gaussian class blobs around simplex vertices; train and test are
/// independent draws, the OoD set is a draw from the class mixture shifted
/// by `ood_offset` along the all-ones diagonal.
pub fn gen_blobs(cfg: &BlobConfig, seed: u64) -> Result<BlobSets> {
    if cfg.per_class == 0 || cfg.dim == 0 {
        return Err(Error::Argument("per_class and dim must be positive".into()));
    }
    if !(cfg.spread >= 0.0 && cfg.spread.is_finite() && cfg.ood_offset.is_finite()) {
        return Err(Error::Argument("spread and ood_offset must be finite, spread ≥ 0".into()));
    }
    let means = simplex_vertices(cfg.n_classes, cfg.dim)?;
    let direction = 1.0 / (cfg.dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let draw = |prefix: &str, shift: f64, ood_label: Option<u32>, rng: &mut ChaCha8Rng| {
        let mut points = Vec::with_capacity(cfg.n_classes * cfg.per_class);
        for (c, mean) in means.iter().enumerate() {
            for k in 0..cfg.per_class {
                let x = mean
                    .iter()
                    .map(|m| m + shift * direction + cfg.spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                points.push(LabeledPoint {
                    id: format!("{prefix}-{c}-{k}"),
                    x,
                    label: ood_label.unwrap_or(c as u32),
                });
            }
        }
        Dataset { points }
    };
    let train = draw("train", 0.0, None, &mut rng);
    let test = draw("test", 0.0, None, &mut rng);
    let ood = draw("ood", cfg.ood_offset, Some(cfg.n_classes as u32), &mut rng);
    Ok(BlobSets { train, test, ood })
}

pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = dataset.dim();
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for p in &dataset.points {
        let mut row = vec![p.id.clone(), p.label.to_string()];
        row.extend(p.x.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(dataset, std::io::BufWriter::new(file))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, msg: e.to_string() }
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with `id,label` followed by at least one feature".into(),
        });
    }
    let dim = header.len() - 2;
    for (k, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{k}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column `f{k}`, found `{name}`"),
            });
        }
    }
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} columns, found {}", dim + 2, rec.len()),
            });
        }
        let label = rec[1].trim().parse::<u32>().map_err(|e| Error::Parse {
            line,
            msg: format!("label `{}`: {e}", &rec[1]),
        })?;
        let x = rec
            .iter()
            .skip(2)
            .map(|f| {
                let v = f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("feature `{f}`: {e}"),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Parse { line, msg: format!("non-finite feature `{f}`") })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        points.push(LabeledPoint { id: rec[0].to_string(), x, label });
    }
    if points.is_empty() {
        return Err(Error::InvalidDataset("file has no rows".into()));
    }
    Ok(Dataset { points })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_is_equidistant() {
        for n in 2..6 {
            let v = simplex_vertices(n, n + 1).unwrap();
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            let d01 = d(&v[0], &v[1]);
            for i in 0..n {
                assert!((v[i].iter().map(|a| a * a).sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..i {
                    assert!((d(&v[i], &v[j]) - d01).abs() < 1e-12);
                }
            }
        }
        assert!(simplex_vertices(4, 2).is_err());
    }

    #[test]
    fn one_point_per_class() {
        let cfg = BlobConfig { n_classes: 3, per_class: 1, dim: 2, spread: 0.0, ood_offset: 0.0 };
        let sets = gen_blobs(&cfg, 1).unwrap();
        assert_eq!(sets.train.len(), 3);
        let means = simplex_vertices(3, 2).unwrap();
        for (p, m) in sets.train.points.iter().zip(&means) {
            assert_eq!(&p.x, m);
        }
    }

    #[test]
    fn csv_is_byte_identical_and_round_trips() {
        let cfg = BlobConfig { per_class: 5, ..Default::default() };
        let write = |seed| {
            let mut buf = Vec::new();
            write_dataset(&gen_blobs(&cfg, seed).unwrap().train, &mut buf).unwrap();
            buf
        };
        let a = write(3);
        assert_eq!(a, write(3));
        let back = read_dataset(a.as_slice()).unwrap();
        assert_eq!(back, gen_blobs(&cfg, 3).unwrap().train);
    }

    #[test]
    fn missing_column_reports_line() {
        let text = "id,label,f0,f1\na,0,1.0,2.0\nb,1,3.0\n";
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_dataset("id,lab,f0\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_dataset("id,label,f0\n".as_bytes()), Err(Error::InvalidDataset(_))));
    }
}
