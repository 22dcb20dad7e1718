//! 2-D projection of per-block encoder parameters across checkpoints:
//! principal components with a deterministic sign convention, emitted as
//! CSV plus an SVG scatter. The CSV/SVG writers are embedding-agnostic, so
//! a different 2-D reduction can be swapped in for `pca_2d` without
//! touching the output formats.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::load_checkpoint;
use crate::error::{HydraError, Result};

/// Rank-2 principal-component projection of centered rows.
#[derive(Clone, Debug)]
pub struct Pca2d {
    /// One (x, y) pair per input row.
    pub coords: Vec<[f64; 2]>,
    /// Unit-length principal directions in the original space.
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    pub eigenvalues: [f64; 2],
}

impl Pca2d {
    /// Reconstruction of row `i` from its 2-D coordinates.
    pub fn reconstruct(&self, i: usize) -> Vec<f64> {
        let [x, y] = self.coords[i];
        self.mean
            .iter()
            .enumerate()
            .map(|(j, m)| m + x * self.components[0][j] + y * self.components[1][j])
            .collect()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
/// Returns eigenvalues and eigenvectors (column k of `vecs` pairs with
/// eigenvalue k), sorted descending.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + col] = v[k * n + src];
        }
    }
    (vals, vecs)
}

/// PCA to two dimensions via the Gram matrix of the centered rows. The sign
/// convention makes the first nonzero loading of each component positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Pca2d> {
    let n = rows.len();
    if n < 2 {
        return Err(HydraError::Usage(format!("pca over {n} rows")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(HydraError::Dimension("pca rows of unequal width".to_string()));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (a, b) in centered[i].iter().zip(&centered[j]) {
                acc += a * b;
            }
            gram[i * n + j] = acc;
            gram[j * n + i] = acc;
        }
    }
    let (vals, vecs) = jacobi_eigen(gram, n);

    let mut coords = vec![[0.0; 2]; n];
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut eigenvalues = [0.0; 2];
    for k in 0..2usize.min(n) {
        let lambda = vals[k].max(0.0);
        eigenvalues[k] = lambda;
        if lambda < 1e-18 {
            continue; // degenerate direction: all coordinates stay zero
        }
        let sigma = lambda.sqrt();
        // loading v_k = X^T u_k / sigma
        let mut load = vec![0.0; d];
        for i in 0..n {
            let u = vecs[i * n + k];
            for j in 0..d {
                load[j] += centered[i][j] * u;
            }
        }
        for l in load.iter_mut() {
            *l /= sigma;
        }
        let mut flip = 1.0;
        for &l in &load {
            if l.abs() > 1e-9 {
                flip = l.signum();
                break;
            }
        }
        for (i, c) in coords.iter_mut().enumerate() {
            c[k] = vecs[i * n + k] * sigma * flip;
        }
        for (j, l) in load.iter().enumerate() {
            components[k][j] = l * flip;
        }
    }
    Ok(Pca2d { coords, components, mean, eigenvalues })
}

/// One projected parameter slice.
#[derive(Clone, Debug)]
pub struct ProjPoint {
    pub label: String,
    pub block: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug)]
pub struct ProjectionOutput {
    pub points: Vec<ProjPoint>,
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
}

/// Projects the selected per-block encoder parameter across checkpoints.
/// `selector` names the parameter inside each block, e.g.
/// `conv.depthwise.weight` picks `encoder.block{i}.conv.depthwise.weight`
/// from every block of every checkpoint.
pub fn project_params(
    checkpoint_paths: &[PathBuf],
    selector: &str,
    out_dir: &Path,
) -> Result<ProjectionOutput> {
    if checkpoint_paths.len() < 2 {
        return Err(HydraError::Usage(format!(
            "projection needs at least 2 checkpoints, got {}",
            checkpoint_paths.len()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut meta: Vec<(String, usize)> = Vec::new();
    let mut expected: Option<(usize, Vec<usize>)> = None; // (blocks, slice shape)
    for path in checkpoint_paths {
        let ckpt = load_checkpoint(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| path.display().to_string());
        let blocks = ckpt.state.encoder.num_blocks;
        if blocks == 0 {
            return Err(HydraError::Selector(format!(
                "{label}: encoder has no blocks to select from"
            )));
        }
        for b in 0..blocks {
            let name = format!("encoder.block{b}.{selector}");
            let p = ckpt.state.param(&name).map_err(|_| {
                HydraError::Selector(format!("{label}: no parameter `{name}`"))
            })?;
            match &expected {
                None => expected = Some((blocks, p.shape.clone())),
                Some((eb, es)) => {
                    if *eb != blocks || *es != p.shape {
                        return Err(HydraError::Selector(format!(
                            "{label}: `{name}` is {:?} over {blocks} blocks, expected {:?} over {eb}",
                            p.shape, es
                        )));
                    }
                }
            }
            rows.push(p.data.clone());
            meta.push((label.clone(), b));
        }
    }

    let pca = pca_2d(&rows)?;
    let points: Vec<ProjPoint> = meta
        .into_iter()
        .zip(&pca.coords)
        .map(|((label, block), &[x, y])| ProjPoint { label, block, x, y })
        .collect();

    fs::create_dir_all(out_dir)?;
    let stem = selector.replace('.', "_");
    let csv_path = out_dir.join(format!("projection_{stem}.csv"));
    let svg_path = out_dir.join(format!("projection_{stem}.svg"));
    fs::write(&csv_path, points_csv(&points))?;
    fs::write(&svg_path, points_svg(&points))?;
    Ok(ProjectionOutput { points, csv_path, svg_path })
}

fn points_csv(points: &[ProjPoint]) -> String {
    let mut out = String::from("label,block,x,y\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.label, p.block, p.x, p.y).unwrap();
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn points_svg(points: &[ProjPoint]) -> String {
    let (w, h, margin) = (640.0, 480.0, 48.0);
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-12);
        *lo -= 0.05 * span;
        *hi += 0.05 * span;
    };
    pad(&mut xmin, &mut xmax);
    pad(&mut ymin, &mut ymax);

    let mut labels: Vec<&str> = Vec::new();
    for p in points {
        if !labels.contains(&p.label.as_str()) {
            labels.push(&p.label);
        }
    }
    let sx = |x: f64| margin + (x - xmin) / (xmax - xmin) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - ymin) / (ymax - ymin) * (h - 2.0 * margin);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <rect x=\"{margin}\" y=\"{margin}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        w - 2.0 * margin,
        h - 2.0 * margin
    );
    for p in points {
        let color = PALETTE[labels.iter().position(|l| *l == p.label).unwrap() % PALETTE.len()];
        writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.8\"><title>{} block {}</title></circle>",
            sx(p.x),
            sy(p.y),
            p.label,
            p.block
        )
        .unwrap();
    }
    for (i, label) in labels.iter().enumerate() {
        let y = margin + 16.0 * i as f64 + 4.0;
        writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{y}\" r=\"4\" fill=\"{}\"/><text x=\"{:.2}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{label}</text>",
            w - margin + 12.0,
            PALETTE[i % PALETTE.len()],
            w - margin + 20.0,
            y + 4.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
