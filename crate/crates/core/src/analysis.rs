//! Representation analysis: linear CKA and effective rank of layer features.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{forward, Mode, ModuleGraph, ParamStore};
use crate::tensor::{Real, Tensor};

/// Rows are examples or spatial positions, columns are channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub model: String,
    pub layer: String,
    pub data: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(model: impl Into<String>, layer: impl Into<String>, data: DMatrix<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(FeatureMatrix {
            model: model.into(),
            layer: layer.into(),
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    c
}

/// ‖YᶜᵀXᶜ‖²_F / (‖XᶜᵀXᶜ‖_F · ‖YᶜᵀYᶜ‖_F), 0 when either factor vanishes.
pub fn linear_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape(
            "linear_cka",
            format!("row counts differ ({} vs {})", x.nrows(), y.nrows()),
        ));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("linear_cka needs at least 2 rows".into()));
    }
    let xc = centered(x);
    let yc = centered(y);
    let cross = (yc.transpose() * &xc).norm_squared();
    let nx = (xc.transpose() * &xc).norm();
    let ny = (yc.transpose() * &yc).norm();
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok((cross / (nx * ny)).clamp(0.0, 1.0))
}

pub fn default_rank_tol(rows: usize) -> f64 {
    1e-6 * (rows as f64).sqrt()
}

/// Number of singular values strictly above the absolute threshold `abs_tol`.
pub fn effective_rank(x: &DMatrix<f64>, abs_tol: f64) -> Result<usize> {
    if !(abs_tol > 0.0) {
        return Err(Error::InvalidArgument(format!("abs_tol must be > 0, got {abs_tol}")));
    }
    if x.is_empty() {
        return Ok(0);
    }
    let sv = x
        .clone()
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?
        .singular_values;
    Ok(sv.iter().filter(|&&s| s > abs_tol).count())
}

/// `[X | Y]`.
pub fn hconcat(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape("hconcat", format!("{} vs {} rows", x.nrows(), y.nrows())));
    }
    let mut out = DMatrix::zeros(x.nrows(), x.ncols() + y.ncols());
    out.columns_mut(0, x.ncols()).copy_from(x);
    out.columns_mut(x.ncols(), y.ncols()).copy_from(y);
    Ok(out)
}

/// Flattens an N×C×H×W map to (N·H·W)×C, or an N×C tensor to N×C.
pub fn to_feature_rows<T: Real>(t: &Tensor<T>) -> Result<DMatrix<f64>> {
    match *t.shape() {
        [n, c] => Ok(DMatrix::from_fn(n, c, |i, j| t.data()[i * c + j].to_f64().unwrap_or(f64::NAN))),
        [n, c, h, w] => {
            let hw = h * w;
            let d = t.data();
            Ok(DMatrix::from_fn(n * hw, c, |r, j| {
                let (b, p) = (r / hw, r % hw);
                d[(b * c + j) * hw + p].to_f64().unwrap_or(f64::NAN)
            }))
        }
        ref s => Err(Error::shape("features", format!("cannot flatten shape {s:?}"))),
    }
}

/// Eval-mode activations of `layers` on `input`.
pub fn capture_features<T: Real>(
    model: &str,
    graph: &ModuleGraph,
    params: &mut ParamStore<T>,
    input: Tensor<T>,
    layers: &[String],
) -> Result<Vec<FeatureMatrix>> {
    let ids = graph.resolve(layers)?;
    let mut tape = Tape::inference();
    let x = tape.constant(input);
    let pass = forward(graph, params, &mut tape, x, Mode::Eval, None, &ids)?;
    layers
        .iter()
        .zip(&pass.captured)
        .map(|(name, v)| FeatureMatrix::new(model, name.clone(), to_feature_rows(tape.value(*v))?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaCell {
    pub layer_i: String,
    pub layer_j: String,
    pub cka: f64,
}

/// CKA between every layer of `a` and every layer of `b`.
pub fn cka_grid(a: &[FeatureMatrix], b: &[FeatureMatrix]) -> Result<Vec<CkaCell>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for fa in a {
        for fb in b {
            out.push(CkaCell {
                layer_i: fa.layer.clone(),
                layer_j: fb.layer.clone(),
                cka: linear_cka(&fa.data, &fb.data)?,
            });
        }
    }
    Ok(out)
}

pub fn cka_csv(cells: &[CkaCell]) -> String {
    let mut s = String::from("layer_i,layer_j,cka\n");
    for c in cells {
        s.push_str(&format!("{},{},{}\n", c.layer_i, c.layer_j, c.cka));
    }
    s
}

pub fn rank_csv(features: &[FeatureMatrix], abs_tol: f64) -> Result<String> {
    let mut s = String::from("layer,rows,cols,tol,effective_rank\n");
    for f in features {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            f.layer,
            f.rows(),
            f.cols(),
            abs_tol,
            effective_rank(&f.data, abs_tol)?
        ));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    /// HSIC with Gram matrices: tr(K H L H) normalized, on plain Vec<Vec<f64>>.
    fn gram_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let n = x.nrows();
        let gram = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| (0..n).map(|j| (0..m.ncols()).map(|k| m[(i, k)] * m[(j, k)]).sum()).collect())
                .collect()
        };
        let center = |k: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let row: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
            let all = row.iter().sum::<f64>() / n as f64;
            (0..n)
                .map(|i| (0..n).map(|j| k[i][j] - row[i] - row[j] + all).collect())
                .collect()
        };
        let (k, l) = (center(gram(x)), center(gram(y)));
        let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
            (0..n).map(|i| (0..n).map(|j| a[i][j] * b[i][j]).sum::<f64>()).sum()
        };
        hsic(&k, &l) / (hsic(&k, &k).sqrt() * hsic(&l, &l).sqrt())
    }

    #[test]
    fn cka_matches_gram_oracle() {
        for s in 0..20 {
            let x = gaussian(30, 6, s);
            let y = &x * gaussian(6, 4, 100 + s) + gaussian(30, 4, 200 + s);
            let got = linear_cka(&x, &y).unwrap();
            assert!((got - gram_cka(&x, &y)).abs() < 1e-6);
        }
    }

    #[test]
    fn cka_invariances() {
        let x = gaussian(40, 5, 1);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let q = gaussian(5, 5, 2).qr().q();
        assert!((linear_cka(&x, &(&x * q)).unwrap() - 1.0).abs() < 1e-6);
        let y = gaussian(40, 3, 3);
        let base = linear_cka(&x, &y).unwrap();
        assert!((linear_cka(&(&x * 7.5), &y).unwrap() - base).abs() < 1e-6);
        assert!((linear_cka(&y, &x).unwrap() - base).abs() < 1e-12);
        assert_eq!(linear_cka(&DMatrix::from_element(40, 2, 3.0), &y).unwrap(), 0.0);
        assert!(linear_cka(&x, &gaussian(39, 3, 4)).is_err());
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i][i]).collect()
    }

    #[test]
    fn rank_matches_jacobi_oracle() {
        let x = gaussian(50, 20, 5);
        let ata: Vec<Vec<f64>> = (0..20)
            .map(|i| (0..20).map(|j| (0..50).map(|k| x[(k, i)] * x[(k, j)]).sum()).collect())
            .collect();
        let expected = jacobi_eigenvalues(ata).iter().filter(|&&e| e.max(0.0).sqrt() > 1e-8).count();
        assert_eq!(expected, 20);
        assert_eq!(effective_rank(&x, 1e-8).unwrap(), expected);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(effective_rank(&DMatrix::identity(6, 6), 0.5).unwrap(), 6);
        let u = gaussian(10, 1, 1);
        let v = gaussian(1, 7, 2);
        let outer = &u * &v;
        assert_eq!(effective_rank(&outer, 1e-6).unwrap(), 1);
        assert!(effective_rank(&outer, 0.0).is_err());
    }

    #[test]
    fn flattening_puts_positions_in_rows() {
        let t = Tensor::<f32>::from_vec(vec![2, 3, 2, 2], (0..24).map(|v| v as f32).collect()).unwrap();
        let m = to_feature_rows(&t).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (8, 3));
        // sample 1, channel 2, position 3
        assert_eq!(m[(4 + 3, 2)], (12 + 8 + 3) as f64);
    }

    #[test]
    fn capture_unknown_layer_lists_names() {
        let g = crate::blocks::build_feature_mixer(&crate::blocks::MixerConfig::new(4, 4)).unwrap();
        let mut p = ParamStore::<f32>::init(&g, 0);
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 4]);
        match capture_features("m", &g, &mut p, x, &["nope".to_string()]) {
            Err(Error::UnknownLayer { available, .. }) => assert!(available.contains("dwconv")),
            other => panic!("{other:?}"),
        }
    }
}
