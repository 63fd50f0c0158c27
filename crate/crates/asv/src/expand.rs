//! Vocabulary expansion: fit a linear map from pretrained word vectors to
//! the trained embedding space, then synthesize embeddings for words the
//! model never saw. Appended rows never disturb existing ones.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{Vocabulary, PAD, SOS, UNK};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Word vectors parsed from a text file, in file order.
#[derive(Debug, Clone)]
pub struct PretrainedEmbeddings {
    entries: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl PretrainedEmbeddings {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| &self.entries[i].1[..])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(t, v)| (t.as_str(), &v[..]))
    }

    pub fn from_entries(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = entries
            .first()
            .map(|(_, v)| v.len())
            .ok_or_else(|| Error::Parse("no embedding entries".into()))?;
        let mut index = HashMap::new();
        let mut kept = Vec::new();
        for (tok, v) in entries {
            if v.len() != dim {
                return Err(Error::Parse(format!(
                    "token {tok:?} has {} values, expected {dim}",
                    v.len()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite vector for {tok:?}")));
            }
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), kept.len());
                kept.push((tok, v));
            }
        }
        Ok(PretrainedEmbeddings {
            entries: kept,
            index,
            dim,
        })
    }
}

/// Parses `token v1 ... v_d` lines. An optional first line holding exactly
/// two integers (`count dim`) is skipped. Duplicate tokens keep the first
/// occurrence; a ragged row is an error naming its line.
pub fn load_pretrained_text(path: &Path) -> Result<PretrainedEmbeddings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap().to_string();
        let values: Vec<&str> = parts.collect();
        if lineno == 0 && values.len() == 1 {
            let header = token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok();
            if header {
                continue;
            }
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            values.iter().map(|v| v.parse::<f64>()).collect();
        let vec = parsed.map_err(|_| {
            Error::Parse(format!(
                "{} line {}: non-numeric embedding value",
                path.display(),
                lineno + 1
            ))
        })?;
        match dim {
            None => {
                if vec.is_empty() {
                    return Err(Error::Parse(format!(
                        "{} line {}: token without values",
                        path.display(),
                        lineno + 1
                    )));
                }
                dim = Some(vec.len());
            }
            Some(d) if vec.len() != d => {
                return Err(Error::Parse(format!(
                    "{} line {}: {} values, expected {d}",
                    path.display(),
                    lineno + 1,
                    vec.len()
                )));
            }
            _ => {}
        }
        entries.push((token, vec));
    }
    if entries.is_empty() {
        return Err(Error::Parse(format!(
            "{}: no embedding rows",
            path.display()
        )));
    }
    PretrainedEmbeddings::from_entries(entries)
}

/// W minimizing sum over shared tokens of |W v_pre - e|^2, with a small
/// ridge term for rank-deficient shared sets.
#[derive(Debug, Clone)]
pub struct ExpansionMap {
    /// (d_e, d_pre), row-major.
    pub w: Vec<f64>,
    pub d_e: usize,
    pub d_pre: usize,
    /// Frobenius norm of the training error.
    pub residual: f64,
    pub shared_tokens: usize,
}

impl ExpansionMap {
    pub fn apply(&self, v_pre: &[f64]) -> Vec<f64> {
        assert_eq!(v_pre.len(), self.d_pre, "pretrained dimension");
        (0..self.d_e)
            .map(|r| {
                self.w[r * self.d_pre..(r + 1) * self.d_pre]
                    .iter()
                    .zip(v_pre)
                    .map(|(&w, &v)| w * v)
                    .sum()
            })
            .collect()
    }
}

/// Ridge scale: lambda = 1e-6 * mean diagonal of the Gram matrix.
const RIDGE_FRACTION: f64 = 1e-6;

/// Fits the map over tokens present in both the vocabulary (specials
/// excluded) and the pretrained table, by damped normal equations.
pub fn fit_linear_map(
    pre: &PretrainedEmbeddings,
    embedding: &Tensor<f32>,
    vocab: &Vocabulary,
) -> Result<ExpansionMap> {
    let d_e = embedding.dims()[1];
    let d_pre = pre.dim();
    let mut shared: Vec<(usize, &[f64])> = Vec::new();
    for (id, token) in vocab.tokens().iter().enumerate() {
        if id == PAD || id == UNK || id == SOS {
            continue;
        }
        if let Some(v) = pre.get(token) {
            shared.push((id, v));
        }
    }
    if shared.is_empty() {
        return Err(Error::Coverage(
            "no vocabulary token appears in the pretrained table".into(),
        ));
    }
    // gram = sum v v^T, cross = sum e v^T
    let mut gram = vec![0.0f64; d_pre * d_pre];
    let mut cross = vec![0.0f64; d_e * d_pre];
    for &(id, v) in &shared {
        for i in 0..d_pre {
            for j in 0..d_pre {
                gram[i * d_pre + j] += v[i] * v[j];
            }
        }
        let e_row = &embedding.data()[id * d_e..(id + 1) * d_e];
        for r in 0..d_e {
            let ev = e_row[r] as f64;
            for j in 0..d_pre {
                cross[r * d_pre + j] += ev * v[j];
            }
        }
    }
    let trace: f64 = (0..d_pre).map(|i| gram[i * d_pre + i]).sum();
    let lambda = RIDGE_FRACTION * (trace / d_pre as f64).max(f64::MIN_POSITIVE);
    for i in 0..d_pre {
        gram[i * d_pre + i] += lambda;
    }
    let chol = cholesky(&gram, d_pre)?;
    let mut w = vec![0.0f64; d_e * d_pre];
    for r in 0..d_e {
        let rhs = &cross[r * d_pre..(r + 1) * d_pre];
        let x = chol_solve(&chol, d_pre, rhs);
        w[r * d_pre..(r + 1) * d_pre].copy_from_slice(&x);
    }
    let map = ExpansionMap {
        w,
        d_e,
        d_pre,
        residual: 0.0,
        shared_tokens: shared.len(),
    };
    let mut err_sq = 0.0f64;
    for &(id, v) in &shared {
        let mapped = map.apply(v);
        let e_row = &embedding.data()[id * d_e..(id + 1) * d_e];
        for (m, &e) in mapped.iter().zip(e_row) {
            let d = m - e as f64;
            err_sq += d * d;
        }
    }
    Ok(ExpansionMap {
        residual: err_sq.sqrt(),
        ..map
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix, row-major.
fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numeric(
                        "gram matrix not positive definite even with ridge damping".into(),
                    ));
                }
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    // forward: L y = b
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    // back: L^T x = y
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Gives every pretrained token missing from the vocabulary a new id and
/// the mapped vector W v_pre. Existing rows are untouched; returns the
/// number of tokens added.
pub fn expand_vocabulary(
    map: &ExpansionMap,
    pre: &PretrainedEmbeddings,
    vocab: &mut Vocabulary,
    model: &mut Model<f32>,
) -> Result<usize> {
    let d_e = model.embedding.dims()[1];
    if map.d_e != d_e {
        return Err(Error::Shape(format!(
            "map produces {}-dim vectors, embedding holds {d_e}",
            map.d_e
        )));
    }
    let mut new_rows: Vec<f32> = Vec::new();
    let mut added = 0usize;
    for (token, v) in pre.iter() {
        if vocab.id(token).is_some() {
            continue;
        }
        vocab.append(token.to_string())?;
        new_rows.extend(map.apply(v).iter().map(|&x| x as f32));
        added += 1;
    }
    if added == 0 {
        return Ok(0);
    }
    let old = model.embedding.data();
    let mut data = Vec::with_capacity(old.len() + new_rows.len());
    data.extend_from_slice(old);
    data.extend_from_slice(&new_rows);
    let rows = model.embedding.dims()[0] + added;
    model.embedding = Tensor::from_vec(&[rows, d_e], data)?;
    model.embedding.check_finite("expanded embedding")?;
    model.config.vocab_size = rows;
    Ok(added)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_file(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn load_parses_header_rows_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "vecs.txt", "red 1 0 0\nblue 0 0 1\n");
        let pre = load_pretrained_text(&p).unwrap();
        assert_eq!(pre.len(), 2);
        assert_eq!(pre.dim(), 3);
        assert_eq!(pre.get("blue"), Some(&[0.0, 0.0, 1.0][..]));

        let p = write_file(&dir, "headed.txt", "2 3\nred 1 0 0\nblue 0 0 1\n");
        let pre = load_pretrained_text(&p).unwrap();
        assert_eq!(pre.len(), 2);

        let p = write_file(&dir, "dup.txt", "red 1 0\nred 9 9\n");
        let pre = load_pretrained_text(&p).unwrap();
        assert_eq!(pre.get("red"), Some(&[1.0, 0.0][..]));
    }

    #[test]
    fn ragged_row_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "bad.txt", "red 1 0 0\nblue 0 1\n");
        let err = load_pretrained_text(&p).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    fn toy_model(vocab: &Vocabulary, d_e: usize, seed: u64) -> Model<f32> {
        let cfg = TrainConfig::parse(&format!(
            "d_e={d_e}\nd_h_dir=2\nn=2\nchannels=3,3\nmax_src_len=4\n"
        ))
        .unwrap()
        .model_config(vocab.len());
        Model::init(cfg, seed).unwrap()
    }

    #[test]
    fn scalar_least_squares_recovers_the_slope() {
        let vocab =
            Vocabulary::from_tokens(["one", "two"].map(str::to_string)).unwrap();
        let mut model = toy_model(&vocab, 1, 1);
        // learnt vectors 2 and 4 for pretrained 1 and 2
        let id1 = vocab.id("one").unwrap();
        let id2 = vocab.id("two").unwrap();
        model.embedding.data_mut()[id1] = 2.0;
        model.embedding.data_mut()[id2] = 4.0;
        let pre = PretrainedEmbeddings::from_entries(vec![
            ("one".into(), vec![1.0]),
            ("two".into(), vec![2.0]),
        ])
        .unwrap();
        let map = fit_linear_map(&pre, &model.embedding, &vocab).unwrap();
        assert!((map.w[0] - 2.0).abs() < 1e-4, "w = {}", map.w[0]);
        assert!(map.residual < 1e-4);
    }

    #[test]
    fn identity_recovery_when_pretrained_equals_learnt() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let tokens: Vec<String> = (0..d).map(|i| format!("t{i}")).collect();
        let vocab = Vocabulary::from_tokens(tokens.clone()).unwrap();
        let mut model = toy_model(&vocab, d, 3);
        // well-conditioned square set: identity plus small noise
        let mut entries = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            let id = vocab.id(tok).unwrap();
            let mut v = vec![0.0f64; d];
            for (j, vj) in v.iter_mut().enumerate() {
                *vj = if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.05..0.05);
                model.embedding.data_mut()[id * d + j] = *vj as f32;
            }
            entries.push((tok.clone(), v));
        }
        let pre = PretrainedEmbeddings::from_entries(entries).unwrap();
        let map = fit_linear_map(&pre, &model.embedding, &vocab).unwrap();
        for r in 0..d {
            for c in 0..d {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!(
                    (map.w[r * d + c] - want).abs() < 1e-4,
                    "W[{r},{c}] = {}",
                    map.w[r * d + c]
                );
            }
        }
    }

    /// Gauss-Jordan solve (with partial pivoting) of the same damped normal
    /// equations; an independent route through the linear algebra.
    fn pinv_oracle(shared: &[(Vec<f64>, Vec<f64>)], d_pre: usize, d_e: usize) -> Vec<f64> {
        let mut gram = vec![0.0f64; d_pre * d_pre];
        let mut cross = vec![0.0f64; d_e * d_pre];
        for (v, e) in shared {
            for i in 0..d_pre {
                for j in 0..d_pre {
                    gram[i * d_pre + j] += v[i] * v[j];
                }
            }
            for r in 0..d_e {
                for j in 0..d_pre {
                    cross[r * d_pre + j] += e[r] * v[j];
                }
            }
        }
        let trace: f64 = (0..d_pre).map(|i| gram[i * d_pre + i]).sum();
        for i in 0..d_pre {
            gram[i * d_pre + i] += RIDGE_FRACTION * trace / d_pre as f64;
        }
        // augment and eliminate with partial pivoting
        let n = d_pre;
        let mut w = vec![0.0f64; d_e * d_pre];
        for r in 0..d_e {
            let mut a: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut row: Vec<f64> = gram[i * n..(i + 1) * n].to_vec();
                    row.push(cross[r * d_pre + i]);
                    row
                })
                .collect();
            for col in 0..n {
                let piv = (col..n)
                    .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
                    .unwrap();
                a.swap(col, piv);
                let p = a[col][col];
                for j in col..=n {
                    a[col][j] /= p;
                }
                for i in 0..n {
                    if i != col {
                        let f = a[i][col];
                        for j in col..=n {
                            a[i][j] -= f * a[col][j];
                        }
                    }
                }
            }
            for i in 0..n {
                w[r * d_pre + i] = a[i][n];
            }
        }
        w
    }

    #[test]
    fn fit_matches_pseudo_inverse_oracle_on_overdetermined_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let (d_pre, d_e, count) = (3usize, 2usize, 12usize);
            let tokens: Vec<String> = (0..count).map(|i| format!("w{i}")).collect();
            let vocab = Vocabulary::from_tokens(tokens.clone()).unwrap();
            let mut model = toy_model(&vocab, d_e, 5);
            let mut entries = Vec::new();
            let mut shared = Vec::new();
            for tok in &tokens {
                let id = vocab.id(tok).unwrap();
                let v: Vec<f64> = (0..d_pre).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut e = vec![0.0f64; d_e];
                for (j, ej) in e.iter_mut().enumerate() {
                    *ej = rng.gen_range(-1.0..1.0);
                    model.embedding.data_mut()[id * d_e + j] = *ej as f32;
                    // keep the f64 copy equal to what the fit sees in f32
                    *ej = model.embedding.data()[id * d_e + j] as f64;
                }
                entries.push((tok.clone(), v.clone()));
                shared.push((v, e));
            }
            let pre = PretrainedEmbeddings::from_entries(entries).unwrap();
            let map = fit_linear_map(&pre, &model.embedding, &vocab).unwrap();
            let oracle = pinv_oracle(&shared, d_pre, d_e);
            for (a, b) in map.w.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-6, "fit {a} vs oracle {b}");
            }
            // residual matches an independent recomputation
            let mut err_sq = 0.0;
            for (v, e) in &shared {
                let m = map.apply(v);
                for (mi, ei) in m.iter().zip(e) {
                    err_sq += (mi - ei) * (mi - ei);
                }
            }
            let rel = (map.residual.powi(2) - err_sq).abs() / err_sq.max(1e-12);
            assert!(rel < 1e-6, "residual^2 {} vs {err_sq}", map.residual.powi(2));
        }
    }

    #[test]
    fn zero_shared_tokens_is_a_coverage_error() {
        let vocab = Vocabulary::from_tokens(["alpha"].map(str::to_string)).unwrap();
        let model = toy_model(&vocab, 2, 6);
        let pre = PretrainedEmbeddings::from_entries(vec![("beta".into(), vec![1.0, 0.0])])
            .unwrap();
        assert!(matches!(
            fit_linear_map(&pre, &model.embedding, &vocab),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn expansion_appends_without_touching_existing_rows() {
        let mut vocab =
            Vocabulary::from_tokens(["sun", "moon"].map(str::to_string)).unwrap();
        let mut model = toy_model(&vocab, 2, 7);
        let before = model.embedding.data().to_vec();
        let pre = PretrainedEmbeddings::from_entries(vec![
            ("sun".into(), vec![1.0, 0.0]),
            ("moon".into(), vec![0.0, 1.0]),
            ("star".into(), vec![0.5, -0.5]),
            ("zero".into(), vec![0.0, 0.0]),
        ])
        .unwrap();
        let map = fit_linear_map(&pre, &model.embedding, &vocab).unwrap();
        let added = expand_vocabulary(&map, &pre, &mut vocab, &mut model).unwrap();
        assert_eq!(added, 2);
        assert_eq!(model.embedding.dims()[0], 7);
        assert_eq!(model.config.vocab_size, 7);
        assert_eq!(&model.embedding.data()[..before.len()], &before[..]);
        // zero pretrained vector maps to the zero vector
        let zid = vocab.id("zero").unwrap();
        assert_eq!(&model.embedding.data()[zid * 2..zid * 2 + 2], &[0.0, 0.0]);
        // linearity of the synthesized vectors
        let star = map.apply(&[0.5, -0.5]);
        let scaled = map.apply(&[1.5, -1.5]);
        for (a, b) in star.iter().zip(&scaled) {
            assert!((3.0 * a - b).abs() < 1e-9);
        }
        // running it again adds nothing
        let again = expand_vocabulary(&map, &pre, &mut vocab, &mut model).unwrap();
        assert_eq!(again, 0);
    }
}
