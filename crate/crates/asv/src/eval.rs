//! Desk-scale transfer evaluation over a frozen encoder: file encoding,
//! cosine similarity with rank correlations, a multinomial logistic probe,
//! and nearest-neighbor lookup.
//!
//! Sentences are encoded one at a time, so results never depend on how an
//! input file is split into batches.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Element;

/// Sentence vector for one line of text.
pub fn encode_sentence<T: Element>(
    model: &Model<T>,
    vocab: &Vocabulary,
    line: &str,
) -> Result<Vec<T>> {
    let tokens = tokenize(line);
    if tokens.is_empty() {
        return Err(Error::EmptySentence(format!("{line:?}")));
    }
    let ids = vocab.encode(&tokens);
    let z = model.encode(&[ids])?;
    Ok(z.data().to_vec())
}

/// One vector per line, in file order.
pub fn encode_file<T: Element>(
    model: &Model<T>,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<Vec<Vec<T>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let z = encode_sentence(model, vocab, line).map_err(|e| match e {
            Error::EmptySentence(_) => Error::EmptySentence(format!(
                "{} line {}",
                path.display(),
                lineno + 1
            )),
            other => other,
        })?;
        out.push(z);
    }
    if out.is_empty() {
        return Err(Error::EmptySentence(format!(
            "{}: no sentences",
            path.display()
        )));
    }
    Ok(out)
}

/// u . v / (|u| |v|), in f64.
pub fn cosine<T: Element>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine over {} vs {} entries",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric(
            "cosine undefined for the zero vector".into(),
        ));
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Statistics(format!(
            "need at least two paired samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Statistics("zero variance in correlation".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Average ranks; ties share the mean of the rank block.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut r = vec![0.0f64; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            r[idx] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// (Pearson r, Spearman rho) between encoded-pair cosines and gold scores.
/// File lines are `sent1<TAB>sent2<TAB>score`.
pub fn eval_similarity<T: Element>(
    model: &Model<T>,
    vocab: &Vocabulary,
    pairs_path: &Path,
) -> Result<(f64, f64)> {
    let text = fs::read_to_string(pairs_path)
        .map_err(|e| Error::io(pairs_path.display().to_string(), e))?;
    let mut cosines = Vec::new();
    let mut gold = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!(
                "{} line {}: expected sent1<TAB>sent2<TAB>score",
                pairs_path.display(),
                lineno + 1
            )));
        }
        let score: f64 = parts[2].trim().parse().map_err(|_| {
            Error::Parse(format!(
                "{} line {}: bad score {:?}",
                pairs_path.display(),
                lineno + 1,
                parts[2]
            ))
        })?;
        let a = encode_sentence(model, vocab, parts[0])?;
        let b = encode_sentence(model, vocab, parts[1])?;
        cosines.push(cosine(&a, &b)?);
        gold.push(score);
    }
    if cosines.len() < 2 {
        return Err(Error::Statistics(
            "similarity evaluation needs at least two pairs".into(),
        ));
    }
    Ok((pearson(&cosines, &gold)?, spearman(&cosines, &gold)?))
}

/// Labeled sentences: `label<TAB>sentence` per line.
pub fn read_labeled(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((label, sent)) = line.split_once('\t') else {
            return Err(Error::Parse(format!(
                "{} line {}: expected label<TAB>sentence",
                path.display(),
                lineno + 1
            )));
        };
        out.push((label.to_string(), sent.to_string()));
    }
    if out.is_empty() {
        return Err(Error::Parse(format!(
            "{}: no labeled sentences",
            path.display()
        )));
    }
    Ok(out)
}

/// Multinomial logistic regression on frozen features: full-batch gradient
/// descent with backtracking, run to gradient norm < 1e-6 or 10k
/// iterations. Deterministic (zero initialization, fixed order).
pub struct LogisticProbe {
    /// (classes, dim + 1) row-major; last column is the bias.
    w: Vec<f64>,
    classes: usize,
    dim: usize,
}

pub const PROBE_GRAD_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 10_000;

impl LogisticProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, l2: f64) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::Shape(format!(
                "{} features for {} labels",
                features.len(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Label("need at least two classes".into()));
        }
        let dim = features[0].len();
        let n = features.len();
        let cols = dim + 1;
        let mut w = vec![0.0f64; classes * cols];
        let loss_grad = |w: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut loss = 0.0f64;
            let mut grad = vec![0.0f64; w.len()];
            let mut logits = vec![0.0f64; classes];
            let mut probs = vec![0.0f64; classes];
            for (x, &y) in features.iter().zip(labels) {
                for (c, l) in logits.iter_mut().enumerate() {
                    let row = &w[c * cols..(c + 1) * cols];
                    *l = row[dim]
                        + row[..dim].iter().zip(x).map(|(&wi, &xi)| wi * xi).sum::<f64>();
                }
                let (_, ln_sum) = crate::tape::softmax_row(&logits, &mut probs);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                loss += ln_sum - (logits[y] - max);
                if want_grad {
                    for c in 0..classes {
                        let delta = probs[c] - if c == y { 1.0 } else { 0.0 };
                        let g = &mut grad[c * cols..(c + 1) * cols];
                        for (gi, &xi) in g[..dim].iter_mut().zip(x) {
                            *gi += delta * xi;
                        }
                        g[dim] += delta;
                    }
                }
            }
            loss /= n as f64;
            let mut reg = 0.0;
            for c in 0..classes {
                for j in 0..dim {
                    let wij = w[c * cols + j];
                    reg += wij * wij;
                    if want_grad {
                        grad[c * cols + j] = grad[c * cols + j] / n as f64 + 2.0 * l2 * wij;
                    }
                }
                if want_grad {
                    grad[c * cols + dim] /= n as f64;
                }
            }
            (loss + l2 * reg, grad)
        };
        let mut step = 1.0f64;
        for _ in 0..PROBE_MAX_ITERS {
            let (loss, grad) = loss_grad(&w, true);
            let gn2: f64 = grad.iter().map(|g| g * g).sum();
            if gn2.sqrt() < PROBE_GRAD_TOL {
                break;
            }
            // Armijo backtracking from a slightly optimistic step
            step = (step * 2.0).min(1e3);
            loop {
                let trial: Vec<f64> = w
                    .iter()
                    .zip(&grad)
                    .map(|(&wi, &gi)| wi - step * gi)
                    .collect();
                let (trial_loss, _) = loss_grad(&trial, false);
                if trial_loss <= loss - 1e-4 * step * gn2 || step < 1e-12 {
                    w = trial;
                    break;
                }
                step /= 2.0;
            }
        }
        Ok(LogisticProbe { w, classes, dim })
    }

    /// Argmax class, ties to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let cols = self.dim + 1;
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..self.classes {
            let row = &self.w[c * cols..(c + 1) * cols];
            let v = row[self.dim]
                + row[..self.dim].iter().zip(x).map(|(&w, &xi)| w * xi).sum::<f64>();
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best
    }
}

/// Accuracy of a logistic probe trained on frozen representations of
/// `train_path` and scored on `test_path`. Labels unseen in training are
/// an error.
pub fn eval_classify<T: Element>(
    model: &Model<T>,
    vocab: &Vocabulary,
    train_path: &Path,
    test_path: &Path,
    l2: f64,
) -> Result<f64> {
    let train = read_labeled(train_path)?;
    let test = read_labeled(test_path)?;
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut train_labels = Vec::with_capacity(train.len());
    for (label, _) in &train {
        let next = class_ids.len();
        let id = *class_ids.entry(label.clone()).or_insert(next);
        train_labels.push(id);
    }
    if class_ids.len() < 2 {
        return Err(Error::Label(
            "training data must contain at least two classes".into(),
        ));
    }
    let featurize = |items: &[(String, String)]| -> Result<Vec<Vec<f64>>> {
        items
            .iter()
            .map(|(_, sent)| {
                Ok(encode_sentence(model, vocab, sent)?
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .collect())
            })
            .collect()
    };
    let train_x = featurize(&train)?;
    let test_x = featurize(&test)?;
    let probe = LogisticProbe::fit(&train_x, &train_labels, class_ids.len(), l2)?;
    let mut correct = 0usize;
    for ((label, _), x) in test.iter().zip(&test_x) {
        let Some(&want) = class_ids.get(label) else {
            return Err(Error::Label(format!(
                "test label {label:?} never appeared in training"
            )));
        };
        if probe.predict(x) == want {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Top-k corpus lines by cosine to the query, descending, ties broken by
/// line number. Returns (line index, sentence, cosine).
pub fn nearest_neighbors<T: Element>(
    model: &Model<T>,
    vocab: &Vocabulary,
    query: &str,
    corpus_path: &Path,
    k: usize,
) -> Result<Vec<(usize, String, f64)>> {
    let text = fs::read_to_string(corpus_path)
        .map_err(|e| Error::io(corpus_path.display().to_string(), e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::EmptySentence(format!(
            "{}: empty corpus",
            corpus_path.display()
        )));
    }
    if k == 0 || k > lines.len() {
        return Err(Error::Config(format!(
            "k = {k} must be in 1..={}",
            lines.len()
        )));
    }
    let q = encode_sentence(model, vocab, query)?;
    let mut scored: Vec<(usize, String, f64)> = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let z = encode_sentence(model, vocab, line)?;
        scored.push((i, line.to_string(), cosine(&q, &z)?));
    }
    scored.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite cosine").then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use std::fs;

    fn toy_model() -> (Model<f32>, Vocabulary) {
        let vocab = Vocabulary::build(
            "the cat dog bird sat ran flew home".split_whitespace().map(str::to_string),
            20,
        )
        .unwrap();
        let cfg = TrainConfig::parse("d_e=4\nd_h_dir=3\nn=2\nchannels=5,5\nmax_src_len=8\n")
            .unwrap()
            .model_config(vocab.len());
        (Model::init(cfg, 13).unwrap(), vocab)
    }

    #[test]
    #[allow(clippy::approx_constant)] // 0.7071 is the documented expectation
    fn cosine_basics() {
        assert!((cosine(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0f64, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12);
        let c = cosine(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
        assert!((c - 0.7071).abs() < 1e-4);
        assert!(cosine(&[0.0f64, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn pearson_spearman_closed_forms() {
        // perfectly linear
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-10);
        assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-10);
        // n = 4 case against the sum formula evaluated by hand:
        // x = [1,2,3,4], y = [1,3,2,4]: r = 0.8
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-10);
        // monotone but nonlinear: rho = 1, r < 1
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 10.0, 100.0, 1000.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-10);
        assert!(pearson(&x, &y).unwrap() < 1.0);
        // ties get average ranks: [1, 1, 2] -> [1.5, 1.5, 3]
        assert_eq!(ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        // degenerate inputs
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn encode_file_is_deterministic_and_flags_empty_lines() {
        let (model, vocab) = toy_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sents.txt");
        fs::write(&path, "the cat sat\nthe dog ran\nthe cat sat\n").unwrap();
        let vecs = encode_file(&model, &vocab, &path).unwrap();
        assert_eq!(vecs.len(), 3);
        assert_eq!(vecs[0], vecs[2], "duplicate lines encode identically");
        assert_eq!(vecs[0].len(), model.config.rep_dim());

        // splitting the file does not change the vectors
        let p1 = dir.path().join("a.txt");
        let p2 = dir.path().join("b.txt");
        fs::write(&p1, "the cat sat\n").unwrap();
        fs::write(&p2, "the dog ran\nthe cat sat\n").unwrap();
        let mut combined = encode_file(&model, &vocab, &p1).unwrap();
        combined.extend(encode_file(&model, &vocab, &p2).unwrap());
        assert_eq!(vecs, combined);

        let bad = dir.path().join("bad.txt");
        fs::write(&bad, "the cat\n\nthe dog\n").unwrap();
        let err = encode_file(&model, &vocab, &bad).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn similarity_perfect_and_inverted_gold() {
        let (model, vocab) = toy_model();
        let dir = tempfile::tempdir().unwrap();
        let sents = [
            ("the cat sat", "the cat sat home"),
            ("the dog ran", "bird flew home"),
            ("the bird flew", "the dog sat"),
            ("cat dog bird", "home ran flew"),
        ];
        let cosines: Vec<f64> = sents
            .iter()
            .map(|(a, b)| {
                cosine(
                    &encode_sentence(&model, &vocab, a).unwrap(),
                    &encode_sentence(&model, &vocab, b).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let write_pairs = |name: &str, scores: &[f64]| {
            let path = dir.path().join(name);
            let mut text = String::new();
            for ((a, b), s) in sents.iter().zip(scores) {
                text.push_str(&format!("{a}\t{b}\t{s}\n"));
            }
            fs::write(&path, text).unwrap();
            path
        };
        let exact = write_pairs("exact.tsv", &cosines);
        let (r, rho) = eval_similarity(&model, &vocab, &exact).unwrap();
        assert!((r - 1.0).abs() < 1e-10);
        assert!((rho - 1.0).abs() < 1e-10);

        let negated: Vec<f64> = cosines.iter().map(|c| -c).collect();
        let inv = write_pairs("inv.tsv", &negated);
        let (r, _) = eval_similarity(&model, &vocab, &inv).unwrap();
        assert!((r + 1.0).abs() < 1e-10);

        let one = dir.path().join("one.tsv");
        fs::write(&one, "the cat\tthe dog\t1.0\n").unwrap();
        assert!(matches!(
            eval_similarity(&model, &vocab, &one),
            Err(Error::Statistics(_))
        ));
    }

    #[test]
    fn probe_separates_separable_features() {
        // two well-separated clusters
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let off = i as f64 * 0.01;
            features.push(vec![1.0 + off, 0.0]);
            labels.push(0);
            features.push(vec![-1.0 - off, 0.1]);
            labels.push(1);
        }
        let probe = LogisticProbe::fit(&features, &labels, 2, 1e-4).unwrap();
        for (x, &y) in features.iter().zip(&labels) {
            assert_eq!(probe.predict(x), y);
        }
    }

    #[test]
    fn probe_on_shuffled_labels_sits_at_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        // random features, random balanced labels: nothing to learn
        let features: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let probe = LogisticProbe::fit(&features, &labels, 2, 1e-3).unwrap();
        let test: Vec<(Vec<f64>, usize)> = (0..400)
            .map(|i| ((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), i % 2))
            .collect();
        let acc = test
            .iter()
            .filter(|(x, y)| probe.predict(x) == *y)
            .count() as f64
            / test.len() as f64;
        assert!((acc - 0.5).abs() < 0.1, "chance-level accuracy, got {acc}");
    }

    #[test]
    fn probe_accuracy_is_invariant_to_training_order() {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..12 {
            let t = i as f64 / 3.0;
            features.push(vec![t.sin(), t.cos(), 0.3 * t]);
            labels.push(if i % 3 == 0 { 0 } else { 1 });
        }
        let acc = |fs: &[Vec<f64>], ls: &[usize]| {
            let probe = LogisticProbe::fit(fs, ls, 2, 1e-3).unwrap();
            fs.iter()
                .zip(ls)
                .filter(|(x, &y)| probe.predict(x) == y)
                .count()
        };
        let base = acc(&features, &labels);
        let mut rev_f = features.clone();
        rev_f.reverse();
        let mut rev_l = labels.clone();
        rev_l.reverse();
        assert_eq!(base, acc(&rev_f, &rev_l));
    }

    #[test]
    fn classify_majority_and_unseen_labels() {
        let (model, vocab) = toy_model();
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.tsv");
        let test = dir.path().join("test.tsv");
        // identical sentences with conflicting labels: the probe must fall
        // back to predicting the majority class
        fs::write(
            &train,
            "yes\tthe cat sat\nyes\tthe cat sat\nyes\tthe cat sat\nno\tthe cat sat\n",
        )
        .unwrap();
        fs::write(&test, "no\tthe cat sat\nyes\tthe cat sat\nyes\tthe cat sat\n").unwrap();
        let acc = eval_classify(&model, &vocab, &train, &test, 1e-3).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12, "majority share, got {acc}");

        fs::write(&test, "maybe\tthe cat sat\n").unwrap();
        assert!(matches!(
            eval_classify(&model, &vocab, &train, &test, 1e-3),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn neighbors_rank_self_first() {
        let (model, vocab) = toy_model();
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        fs::write(&corpus, "the cat sat\nthe dog ran\nbird flew home\n").unwrap();
        let hits = nearest_neighbors(&model, &vocab, "the dog ran", &corpus, 3).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].1, "the dog ran");
        assert!((hits[0].2 - 1.0).abs() < 1e-6);
        assert!(hits[0].2 >= hits[1].2 && hits[1].2 >= hits[2].2);
        // k = corpus size returns a permutation of the lines
        let mut lines: Vec<String> = hits.into_iter().map(|h| h.1).collect();
        lines.sort();
        assert_eq!(lines, vec!["bird flew home", "the cat sat", "the dog ran"]);

        assert!(nearest_neighbors(&model, &vocab, "the cat", &corpus, 4).is_err());
        let empty = dir.path().join("empty.txt");
        fs::write(&empty, "").unwrap();
        assert!(nearest_neighbors(&model, &vocab, "the cat", &empty, 1).is_err());
    }
}
