//! Corpus-level caption metrics: BLEU-4, ROUGE-L and CIDEr-D.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::tokenize;

const MAX_N: usize = 4;
const ROUGE_BETA: f64 = 1.2;
const CIDER_SIGMA: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalItem {
    pub fn new<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Data(
                "every item needs at least one reference".into(),
            ));
        }
        Ok(Self {
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r.as_ref())).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricBundle {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

impl MetricBundle {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "bleu4,{:.4}", self.bleu4);
        let _ = writeln!(s, "rouge_l,{:.4}", self.rouge_l);
        let _ = writeln!(s, "cider_d,{:.4}", self.cider_d);
        s
    }
}

fn check(corpus: &[EvalItem]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Data("empty evaluation corpus".into()));
    }
    if corpus.iter().any(|i| i.references.is_empty()) {
        return Err(Error::Data(
            "every item needs at least one reference".into(),
        ));
    }
    Ok(())
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(words: &[String], n: usize) -> Counts<'_> {
    let mut c = Counts::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *c.entry(g).or_default() += 1;
        }
    }
    c
}

pub fn bleu4(corpus: &[EvalItem]) -> Result<f64> {
    check(corpus)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for item in corpus {
        let c = item.candidate.len();
        cand_len += c;
        ref_len += item
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("non-empty references");
        for n in 1..=MAX_N {
            let cand = ngrams(&item.candidate, n);
            let mut max_ref = Counts::new();
            for r in &item.references {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cand {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

fn rouge_item(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(corpus: &[EvalItem]) -> Result<f64> {
    check(corpus)?;
    let total: f64 = corpus
        .iter()
        .map(|i| {
            i.references
                .iter()
                .map(|r| rouge_item(&i.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / corpus.len() as f64)
}

/// Weighted n-gram vector of one sentence and its norm.
struct Weighted<'a> {
    vec: HashMap<&'a [String], f64>,
    norm: f64,
}

fn weigh<'a>(words: &'a [String], n: usize, idf: &dyn Fn(&[String]) -> f64) -> Weighted<'a> {
    let vec: HashMap<&[String], f64> = ngrams(words, n)
        .into_iter()
        .map(|(g, tf)| (g, tf as f64 * idf(g)))
        .collect();
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    Weighted { vec, norm }
}

fn cider_sim(h: &Weighted, r: &Weighted, len_h: usize, len_r: usize) -> f64 {
    let mut val = 0.0;
    for (g, &vh) in &h.vec {
        if let Some(&vr) = r.vec.get(g) {
            val += vh.min(vr) * vr;
        }
    }
    if h.norm != 0.0 && r.norm != 0.0 {
        val /= h.norm * r.norm;
    }
    let delta = len_h as f64 - len_r as f64;
    val * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp()
}

/// CIDEr-D with document frequencies taken over this corpus's reference
/// sets. A candidate/reference pair whose n-grams all occur in every item
/// has zero TF-IDF vectors on both sides; such pairs are compared on raw
/// term frequencies instead, so identical captions always score 10.
pub fn cider_d(corpus: &[EvalItem]) -> Result<f64> {
    check(corpus)?;
    let docs = corpus.len() as f64;
    let mut per_item = vec![0.0; corpus.len()];
    for n in 1..=MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for item in corpus {
            let mut seen: HashMap<&[String], ()> = HashMap::new();
            for r in &item.references {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_default() += 1;
            }
        }
        // N-grams absent from every reference count as rare as the rarest
        // reference n-gram, which keeps scores invariant to repeating the corpus.
        let rarest = df.values().copied().min().unwrap_or(1);
        let idf = |g: &[String]| docs.ln() - (df.get(g).copied().unwrap_or(rarest) as f64).ln();
        let flat = |_: &[String]| 1.0;
        for (score, item) in per_item.iter_mut().zip(corpus) {
            let h = weigh(&item.candidate, n, &idf);
            let sum: f64 = item
                .references
                .iter()
                .map(|r| {
                    let rw = weigh(r, n, &idf);
                    let (lh, lr) = (item.candidate.len(), r.len());
                    if h.norm == 0.0 && rw.norm == 0.0 {
                        cider_sim(
                            &weigh(&item.candidate, n, &flat),
                            &weigh(r, n, &flat),
                            lh,
                            lr,
                        )
                    } else {
                        cider_sim(&h, &rw, lh, lr)
                    }
                })
                .sum();
            *score += sum / item.references.len() as f64;
        }
    }
    let total: f64 = per_item.iter().map(|s| s * 10.0 / MAX_N as f64).sum();
    Ok(total / corpus.len() as f64)
}

pub fn evaluate(corpus: &[EvalItem]) -> Result<MetricBundle> {
    Ok(MetricBundle {
        bleu4: bleu4(corpus)?,
        rouge_l: rouge_l(corpus)?,
        cider_d: cider_d(corpus)?,
    })
}

/// Pairs each prediction with its tab-separated reference group.
pub fn corpus_from_lines<P: AsRef<str>, R: AsRef<str>>(
    predictions: &[P],
    references: &[R],
) -> Result<Vec<EvalItem>> {
    if predictions.len() != references.len() {
        return Err(Error::Data(format!(
            "{} prediction lines but {} reference lines",
            predictions.len(),
            references.len()
        )));
    }
    predictions
        .iter()
        .zip(references)
        .enumerate()
        .map(|(i, (p, r))| {
            let refs: Vec<&str> = r
                .as_ref()
                .split('\t')
                .filter(|s| !s.trim().is_empty())
                .collect();
            if refs.is_empty() {
                return Err(Error::Data(format!(
                    "reference line {}: no reference",
                    i + 1
                )));
            }
            EvalItem::new(p.as_ref(), &refs)
        })
        .collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn run_eval(predictions: &Path, references: &Path) -> Result<MetricBundle> {
    let corpus = corpus_from_lines(&read_lines(predictions)?, &read_lines(references)?)?;
    evaluate(&corpus)
}

/// Validation CIDEr-D of generated captions against single references.
pub fn cider_against<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[R],
) -> Result<f64> {
    let corpus = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| EvalItem::new(c.as_ref(), &[r.as_ref()]))
        .collect::<Result<Vec<_>>>()?;
    cider_d(&corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(c: &str, r: &[&str]) -> EvalItem {
        EvalItem::new(c, r).unwrap()
    }

    #[test]
    fn bleu_examples() {
        let same = vec![item(
            "a red square moves left",
            &["a red square moves left"],
        )];
        assert!((bleu4(&same).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&[item("x y z w", &["a b c d"])]).unwrap(), 0.0);
        let short = bleu4(&[item("a b c d", &["a b c d e"])]).unwrap();
        assert!((short - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
        assert!(bleu4(&[]).is_err());
    }

    #[test]
    fn bleu_closest_reference_ties_to_shorter() {
        // Candidate length 4; references of length 3 and 5 tie, so r = 3 and
        // no brevity penalty applies.
        let s = bleu4(&[item("a b c d", &["a b c", "a b c d e"])]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_l(&[item("a b c", &["a b c"])]).unwrap() - 1.0).abs() < 1e-12);
        assert!((rouge_l(&[item("a b c", &["a c d"])]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[item("", &["a b"])]).unwrap(), 0.0);
        assert_eq!(lcs(&tokenize("a b c b d a b"), &tokenize("b d c a b a")), 4);
    }

    #[test]
    fn cider_examples() {
        let single = vec![item(
            "a red square moves left",
            &["a red square moves left"],
        )];
        assert!((cider_d(&single).unwrap() - 10.0).abs() < 1e-12);
        let miss = vec![item("x y", &["a b c"]), item("z w", &["d e f"])];
        assert_eq!(cider_d(&miss).unwrap(), 0.0);
        assert_eq!(cider_d(&[item("", &["a b"])]).unwrap(), 0.0);
    }

    /// Direct evaluation of the CIDEr-D formula for a two-item corpus with
    /// single references.
    #[test]
    fn cider_matches_hand_oracle() {
        let corpus = vec![item("a b", &["a b"]), item("a c", &["a d"])];
        let d2 = 2f64.ln();
        // n = 1: df(a) = 2, df(b) = df(d) = 1. Item 1: identical → 1.
        // Item 2: hyp {a:0, c:ln2}, ref {a:0, d:ln2} → 0.
        // n = 2: df(a b) = df(a d) = 1. Item 1 → 1, item 2 → 0.
        // n = 3, 4: no n-grams → 0.
        let want = (10.0 / 4.0 * 2.0 + 0.0) / 2.0;
        assert!((cider_d(&corpus).unwrap() - want).abs() < 1e-12);
        // Length penalty with mismatched lengths (3 vs 2 words).
        let corpus = vec![item("a b x", &["a b"]), item("c d", &["c d"])];
        let g = (-1.0f64 / 72.0).exp();
        // n = 1 item 1: hyp {a: ln2·1, b: ln2, x: ln2}, ref {a: ln2, b: ln2}.
        let s1 = (2.0 * d2 * d2) / ((3.0f64).sqrt() * d2 * (2.0f64).sqrt() * d2) * g;
        // n = 2 item 1: hyp {ab, bx}, ref {ab} → 1/√2.
        let s2 = 1.0 / 2f64.sqrt() * g;
        let item1 = 10.0 / 4.0 * (s1 + s2);
        let item2 = 10.0 / 4.0 * 2.0;
        assert!((cider_d(&corpus).unwrap() - (item1 + item2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn run_eval_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.txt");
        let r = dir.path().join("r.txt");
        fs::write(&p, "a red square moves left\na blue circle moves up\n").unwrap();
        fs::write(
            &r,
            "a red square moves left\tthe red square goes left\na blue circle moves up\n",
        )
        .unwrap();
        let m = run_eval(&p, &r).unwrap();
        assert!(m.bleu4 > 0.0 && m.rouge_l > 0.0 && m.cider_d > 0.0);

        fs::write(&r, "a red square moves left\na blue circle moves up\n").unwrap();
        let m = run_eval(&p, &r).unwrap();
        assert_eq!(
            m.to_csv(),
            "metric,value\nbleu4,1.0000\nrouge_l,1.0000\ncider_d,10.0000\n"
        );

        fs::write(&p, "a\nb\nc\n").unwrap();
        fs::write(&r, "a\nb\nc\nd\n").unwrap();
        let err = run_eval(&p, &r).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('4'), "{err}");
        assert!(run_eval(&dir.path().join("missing"), &r).is_err());
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<EvalItem>> {
        let sent = prop::collection::vec("[a-f]", 0..7).prop_map(|w| w.join(" "));
        let refs = prop::collection::vec(
            prop::collection::vec("[a-f]", 1..7).prop_map(|w| w.join(" ")),
            1..3,
        );
        prop::collection::vec((sent, refs), 1..6).prop_map(|items| {
            items
                .into_iter()
                .map(|(c, r)| EvalItem::new(&c, &r).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn metric_ranges_and_permutation(corpus in arb_corpus()) {
            let m = evaluate(&corpus).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&m.bleu4));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&m.rouge_l));
            prop_assert!((0.0..=10.0 + 1e-9).contains(&m.cider_d));
            let mut rev = corpus.clone();
            rev.reverse();
            let r = evaluate(&rev).unwrap();
            prop_assert!((m.bleu4 - r.bleu4).abs() < 1e-12);
            prop_assert!((m.rouge_l - r.rouge_l).abs() < 1e-12);
            prop_assert!((m.cider_d - r.cider_d).abs() < 1e-9);
        }

        #[test]
        fn doubling_corpus_keeps_cider(corpus in arb_corpus()) {
            let mut doubled = corpus.clone();
            doubled.extend(corpus.iter().cloned());
            prop_assert!((cider_d(&corpus).unwrap() - cider_d(&doubled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn identical_corpus_is_perfect(sents in prop::collection::vec(
                prop::collection::vec("[a-f]", 4..7).prop_map(|w| w.join(" ")), 1..5)) {
            let corpus: Vec<EvalItem> = sents.iter().map(|s| EvalItem::new(s, &[s]).unwrap()).collect();
            let m = evaluate(&corpus).unwrap();
            prop_assert!((m.bleu4 - 1.0).abs() < 1e-12);
            prop_assert!((m.rouge_l - 1.0).abs() < 1e-12);
            prop_assert!((m.cider_d - 10.0).abs() < 1e-9);
        }

        #[test]
        fn rouge_matching_reference_never_hurts(corpus in arb_corpus()) {
            let mut more = corpus.clone();
            for i in &mut more {
                i.references.push(i.candidate.clone());
            }
            for (a, b) in corpus.iter().zip(&more) {
                if a.candidate.is_empty() { continue; }
                let one = std::slice::from_ref(a);
                let two = std::slice::from_ref(b);
                prop_assert!(rouge_l(two).unwrap() >= rouge_l(one).unwrap() - 1e-12);
                prop_assert!(bleu4(two).unwrap() >= bleu4(one).unwrap() - 1e-12);
                prop_assert!(cider_d(two).unwrap() >= cider_d(one).unwrap() - 1e-12);
            }
        }
    }
}
