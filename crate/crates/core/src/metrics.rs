//! Corpus caption metrics: BLEU, ROUGE-L and CIDEr-D.
//!
//! Captions are token lists. METEOR and SPICE are not implemented, so the
//! SPIDEr value reported here is only the CIDEr half and is always flagged
//! as partial.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;
/// Gaussian length-penalty width of CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;
/// Highest n-gram order used by BLEU and CIDEr-D.
pub const MAX_ORDER: usize = 4;

pub type Caption = Vec<String>;

/// Splits on whitespace.
pub fn tokenize(text: &str) -> Caption {
    text.split_whitespace().map(str::to_owned).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(candidates: &[Caption], references: &[Vec<Caption>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("candidate {i} has no references")));
    }
    Ok(())
}

/// Corpus BLEU up to order `n` without smoothing.
pub fn bleu_n(candidates: &[Caption], references: &[Vec<Caption>], n: usize) -> Result<f64> {
    bleu(candidates, references, n, false)
}

/// Corpus BLEU: clipped n-gram precisions pooled over the corpus, their
/// geometric mean over orders `1..=n`, times the brevity penalty with the
/// closest reference length (shorter wins ties). With `smoothing`, orders
/// above 1 use add-one counts.
pub fn bleu(candidates: &[Caption], references: &[Vec<Caption>], n: usize, smoothing: bool) -> Result<f64> {
    check_corpus(candidates, references)?;
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order must be in 1..=4, got {n}")));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("references checked nonempty");
        for k in 1..=n {
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(cand, k) {
                matched[k - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let (m, t) = if smoothing && k > 0 {
            (matched[k] + 1, total[k] + 1)
        } else {
            (matched[k], total[k])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    Ok(bp * (log_sum / n as f64).exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L: LCS F-measure with recall weight `β`, best over references.
pub fn rouge_l(candidate: &[String], references: &[Caption]) -> f64 {
    rouge_l_beta(candidate, references, ROUGE_BETA)
}

pub fn rouge_l_beta(candidate: &[String], references: &[Caption], beta: f64) -> f64 {
    let b2 = beta * beta;
    references
        .iter()
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / candidate.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean sentence ROUGE-L over the corpus.
pub fn rouge_l_corpus(candidates: &[Caption], references: &[Vec<Caption>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum();
    Ok(total / candidates.len() as f64)
}

/// TF-IDF weighted n-gram vector of one caption for every order.
struct CiderVec<'a> {
    orders: Vec<HashMap<&'a [String], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn cider_vec<'a>(tokens: &'a [String], df: &HashMap<&[String], usize>, log_n: f64) -> CiderVec<'a> {
    let mut orders = Vec::with_capacity(MAX_ORDER);
    let mut norms = Vec::with_capacity(MAX_ORDER);
    for k in 1..=MAX_ORDER {
        let v: HashMap<&[String], f64> = ngram_counts(tokens, k)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g, tf as f64 * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        orders.push(v);
    }
    CiderVec {
        orders,
        norms,
        len: tokens.len(),
    }
}

fn cider_sim(cand: &CiderVec, reference: &CiderVec) -> f64 {
    let delta = cand.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for k in 0..MAX_ORDER {
        let mut val = 0.0;
        for (g, &c) in &cand.orders[k] {
            if let Some(&r) = reference.orders[k].get(g) {
                val += c.min(r) * r;
            }
        }
        if cand.norms[k] != 0.0 && reference.norms[k] != 0.0 {
            val /= cand.norms[k] * reference.norms[k];
        }
        total += val * penalty;
    }
    total / MAX_ORDER as f64
}

/// Per-clip CIDEr-D scores (each in `[0, 10]`). Document frequencies come
/// from the reference corpus.
pub fn cider_d_per_clip(candidates: &[Caption], references: &[Vec<Caption>]) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    if candidates.len() < 2 {
        return Err(Error::IdfDegenerate(candidates.len()));
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for refs in references {
        let mut seen = HashSet::new();
        for r in refs {
            for k in 1..=MAX_ORDER {
                if r.len() >= k {
                    seen.extend(r.windows(k));
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (candidates.len() as f64).ln();
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            let cv = cider_vec(cand, &df, log_n);
            let sum: f64 = refs.iter().map(|r| cider_sim(&cv, &cider_vec(r, &df, log_n))).sum();
            10.0 * sum / refs.len() as f64
        })
        .collect())
}

/// Corpus CIDEr-D, the mean of the per-clip scores.
pub fn cider_d(candidates: &[Caption], references: &[Vec<Caption>]) -> Result<f64> {
    let per = cider_d_per_clip(candidates, references)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// A score that leaves out some of its defining terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartialScore {
    pub value: f64,
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipScores {
    pub id: String,
    pub candidate: Caption,
    pub references: Vec<Caption>,
    pub bleu: [f64; MAX_ORDER],
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Corpus BLEU_1 ..= BLEU_4.
    pub bleu: [f64; MAX_ORDER],
    pub rouge_l: f64,
    pub cider: f64,
    /// CIDEr-D / 2, i.e. SPIDEr with the SPICE term missing.
    pub spider_partial: PartialScore,
    pub per_clip: Vec<ClipScores>,
}

impl MetricReport {
    /// Scores a corpus. `ids`, `candidates` and `references` are parallel.
    pub fn compute(ids: &[String], candidates: &[Caption], references: &[Vec<Caption>]) -> Result<Self> {
        check_corpus(candidates, references)?;
        if ids.len() != candidates.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} candidates",
                ids.len(),
                candidates.len()
            )));
        }
        let mut bleu_scores = [0.0; MAX_ORDER];
        for (n, b) in bleu_scores.iter_mut().enumerate() {
            *b = bleu_n(candidates, references, n + 1)?;
        }
        let cider_clip = cider_d_per_clip(candidates, references)?;
        let cider = cider_clip.iter().sum::<f64>() / cider_clip.len() as f64;
        let mut per_clip = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let (c, r) = (&candidates[i], &references[i]);
            let one_c = std::slice::from_ref(c);
            let one_r = std::slice::from_ref(r);
            let mut b = [0.0; MAX_ORDER];
            for (n, v) in b.iter_mut().enumerate() {
                *v = bleu_n(one_c, one_r, n + 1)?;
            }
            per_clip.push(ClipScores {
                id: id.clone(),
                candidate: c.clone(),
                references: r.clone(),
                bleu: b,
                rouge_l: rouge_l(c, r),
                cider: cider_clip[i],
            });
        }
        Ok(Self {
            bleu: bleu_scores,
            rouge_l: rouge_l_corpus(candidates, references)?,
            cider,
            spider_partial: PartialScore {
                value: cider / 2.0,
                partial: true,
            },
            per_clip,
        })
    }

    /// Tab-separated records: one `metric` line per corpus score, then one
    /// `clip` line per clip. Values use Rust's shortest round-trip format.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (n, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(out, "metric\tbleu_{}\t{b}", n + 1);
        }
        let _ = writeln!(out, "metric\trouge_l\t{}", self.rouge_l);
        let _ = writeln!(out, "metric\tcider_d\t{}", self.cider);
        let _ = writeln!(out, "metric\tspider_partial\t{}\tpartial", self.spider_partial.value);
        for c in &self.per_clip {
            let refs: Vec<String> = c.references.iter().map(|r| r.join(" ")).collect();
            let _ = writeln!(
                out,
                "clip\t{}\t{}\t{}\tbleu_1={}\tbleu_2={}\tbleu_3={}\tbleu_4={}\trouge_l={}\tcider_d={}",
                c.id,
                c.candidate.join(" "),
                refs.join(" | "),
                c.bleu[0],
                c.bleu[1],
                c.bleu[2],
                c.bleu[3],
                c.rouge_l,
                c.cider
            );
        }
        out
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8}", "metric", "score");
        for (n, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(out, "{:<16} {:>8.4}", format!("BLEU_{}", n + 1), b);
        }
        let _ = writeln!(out, "{:<16} {:>8.4}", "ROUGE_L", self.rouge_l);
        let _ = writeln!(out, "{:<16} {:>8.4}", "CIDEr-D", self.cider);
        let _ = writeln!(
            out,
            "{:<16} {:>8.4}  (partial: SPICE not computed)",
            "SPIDEr", self.spider_partial.value
        );
        out
    }
}
