//! Model-comparison statistics: one-way repeated-measures ANOVA with seeds
//! as subjects, post-hoc paired t-tests and Benjamini-Hochberg FDR
//! correction over all model pairs.

pub mod special;

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use special::{f_upper_p, t_two_sided_p};

pub const PAIRWISE_FORMAT_VERSION: u32 = 1;

/// Rectangular metric matrix: one value per (model, seed), paired by seed
/// index across models.
#[derive(Debug, Clone)]
pub struct RunMatrix {
    pub models: Vec<String>,
    pub seeds: Vec<u64>,
    /// values[model_index][seed_index]
    pub values: Vec<Vec<f64>>,
}

impl RunMatrix {
    pub fn new(models: Vec<String>, seeds: Vec<u64>, values: Vec<Vec<f64>>) -> Result<RunMatrix> {
        if models.len() != values.len() {
            return Err(Error::Data("one value row required per model".into()));
        }
        if seeds.len() < 2 {
            return Err(Error::Data("at least 2 runs per model are required".into()));
        }
        if values.iter().any(|row| row.len() != seeds.len()) {
            return Err(Error::Data("run matrix must be rectangular".into()));
        }
        Ok(RunMatrix { models, seeds, values })
    }
}

/// Repeated-measures ANOVA decomposition and F test.
#[derive(Debug, Clone, Copy)]
pub struct Anova {
    pub f: f64,
    pub p: f64,
    pub df_treatment: usize,
    pub df_error: usize,
    pub ss_total: f64,
    pub ss_subjects: f64,
    pub ss_treatment: f64,
    pub ss_error: f64,
}

/// Classic one-way repeated-measures decomposition with seeds as subjects:
/// SS_total = SS_subjects + SS_treatment + SS_error.
pub fn rm_anova(m: &RunMatrix) -> Result<Anova> {
    let k = m.models.len();
    let n = m.seeds.len();
    if k < 2 {
        return Err(Error::Data("rm_anova needs at least 2 models".into()));
    }
    let grand: f64 = m.values.iter().flatten().sum::<f64>() / (k * n) as f64;
    let ss_total: f64 = m.values.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ss_treatment: f64 = m
        .values
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / n as f64;
            n as f64 * (mean - grand).powi(2)
        })
        .sum();
    let ss_subjects: f64 = (0..n)
        .map(|j| {
            let mean = m.values.iter().map(|row| row[j]).sum::<f64>() / k as f64;
            k as f64 * (mean - grand).powi(2)
        })
        .sum();
    let ss_error = (ss_total - ss_subjects - ss_treatment).max(0.0);

    let df_treatment = k - 1;
    let df_error = (k - 1) * (n - 1);
    let ms_treatment = ss_treatment / df_treatment as f64;
    let ms_error = ss_error / df_error as f64;

    let degenerate = ms_error <= 1e-12 * ss_total.max(1e-300);
    if degenerate {
        if ss_treatment > 0.0 {
            // all within-subject variation explained by the treatment
            return Ok(Anova {
                f: f64::INFINITY,
                p: 0.0,
                df_treatment,
                df_error,
                ss_total,
                ss_subjects,
                ss_treatment,
                ss_error,
            });
        }
        return Err(Error::StatDegenerate(
            "zero error variance and zero treatment variance; F test undefined".into(),
        ));
    }

    let f = ms_treatment / ms_error;
    let p = f_upper_p(f, df_treatment as f64, df_error as f64);
    Ok(Anova { f, p, df_treatment, df_error, ss_total, ss_subjects, ss_treatment, ss_error })
}

/// Paired t-test result.
#[derive(Debug, Clone, Copy)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test on seed-paired samples.
///
/// A zero-variance difference vector yields p = 1 when the mean difference
/// is also zero, and a degenerate-statistic error otherwise.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Data("paired samples must have equal length".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Data("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var <= 0.0 {
        if mean == 0.0 {
            return Ok(TTest { t: 0.0, p: 1.0, df });
        }
        return Err(Error::StatDegenerate(
            "zero-variance differences with nonzero mean; t undefined".into(),
        ));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p = t_two_sided_p(t, df as f64);
    Ok(TTest { t, p, df })
}

/// Benjamini-Hochberg step-up adjustment, mapped back to input order.
pub fn bh_fdr(pvalues: &[f64]) -> Vec<f64> {
    let m = pvalues.len();
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvalues[i].total_cmp(&pvalues[j]));
    let mut adjusted = vec![0.0; m];
    let mut running_min = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let q = (pvalues[idx] * m as f64 / (rank + 1) as f64).min(1.0);
        running_min = running_min.min(q);
        adjusted[idx] = running_min;
    }
    adjusted
}

/// One upper-triangular cell of the pairwise comparison table.
#[derive(Debug, Clone)]
pub struct PairwiseCell {
    pub model_a: String,
    pub model_b: String,
    pub t: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_adj: Option<f64>,
    pub significant: Option<bool>,
    /// Set when the cell's t-test was degenerate.
    pub note: Option<String>,
}

/// Full comparison: omnibus ANOVA plus FDR-adjusted pairwise t-tests.
#[derive(Debug, Clone)]
pub struct PairwiseReport {
    pub alpha: f64,
    pub anova: Option<Anova>,
    pub cells: Vec<PairwiseCell>,
}

/// Run the omnibus test and all k(k-1)/2 post-hoc paired t-tests, adjusting
/// the raw p-values jointly with BH. Degenerate cells are reported, not
/// fatal.
pub fn compare_models(m: &RunMatrix, alpha: f64) -> Result<PairwiseReport> {
    let anova = match rm_anova(m) {
        Ok(a) => Some(a),
        Err(Error::StatDegenerate(_)) => None,
        Err(e) => return Err(e),
    };

    let mut cells = Vec::new();
    for i in 0..m.models.len() {
        for j in i + 1..m.models.len() {
            let cell = match paired_ttest(&m.values[i], &m.values[j]) {
                Ok(tt) => PairwiseCell {
                    model_a: m.models[i].clone(),
                    model_b: m.models[j].clone(),
                    t: Some(tt.t),
                    p_raw: Some(tt.p),
                    p_adj: None,
                    significant: None,
                    note: None,
                },
                Err(Error::StatDegenerate(msg)) => PairwiseCell {
                    model_a: m.models[i].clone(),
                    model_b: m.models[j].clone(),
                    t: None,
                    p_raw: None,
                    p_adj: None,
                    significant: None,
                    note: Some(msg),
                },
                Err(e) => return Err(e),
            };
            cells.push(cell);
        }
    }

    let raw: Vec<f64> = cells.iter().filter_map(|c| c.p_raw).collect();
    let adjusted = bh_fdr(&raw);
    let mut it = adjusted.into_iter();
    for cell in &mut cells {
        if cell.p_raw.is_some() {
            let q = it.next().expect("one adjusted p per defined raw p");
            cell.p_adj = Some(q);
            cell.significant = Some(q < alpha);
        }
    }

    Ok(PairwiseReport { alpha, anova, cells })
}

impl PairwiseReport {
    /// Write the upper-triangular table as CSV with columns
    /// `model_a,model_b,t,p_raw,p_adj,significant`.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "# format_version={PAIRWISE_FORMAT_VERSION}").map_err(|e| Error::io(path, e))?;
        writeln!(f, "# alpha={}", self.alpha).map_err(|e| Error::io(path, e))?;
        if let Some(a) = &self.anova {
            writeln!(
                f,
                "# rm_anova_F={:.6} rm_anova_p={:.6e} df=({},{})",
                a.f, a.p, a.df_treatment, a.df_error
            )
            .map_err(|e| Error::io(path, e))?;
        }
        writeln!(f, "model_a,model_b,t,p_raw,p_adj,significant").map_err(|e| Error::io(path, e))?;
        for c in &self.cells {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let sig = match c.significant {
                Some(true) => "yes",
                Some(false) => "no",
                None => "",
            };
            writeln!(
                f,
                "{},{},{},{},{},{}",
                c.model_a,
                c.model_b,
                fmt(c.t),
                fmt(c.p_raw),
                fmt(c.p_adj),
                sig
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
