//! Selective SeqStep on binary p-values and the knockoff+ threshold.

use crate::error::{out_of_range, Error, Result};

/// A binary p-value: ½ when the observed sign agrees with the guessed
/// direction, 1 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PTilde {
    Half,
    One,
}

impl PTilde {
    pub fn value(self) -> f64 {
        match self {
            PTilde::Half => 0.5,
            PTilde::One => 1.0,
        }
    }
}

/// Binary p-values in testing order, keyed by hypothesis index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BinaryPValueSeq {
    pub entries: Vec<(usize, PTilde)>,
    /// Optional non-null flags by hypothesis index, for scoring.
    pub truth: Option<Vec<bool>>,
}

impl BinaryPValueSeq {
    /// Sequence whose i-th entry tests hypothesis i.
    pub fn from_ptilde(p: &[PTilde]) -> Self {
        Self { entries: p.iter().copied().enumerate().collect(), truth: None }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqStepResult {
    pub k_hat: usize,
    /// FDP-hat after each step; `f64::INFINITY` while no ½ has been seen.
    pub fdp_hat_path: Vec<f64>,
    /// Rejected hypothesis indices, ascending.
    pub rejections: Vec<usize>,
    pub rejection_count: usize,
}

/// (1 + #{p̃ = 1}) / #{p̃ = ½} along the sequence.
pub fn fdp_hat_path(seq: &BinaryPValueSeq) -> Vec<f64> {
    let (mut ones, mut halves) = (0usize, 0usize);
    seq.entries
        .iter()
        .map(|&(_, p)| {
            match p {
                PTilde::Half => halves += 1,
                PTilde::One => ones += 1,
            }
            if halves == 0 {
                f64::INFINITY
            } else {
                (1 + ones) as f64 / halves as f64
            }
        })
        .collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(out_of_range(format!("alpha = {alpha} must lie in (0, 1)")))
    }
}

/// k̂ = max{k : FDP-hat_k ≤ α}; rejects the ½ entries among the first k̂.
pub fn run_seqstep(seq: &BinaryPValueSeq, alpha: f64) -> Result<SeqStepResult> {
    check_alpha(alpha)?;
    let path = fdp_hat_path(seq);
    let k_hat = path.iter().rposition(|&f| f <= alpha).map_or(0, |i| i + 1);
    let mut rejections: Vec<usize> =
        seq.entries[..k_hat].iter().filter(|(_, p)| *p == PTilde::Half).map(|(i, _)| *i).collect();
    rejections.sort_unstable();
    let rejection_count = rejections.len();
    Ok(SeqStepResult { k_hat, fdp_hat_path: path, rejections, rejection_count })
}

/// Rejection count of SeqStep from its stopping index alone:
/// R = ⌈(1 + k̂)/(1 + α)⌉, valid for 0 < k̂ < d.
pub fn rejection_count_identity(k_hat: usize, d: usize, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    if k_hat == 0 || k_hat >= d {
        return Err(Error::Inapplicable(format!("identity needs 0 < k_hat < d, got k_hat = {k_hat}, d = {d}")));
    }
    let ratio = (1 + k_hat) as f64 / (1.0 + alpha);
    // Exact ratios can land a few ulps above an integer.
    let nearest = ratio.round();
    Ok(if (ratio - nearest).abs() <= 1e-9 * ratio { nearest } else { ratio.ceil() } as usize)
}

/// Outcome of the knockoff(+) threshold rule.
#[derive(Debug, Clone, PartialEq)]
pub struct KnockoffThreshold {
    pub threshold: Option<f64>,
    /// Rejected indices, ascending.
    pub rejections: Vec<usize>,
}

/// Knockoff+ threshold: the smallest t among the positive |W_j| with
/// (1 + #{W ≤ −t}) / #{W ≥ t} ≤ α; rejects {j : W_j ≥ t}.
pub fn knockoff_plus_threshold(w: &[f64], alpha: f64) -> Result<KnockoffThreshold> {
    knockoff_threshold(w, alpha, true)
}

/// Knockoff threshold; `plus = false` drops the "1 +" in the numerator,
/// which gives the liberal variant without finite-sample FDR control.
pub fn knockoff_threshold(w: &[f64], alpha: f64, plus: bool) -> Result<KnockoffThreshold> {
    check_alpha(alpha)?;
    if w.iter().any(|v| v.is_nan()) {
        return Err(out_of_range("W contains NaN"));
    }
    let mut candidates: Vec<f64> = w.iter().map(|v| v.abs()).filter(|v| *v > 0.0).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut pos: Vec<f64> = w.iter().copied().filter(|v| *v > 0.0).collect();
    let mut neg: Vec<f64> = w.iter().filter(|v| **v < 0.0).map(|v| -v).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let offset = if plus { 1.0 } else { 0.0 };
    let (mut ip, mut ineg) = (0usize, 0usize);
    for &t in &candidates {
        while ip < pos.len() && pos[ip] < t {
            ip += 1;
        }
        while ineg < neg.len() && neg[ineg] < t {
            ineg += 1;
        }
        let above = pos.len() - ip;
        let below = neg.len() - ineg;
        if above > 0 && (offset + below as f64) / above as f64 <= alpha {
            let rejections = w.iter().enumerate().filter(|(_, v)| **v >= t).map(|(j, _)| j).collect();
            return Ok(KnockoffThreshold { threshold: Some(t), rejections });
        }
    }
    Ok(KnockoffThreshold { threshold: None, rejections: Vec::new() })
}
