//! Per-example losses on a predicted probability `p`, their derivatives
//! with respect to `p`, and the cost-threshold utilities they derive from.
//!
//! Every loss here is a multiplicative reweighting of the standard binary
//! cross-entropy [`h_star`], except the equalized-odds penalty which adds a
//! batch-level term. Inputs are expected to be clamped probabilities.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// A loss value together with `dloss/dp`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub dloss_dp: f64,
}

impl LossGrad {
    fn scaled(self, w: f64) -> Self {
        Self {
            loss: w * self.loss,
            dloss_dp: w * self.dloss_dp,
        }
    }
}

/// Misclassification costs for the two classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub c0: f64,
    pub c1: f64,
}

impl CostSpec {
    pub fn new(c0: f64, c1: f64) -> Result<Self> {
        if !(c0 >= 0.0 && c1 >= 0.0) || c0 + c1 <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "costs must be nonnegative and not both zero, got c0={c0}, c1={c1}"
            )));
        }
        Ok(Self { c0, c1 })
    }

    /// Decision threshold `c = c0 / (c0 + c1)`.
    pub fn threshold(&self) -> f64 {
        self.c0 / (self.c0 + self.c1)
    }

    /// Class-1 weight `C = (1 - c) / c`.
    pub fn class_weight(&self) -> f64 {
        let c = self.threshold();
        (1.0 - c) / c
    }
}

/// Loss family and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    #[serde(alias = "h_star")]
    StandardCe,
    WeightedCe {
        c: f64,
    },
    Cc {
        #[serde(rename = "C")]
        class_weight: f64,
    },
    Focal {
        #[serde(rename = "K")]
        k: f64,
        alpha: f64,
    },
    Fbi {
        #[serde(rename = "K")]
        k: f64,
        xi: f64,
    },
    Peo {
        lambda: f64,
        epsilon: f64,
    },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            LossSpec::StandardCe => Ok(()),
            LossSpec::WeightedCe { c } if !(c > 0.0 && c < 1.0) => {
                bad(format!("weighted_ce needs c in (0,1), got {c}"))
            }
            LossSpec::Cc { class_weight } if !(class_weight > 0.0 && class_weight.is_finite()) => {
                bad(format!("cc needs C > 0, got {class_weight}"))
            }
            LossSpec::Focal { k, alpha } if !(k > 0.0 && alpha >= 0.0) => {
                bad(format!("focal needs K > 0 and alpha >= 0, got K={k}, alpha={alpha}"))
            }
            LossSpec::Fbi { k, xi } if !(k > 0.0 && xi >= 0.0) => {
                bad(format!("fbi needs K > 0 and xi >= 0, got K={k}, xi={xi}"))
            }
            LossSpec::Peo { lambda, epsilon } if !(lambda >= 0.0 && epsilon >= 0.0) => bad(format!(
                "peo needs lambda, epsilon >= 0, got lambda={lambda}, epsilon={epsilon}"
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::StandardCe => "h_star",
            LossSpec::WeightedCe { .. } => "weighted_ce",
            LossSpec::Cc { .. } => "cc",
            LossSpec::Focal { .. } => "focal",
            LossSpec::Fbi { .. } => "fbi",
            LossSpec::Peo { .. } => "peo",
        }
    }

    pub fn needs_z(&self) -> bool {
        matches!(self, LossSpec::Peo { .. })
    }

    /// Per-example loss; `None` for the batch-level PEO loss.
    pub fn per_example(&self, y: u8, d: u8, p: f64) -> Option<LossGrad> {
        Some(match *self {
            LossSpec::StandardCe => h_star(y, p),
            LossSpec::WeightedCe { c } => weighted_ce(y, p, c),
            LossSpec::Cc { class_weight } => cc_loss(y, p, class_weight),
            LossSpec::Focal { k, alpha } => focal_loss(y, p, k, alpha),
            LossSpec::Fbi { k, xi } => fbi_loss(y, d, p, k, xi),
            LossSpec::Peo { .. } => return None,
        })
    }

    /// Mean loss over a batch with the per-example derivatives expected by
    /// [`crate::net::NetworkParams::backward`].
    pub fn batch(&self, y: &[u8], d: &[u8], z: Option<&[u8]>, p: ArrayView1<'_, f64>) -> Result<BatchLoss> {
        match *self {
            LossSpec::Peo { lambda, epsilon } => {
                let z = z.ok_or_else(|| Error::MissingColumn("z".into()))?;
                Ok(peo_batch_loss(y, z, p, lambda, epsilon))
            }
            _ => {
                let n = y.len();
                let mut total = 0.0;
                let mut dl_dp = Array1::zeros(n);
                for i in 0..n {
                    let lg = self.per_example(y[i], d[i], p[i]).expect("per-example loss");
                    total += lg.loss;
                    dl_dp[i] = lg.dloss_dp;
                }
                Ok(BatchLoss {
                    loss: total / n as f64,
                    dl_dp,
                    constraint: None,
                    constraint_skipped: false,
                })
            }
        }
    }
}

/// Batch-mean loss. `dl_dp[i]` is `n · ∂loss/∂p_i`, i.e. the per-example
/// derivative under the batch-mean convention.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub dl_dp: Array1<f64>,
    /// Value of the equalized-odds proxy, when one was computed.
    pub constraint: Option<f64>,
    /// A `(y, z)` cell was empty so the constraint was left out.
    pub constraint_skipped: bool,
}

/// Binary cross-entropy.
pub fn h_star(y: u8, p: f64) -> LossGrad {
    if y == 1 {
        LossGrad {
            loss: -p.ln(),
            dloss_dp: -1.0 / p,
        }
    } else {
        LossGrad {
            loss: -(-p).ln_1p(),
            dloss_dp: 1.0 / (1.0 - p),
        }
    }
}

/// Cost-weighted cross-entropy with threshold `c`.
pub fn weighted_ce(y: u8, p: f64, c: f64) -> LossGrad {
    let w = if y == 1 { 1.0 - c } else { c };
    h_star(y, p).scaled(w)
}

/// Cross-entropy with class 1 weighted by `C`.
pub fn cc_loss(y: u8, p: f64, class_weight: f64) -> LossGrad {
    let w = if y == 1 { class_weight } else { 1.0 };
    h_star(y, p).scaled(w)
}

/// `|y - p|` and its derivative in `p`.
fn abs_error(y: u8, p: f64) -> (f64, f64) {
    if y == 1 {
        (1.0 - p, -1.0)
    } else {
        (p, 1.0)
    }
}

/// `K^y · |y-p|^α · H*`, differentiated through the modulating factor.
pub fn focal_loss(y: u8, p: f64, k: f64, alpha: f64) -> LossGrad {
    let base = h_star(y, p);
    let class_w = if y == 1 { k } else { 1.0 };
    if alpha == 0.0 {
        return base.scaled(class_w);
    }
    let (e, de) = abs_error(y, p);
    let modulation = e.powf(alpha);
    let dmodulation = alpha * e.powf(alpha - 1.0) * de;
    LossGrad {
        loss: class_w * modulation * base.loss,
        dloss_dp: class_w * (dmodulation * base.loss + modulation * base.dloss_dp),
    }
}

/// `K^(d·|y-p|·ξ) · H*`, differentiated through the exponent.
pub fn fbi_loss(y: u8, d: u8, p: f64, k: f64, xi: f64) -> LossGrad {
    let base = h_star(y, p);
    if d == 0 || xi == 0.0 {
        return base;
    }
    let (e, de) = abs_error(y, p);
    let log_k = k.ln();
    let w = (xi * e * log_k).exp();
    let dw = w * xi * log_k * de;
    LossGrad {
        loss: w * base.loss,
        dloss_dp: dw * base.loss + w * base.dloss_dp,
    }
}

/// Soft equalized-odds violation over a batch.
#[derive(Clone, Debug)]
pub struct EoProxy {
    pub value: f64,
    pub soft_fpr: [f64; 2],
    pub soft_fnr: [f64; 2],
    /// `∂value/∂p_i` (sign subgradient, 0 at a zero gap).
    pub grad: Array1<f64>,
}

/// Sum of absolute group gaps in soft FPR (mean `p` over negatives) and soft
/// FNR (mean `1 - p` over positives). `None` when any `(y, z)` cell is empty.
pub fn eo_proxy(y: &[u8], z: &[u8], p: ArrayView1<'_, f64>) -> Option<EoProxy> {
    let mut count = [[0usize; 2]; 2];
    let mut sum = [[0.0f64; 2]; 2];
    for i in 0..y.len() {
        let (yi, zi) = (y[i] as usize, z[i] as usize);
        count[yi][zi] += 1;
        sum[yi][zi] += if yi == 0 { p[i] } else { 1.0 - p[i] };
    }
    if count.iter().flatten().any(|&c| c == 0) {
        return None;
    }
    let soft_fpr = [sum[0][0] / count[0][0] as f64, sum[0][1] / count[0][1] as f64];
    let soft_fnr = [sum[1][0] / count[1][0] as f64, sum[1][1] / count[1][1] as f64];
    let fpr_gap = soft_fpr[0] - soft_fpr[1];
    let fnr_gap = soft_fnr[0] - soft_fnr[1];
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let (sf, sn) = (sign(fpr_gap), sign(fnr_gap));
    let grad = (0..y.len())
        .map(|i| {
            let (yi, zi) = (y[i] as usize, z[i] as usize);
            let group_sign = if zi == 0 { 1.0 } else { -1.0 };
            let n = count[yi][zi] as f64;
            if yi == 0 {
                sf * group_sign / n
            } else {
                -sn * group_sign / n
            }
        })
        .collect();
    Some(EoProxy {
        value: fpr_gap.abs() + fnr_gap.abs(),
        soft_fpr,
        soft_fnr,
        grad,
    })
}

/// `mean H* + λ·max(0, C_PEO − ε)` over one batch.
pub fn peo_batch_loss(y: &[u8], z: &[u8], p: ArrayView1<'_, f64>, lambda: f64, epsilon: f64) -> BatchLoss {
    let n = y.len();
    let mut total = 0.0;
    let mut dl_dp = Array1::zeros(n);
    for i in 0..n {
        let lg = h_star(y[i], p[i]);
        total += lg.loss;
        dl_dp[i] = lg.dloss_dp;
    }
    let mut loss = total / n as f64;
    let proxy = eo_proxy(y, z, p);
    if let Some(proxy) = &proxy {
        if lambda > 0.0 && proxy.value - epsilon > 0.0 {
            loss += lambda * (proxy.value - epsilon);
            dl_dp.scaled_add(lambda * n as f64, &proxy.grad);
        }
    }
    BatchLoss {
        loss,
        dl_dp,
        constraint: proxy.as_ref().map(|p| p.value),
        constraint_skipped: proxy.is_none(),
    }
}

/// Predict class 1 iff `p > c`.
pub fn decision_rule(p: f64, c: f64) -> u8 {
    u8::from(p > c)
}

/// Cost-weighted 0/1 error of a thresholded prediction.
pub fn weighted_error(y: u8, p: f64, c: f64) -> f64 {
    let yf = f64::from(y);
    let predicted_one = p > c;
    (1.0 - c) * yf * f64::from(u8::from(!predicted_one)) + c * (1.0 - yf) * f64::from(u8::from(predicted_one))
}

/// Threshold after the class prior moves from `pi` to `pi_hat`.
pub fn baseline_shift(c: f64, pi: f64, pi_hat: f64) -> Result<f64> {
    let denom = pi_hat * (c - pi) - pi * (c - 1.0);
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate(format!(
            "baseline shift denominator vanishes for c={c}, pi={pi}, pi_hat={pi_hat}"
        )));
    }
    Ok(c * pi_hat * (1.0 - pi) / denom)
}

/// `count(d=0) / count(d=1)`: the over- to under-represented ratio.
pub fn k_factor(dataset: &Dataset) -> Result<f64> {
    let over = dataset.count_d(0);
    let under = dataset.count_d(1);
    if over == 0 || under == 0 {
        return Err(Error::EmptyGroup(format!(
            "K needs both d-groups populated (d=0: {over}, d=1: {under}); the correction is undefined"
        )));
    }
    Ok(over as f64 / under as f64)
}
