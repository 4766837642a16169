//! Late fusion of branch scores, the modality-weighting loss, and the
//! training loop for fusion parameters and branch heads.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{argmax_segment, dot, Branch, BranchHeads, BranchScores};

/// Loss weights of the three branches and of the fused prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MWConfig {
    pub beta_r: f64,
    pub beta_o: f64,
    pub beta_ll: f64,
    pub beta_omega: f64,
}

impl Default for MWConfig {
    fn default() -> Self {
        MWConfig {
            beta_r: 0.06,
            beta_o: 0.06,
            beta_ll: 0.08,
            beta_omega: 0.80,
        }
    }
}

impl MWConfig {
    /// Plain cross-entropy on the fused score.
    pub fn fused_only() -> Self {
        MWConfig {
            beta_r: 0.0,
            beta_o: 0.0,
            beta_ll: 0.0,
            beta_omega: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_r, self.beta_o, self.beta_ll, self.beta_omega];
        if all.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Config(format!("betas must be finite and non-negative: {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("betas sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn beta(&self, b: Branch) -> f64 {
        match b {
            Branch::Read => self.beta_r,
            Branch::Observe => self.beta_o,
            Branch::Recall => self.beta_ll,
        }
    }
}

impl FromStr for MWConfig {
    type Err = Error;

    /// `beta_r,beta_o,beta_ll,beta_omega`
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("betas {s:?}: {e}")))?;
        let [beta_r, beta_o, beta_ll, beta_omega] = v[..] else {
            return Err(Error::Config(format!("expected 4 betas, got {}", v.len())));
        };
        let cfg = MWConfig {
            beta_r,
            beta_o,
            beta_ll,
            beta_omega,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMethod {
    Average,
    Maximum,
    SelfAtt,
    QaAtt,
    Fc,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [
        FusionMethod::Average,
        FusionMethod::Maximum,
        FusionMethod::SelfAtt,
        FusionMethod::QaAtt,
        FusionMethod::Fc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMethod::Average => "average",
            FusionMethod::Maximum => "maximum",
            FusionMethod::SelfAtt => "self-att",
            FusionMethod::QaAtt => "qa-att",
            FusionMethod::Fc => "fc",
        }
    }

    pub fn needs_embeddings(&self) -> bool {
        matches!(self, FusionMethod::SelfAtt | FusionMethod::QaAtt)
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "average" | "avg" => Ok(FusionMethod::Average),
            "maximum" | "max" => Ok(FusionMethod::Maximum),
            "self-att" => Ok(FusionMethod::SelfAtt),
            "qa-att" => Ok(FusionMethod::QaAtt),
            "fc" => Ok(FusionMethod::Fc),
            other => Err(Error::Config(format!("unknown fusion method {other:?}"))),
        }
    }
}

/// Fusion parameters. Branch order inside every array is read, observe, recall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum FusionHead {
    Average,
    Maximum,
    /// `omega = w . alpha + b`
    Fc {
        weights: [f64; 3],
        bias: f64,
    },
    /// `psi = W_self [y_r; y_o; y_ll] + b_self`, `omega = w_out . sum_m psi_m y_m + b_out`
    SelfAtt {
        w_self: [Vec<f64>; 3],
        b_self: [f64; 3],
        w_out: Vec<f64>,
        b_out: f64,
    },
    /// `psi_m = w_att . [y_m; y_qa] + b_att`, `omega = w_out . sum_m psi_m y_m + b_out`
    QaAtt {
        w_att: Vec<f64>,
        b_att: f64,
        w_out: Vec<f64>,
        b_out: f64,
    },
}

impl FusionHead {
    /// Equal fc weights; same ranking as [`FusionHead::Average`].
    pub fn uniform_fc() -> Self {
        FusionHead::Fc {
            weights: [1.0 / 3.0; 3],
            bias: 0.0,
        }
    }

    pub fn method(&self) -> FusionMethod {
        match self {
            FusionHead::Average => FusionMethod::Average,
            FusionHead::Maximum => FusionMethod::Maximum,
            FusionHead::Fc { .. } => FusionMethod::Fc,
            FusionHead::SelfAtt { .. } => FusionMethod::SelfAtt,
            FusionHead::QaAtt { .. } => FusionMethod::QaAtt,
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, zero biases.
    pub fn init(method: FusionMethod, dim: usize, rng: &mut impl Rng) -> Self {
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..=a)).collect()
        };
        match method {
            FusionMethod::Average => FusionHead::Average,
            FusionMethod::Maximum => FusionHead::Maximum,
            FusionMethod::Fc => {
                let w = uniform(3, 3);
                FusionHead::Fc {
                    weights: [w[0], w[1], w[2]],
                    bias: 0.0,
                }
            }
            FusionMethod::SelfAtt => FusionHead::SelfAtt {
                w_self: [
                    uniform(3 * dim, 3 * dim),
                    uniform(3 * dim, 3 * dim),
                    uniform(3 * dim, 3 * dim),
                ],
                b_self: [0.0; 3],
                w_out: uniform(dim, dim),
                b_out: 0.0,
            },
            FusionMethod::QaAtt => FusionHead::QaAtt {
                w_att: uniform(2 * dim, 2 * dim),
                b_att: 0.0,
                w_out: uniform(dim, dim),
                b_out: 0.0,
            },
        }
    }

    /// Embedding dimension the head expects, if it uses embeddings.
    pub fn embedding_dim(&self) -> Option<usize> {
        match self {
            FusionHead::SelfAtt { w_out, .. } | FusionHead::QaAtt { w_out, .. } => Some(w_out.len()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64], what: &str| -> Result<()> {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("{what} fusion parameters")))
            }
        };
        match self {
            FusionHead::Average | FusionHead::Maximum => Ok(()),
            FusionHead::Fc { weights, bias } => {
                finite(weights, "fc")?;
                finite(&[*bias], "fc")
            }
            FusionHead::SelfAtt {
                w_self,
                b_self,
                w_out,
                b_out,
            } => {
                let d = w_out.len();
                for row in w_self {
                    if row.len() != 3 * d {
                        return Err(Error::Dimension {
                            expected: 3 * d,
                            got: row.len(),
                        });
                    }
                    finite(row, "self-att")?;
                }
                finite(b_self, "self-att")?;
                finite(w_out, "self-att")?;
                finite(&[*b_out], "self-att")
            }
            FusionHead::QaAtt {
                w_att,
                b_att,
                w_out,
                b_out,
            } => {
                if w_att.len() != 2 * w_out.len() {
                    return Err(Error::Dimension {
                        expected: 2 * w_out.len(),
                        got: w_att.len(),
                    });
                }
                finite(w_att, "qa-att")?;
                finite(w_out, "qa-att")?;
                finite(&[*b_att, *b_out], "qa-att")
            }
        }
    }
}

/// Encoder outputs consumed by the attention fusions. Recall keeps every
/// segment slot (`None` = padded); the slot used is the best-scoring one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionEmbeddings {
    pub read: Option<Vec<Vec<f64>>>,
    pub observe: Option<Vec<Vec<f64>>>,
    pub recall: Option<Vec<Vec<Option<Vec<f64>>>>>,
    pub qa: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fused {
    pub omega: Vec<f64>,
    pub prediction: usize,
}

/// First index of the maximum; NaN never wins.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Per-candidate `[y_r, y_o, y_ll]`; absent branches are zero vectors.
pub(crate) fn branch_embeddings(
    scores: &BranchScores,
    emb: &FusionEmbeddings,
    n: usize,
    dim: usize,
) -> Result<Vec<[Vec<f64>; 3]>> {
    let pick = |v: &Option<Vec<Vec<f64>>>, b: Branch, c: usize| -> Result<Vec<f64>> {
        match (scores.get(b), v) {
            (None, _) => Ok(vec![0.0; dim]),
            (Some(_), None) => Err(Error::InvalidInput(format!(
                "{b} embeddings required for attention fusion"
            ))),
            (Some(_), Some(v)) => {
                let y = v
                    .get(c)
                    .ok_or_else(|| Error::InvalidInput(format!("missing {b} embedding for candidate {c}")))?;
                check_dim(y, dim)?;
                Ok(y.clone())
            }
        }
    };
    (0..n)
        .map(|c| {
            let r = pick(&emb.read, Branch::Read, c)?;
            let o = pick(&emb.observe, Branch::Observe, c)?;
            let ll = match scores.recall {
                None => vec![0.0; dim],
                Some(_) => {
                    let per_seg = scores.recall_per_segment.as_ref().ok_or_else(|| {
                        Error::InvalidInput("recall segment scores required for attention fusion".into())
                    })?;
                    let slots = emb
                        .recall
                        .as_ref()
                        .ok_or_else(|| Error::InvalidInput("recall embeddings required for attention fusion".into()))?;
                    let j = argmax_segment(&per_seg[c])
                        .ok_or_else(|| Error::InvalidInput(format!("candidate {c} has no recall segment")))?;
                    let y = slots
                        .get(c)
                        .and_then(|row| row.get(j))
                        .and_then(Option::as_ref)
                        .ok_or_else(|| {
                            Error::InvalidInput(format!("missing recall embedding for candidate {c} segment {j}"))
                        })?;
                    check_dim(y, dim)?;
                    y.clone()
                }
            };
            Ok([r, o, ll])
        })
        .collect()
}

fn check_dim(y: &[f64], dim: usize) -> Result<()> {
    if y.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: y.len(),
        });
    }
    Ok(())
}

fn qa_embeddings(emb: &FusionEmbeddings, n: usize, dim: usize) -> Result<&[Vec<f64>]> {
    let qa = emb
        .qa
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("question-answer embeddings required for qa-att".into()))?;
    if qa.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} qa embeddings for {n} candidates",
            qa.len()
        )));
    }
    for y in qa {
        check_dim(y, dim)?;
    }
    Ok(qa)
}

fn attention_omega(ys: &[Vec<f64>; 3], psi: [f64; 3], w_out: &[f64], b_out: f64) -> f64 {
    (0..3).map(|m| psi[m] * dot(w_out, &ys[m])).sum::<f64>() + b_out
}

fn self_att_psi(w_self: &[Vec<f64>; 3], b_self: &[f64; 3], ys: &[Vec<f64>; 3]) -> [f64; 3] {
    let d = ys[0].len();
    std::array::from_fn(|m| {
        let row = &w_self[m];
        (0..3).map(|k| dot(&row[k * d..(k + 1) * d], &ys[k])).sum::<f64>() + b_self[m]
    })
}

fn qa_att_psi(w_att: &[f64], b_att: f64, ys: &[Vec<f64>; 3], qa: &[f64]) -> [f64; 3] {
    let d = qa.len();
    let q = dot(&w_att[d..], qa);
    std::array::from_fn(|m| dot(&w_att[..d], &ys[m]) + q + b_att)
}

/// Fused score per candidate and the predicted index (ties to the lowest).
pub fn fuse(scores: &BranchScores, embeddings: Option<&FusionEmbeddings>, head: &FusionHead) -> Result<Fused> {
    let n = scores.n_candidates()?;
    for (b, s) in scores.active() {
        if s.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite(format!("{b} scores")));
        }
    }
    let active: Vec<(Branch, &[f64])> = scores.active().collect();
    let omega: Vec<f64> = match head {
        FusionHead::Average => (0..n)
            .map(|c| active.iter().map(|(_, s)| s[c]).sum::<f64>() / active.len() as f64)
            .collect(),
        FusionHead::Maximum => (0..n)
            .map(|c| active.iter().map(|(_, s)| s[c]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        FusionHead::Fc { weights, bias } => (0..n)
            .map(|c| active.iter().map(|(b, s)| weights[b.index()] * s[c]).sum::<f64>() + bias)
            .collect(),
        FusionHead::SelfAtt {
            w_self,
            b_self,
            w_out,
            b_out,
        } => {
            head.validate()?;
            let emb = embeddings.ok_or_else(|| Error::InvalidInput("self-att needs embeddings".into()))?;
            branch_embeddings(scores, emb, n, w_out.len())?
                .iter()
                .map(|ys| attention_omega(ys, self_att_psi(w_self, b_self, ys), w_out, *b_out))
                .collect()
        }
        FusionHead::QaAtt {
            w_att,
            b_att,
            w_out,
            b_out,
        } => {
            head.validate()?;
            let emb = embeddings.ok_or_else(|| Error::InvalidInput("qa-att needs embeddings".into()))?;
            let qa = qa_embeddings(emb, n, w_out.len())?;
            branch_embeddings(scores, emb, n, w_out.len())?
                .iter()
                .zip(qa)
                .map(|(ys, q)| attention_omega(ys, qa_att_psi(w_att, *b_att, ys, q), w_out, *b_out))
                .collect()
        }
    };
    let prediction = argmax(&omega);
    Ok(Fused { omega, prediction })
}

fn check_target(delta: &[f64], c_star: usize) -> Result<()> {
    if delta.is_empty() {
        return Err(Error::InvalidInput("empty score vector".into()));
    }
    if c_star >= delta.len() {
        return Err(Error::InvalidInput(format!(
            "target {c_star} out of range for {} candidates",
            delta.len()
        )));
    }
    if delta.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("loss input".into()));
    }
    Ok(())
}

pub fn log_sum_exp(delta: &[f64]) -> f64 {
    let m = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + delta.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(delta: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(delta);
    delta.iter().map(|x| (x - lse).exp()).collect()
}

/// `-log softmax(delta)[c_star]` via log-sum-exp.
pub fn cross_entropy(delta: &[f64], c_star: usize) -> Result<f64> {
    check_target(delta, c_star)?;
    Ok((log_sum_exp(delta) - delta[c_star]).max(0.0))
}

fn ce_grad(delta: &[f64], c_star: usize, beta: f64) -> Vec<f64> {
    softmax(delta)
        .into_iter()
        .enumerate()
        .map(|(c, p)| beta * (p - if c == c_star { 1.0 } else { 0.0 }))
        .collect()
}

/// Weighted sum of per-branch and fused cross-entropies. Inactive branches
/// contribute no term.
pub fn mw_loss(scores: &BranchScores, omega: &[f64], c_star: usize, cfg: &MWConfig) -> Result<f64> {
    cfg.validate()?;
    let mut loss = cfg.beta_omega * cross_entropy(omega, c_star)?;
    for (b, s) in scores.active() {
        loss += cfg.beta(b) * cross_entropy(s, c_star)?;
    }
    Ok(loss)
}

/// Gradients of [`mw_loss`] with respect to each score vector, holding the
/// others fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MwGradient {
    pub read: Option<Vec<f64>>,
    pub observe: Option<Vec<f64>>,
    pub recall: Option<Vec<f64>>,
    pub omega: Vec<f64>,
}

impl MwGradient {
    pub fn get(&self, b: Branch) -> Option<&[f64]> {
        match b {
            Branch::Read => self.read.as_deref(),
            Branch::Observe => self.observe.as_deref(),
            Branch::Recall => self.recall.as_deref(),
        }
    }
}

pub fn mw_gradient(scores: &BranchScores, omega: &[f64], c_star: usize, cfg: &MWConfig) -> Result<MwGradient> {
    cfg.validate()?;
    check_target(omega, c_star)?;
    let grad = |b: Branch| -> Result<Option<Vec<f64>>> {
        match scores.get(b) {
            None => Ok(None),
            Some(s) => {
                check_target(s, c_star)?;
                Ok(Some(ce_grad(s, c_star, cfg.beta(b))))
            }
        }
    };
    Ok(MwGradient {
        read: grad(Branch::Read)?,
        observe: grad(Branch::Observe)?,
        recall: grad(Branch::Recall)?,
        omega: ce_grad(omega, c_star, cfg.beta_omega),
    })
}

/// One training example: encoder outputs and the gold index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub embeddings: FusionEmbeddings,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub betas: MWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            betas: MWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub heads: BranchHeads,
    pub fusion: FusionHead,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Scores of one sample under the given heads. Recall keeps the per-segment
/// matrix so the best segment can receive the gradient.
pub fn sample_scores(heads: &BranchHeads, emb: &FusionEmbeddings) -> Result<BranchScores> {
    let apply = |b: Branch, v: &Option<Vec<Vec<f64>>>| -> Result<Option<Vec<f64>>> {
        v.as_ref()
            .map(|ys| ys.iter().map(|y| heads.get(b).apply(y)).collect())
            .transpose()
    };
    let mut s = BranchScores {
        read: apply(Branch::Read, &emb.read)?,
        observe: apply(Branch::Observe, &emb.observe)?,
        recall: None,
        recall_per_segment: None,
    };
    if let Some(slots) = &emb.recall {
        let per_seg = slots
            .iter()
            .map(|row| {
                row.iter()
                    .map(|y| y.as_ref().map(|y| heads.recall.apply(y)).transpose())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        s = s.with_recall_segments(per_seg)?;
    }
    Ok(s)
}

/// Flat parameter vector with a momentum buffer.
struct Momentum {
    velocity: Vec<f64>,
    lr: f64,
    mu: f64,
}

impl Momentum {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Momentum {
            velocity: vec![0.0; n],
            lr: cfg.learning_rate,
            mu: cfg.momentum,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.mu * *v - self.lr * g;
            *p += *v;
        }
    }
}

fn check_train(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<()> {
    cfg.betas.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    if cfg.batch_size == 0
        || cfg.learning_rate.is_nan()
        || cfg.learning_rate <= 0.0
        || !(0.0..1.0).contains(&cfg.momentum)
    {
        return Err(Error::Config(
            "batch_size, learning_rate and momentum out of range".into(),
        ));
    }
    Ok(())
}

/// Layout of the fc training vector: three heads (weights then bias) then
/// fc weights and bias.
struct FcLayout {
    dim: usize,
}

impl FcLayout {
    fn head(&self, b: Branch) -> usize {
        b.index() * (self.dim + 1)
    }
    fn fc(&self) -> usize {
        3 * (self.dim + 1)
    }
    fn len(&self) -> usize {
        self.fc() + 4
    }
}

/// Trains branch heads and fc fusion jointly under the MW loss with SGD and
/// momentum. Heads start from `heads`; fc weights start random.
pub fn train_fc(samples: &[TrainingSample], heads: &BranchHeads, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_train(samples, cfg)?;
    let dim = heads.read.dim();
    heads.check_dim(dim)?;
    let lay = FcLayout { dim };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let FusionHead::Fc { weights, bias } = FusionHead::init(FusionMethod::Fc, dim, &mut rng) else {
        unreachable!("fc init");
    };
    let mut params = vec![0.0; lay.len()];
    for b in Branch::ALL {
        let h = heads.get(b);
        params[lay.head(b)..lay.head(b) + dim].copy_from_slice(&h.weights);
        params[lay.head(b) + dim] = h.bias;
    }
    params[lay.fc()..lay.fc() + 3].copy_from_slice(&weights);
    params[lay.fc() + 3] = bias;

    let unpack = |p: &[f64]| -> (BranchHeads, FusionHead) {
        let head = |b: Branch| {
            crate::scoring::LinearHead::new(p[lay.head(b)..lay.head(b) + dim].to_vec(), p[lay.head(b) + dim])
        };
        (
            BranchHeads {
                read: head(Branch::Read),
                observe: head(Branch::Observe),
                recall: head(Branch::Recall),
            },
            FusionHead::Fc {
                weights: [p[lay.fc()], p[lay.fc() + 1], p[lay.fc() + 2]],
                bias: p[lay.fc() + 3],
            },
        )
    };

    let mut opt = Momentum::new(lay.len(), cfg);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (cur_heads, cur_fc) = unpack(&params);
            let mut grad = vec![0.0; lay.len()];
            for &i in batch {
                let s = &samples[i];
                let scores = sample_scores(&cur_heads, &s.embeddings)?;
                let fused = fuse(&scores, None, &cur_fc)?;
                total += mw_loss(&scores, &fused.omega, s.gold, &cfg.betas)?;
                let g = mw_gradient(&scores, &fused.omega, s.gold, &cfg.betas)?;
                let fcw = &params[lay.fc()..lay.fc() + 3];
                for (b, alpha) in scores.active() {
                    for (c, &a) in alpha.iter().enumerate() {
                        grad[lay.fc() + b.index()] += g.omega[c] * a;
                        let d_alpha = g.get(b).expect("active branch")[c] + g.omega[c] * fcw[b.index()];
                        let y: &[f64] = match b {
                            Branch::Read => &s.embeddings.read.as_ref().expect("read")[c],
                            Branch::Observe => &s.embeddings.observe.as_ref().expect("observe")[c],
                            Branch::Recall => {
                                let row = &scores.recall_per_segment.as_ref().expect("segments")[c];
                                let j = argmax_segment(row).expect("retained segment");
                                s.embeddings.recall.as_ref().expect("recall")[c][j]
                                    .as_deref()
                                    .expect("retained segment")
                            }
                        };
                        let off = lay.head(b);
                        for (k, yk) in y.iter().enumerate() {
                            grad[off + k] += d_alpha * yk;
                        }
                        grad[off + dim] += d_alpha;
                    }
                }
                grad[lay.fc() + 3] += g.omega.iter().sum::<f64>();
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut params, &grad);
        }
        epoch_loss.push(total / samples.len() as f64);
    }
    let (heads, fusion) = unpack(&params);
    Ok(TrainOutcome {
        heads,
        fusion,
        epoch_loss,
    })
}

/// Gradient of `omega^c` for one candidate, accumulated into `grad` with
/// weight `g`. Parameter layout matches [`attention_params`].
fn attention_grad(head: &FusionHead, ys: &[Vec<f64>; 3], qa: Option<&[f64]>, g: f64, grad: &mut [f64]) {
    match head {
        FusionHead::SelfAtt {
            w_self, b_self, w_out, ..
        } => {
            let d = w_out.len();
            let psi = self_att_psi(w_self, b_self, ys);
            let s: [f64; 3] = std::array::from_fn(|m| dot(w_out, &ys[m]));
            for m in 0..3 {
                let row = &mut grad[m * 3 * d..(m + 1) * 3 * d];
                for k in 0..3 {
                    for (r, y) in row[k * d..(k + 1) * d].iter_mut().zip(&ys[k]) {
                        *r += g * s[m] * y;
                    }
                }
                grad[9 * d + m] += g * s[m];
            }
            let out = 9 * d + 3;
            for k in 0..d {
                grad[out + k] += g * (0..3).map(|m| psi[m] * ys[m][k]).sum::<f64>();
            }
            grad[out + d] += g;
        }
        FusionHead::QaAtt { w_out, .. } => {
            let d = w_out.len();
            let qa = qa.expect("qa embedding");
            let FusionHead::QaAtt { w_att, b_att, .. } = head else {
                unreachable!()
            };
            let psi = qa_att_psi(w_att, *b_att, ys, qa);
            let s: [f64; 3] = std::array::from_fn(|m| dot(w_out, &ys[m]));
            let s_sum: f64 = s.iter().sum();
            for k in 0..d {
                grad[k] += g * (0..3).map(|m| s[m] * ys[m][k]).sum::<f64>();
                grad[d + k] += g * s_sum * qa[k];
            }
            grad[2 * d] += g * s_sum;
            let out = 2 * d + 1;
            for k in 0..d {
                grad[out + k] += g * (0..3).map(|m| psi[m] * ys[m][k]).sum::<f64>();
            }
            grad[out + d] += g;
        }
        _ => {}
    }
}

/// Flattens attention parameters; `None` for parameter-free methods.
fn attention_params(head: &FusionHead) -> Option<Vec<f64>> {
    match head {
        FusionHead::SelfAtt {
            w_self,
            b_self,
            w_out,
            b_out,
        } => {
            let mut p: Vec<f64> = w_self.iter().flatten().copied().collect();
            p.extend(b_self);
            p.extend(w_out);
            p.push(*b_out);
            Some(p)
        }
        FusionHead::QaAtt {
            w_att,
            b_att,
            w_out,
            b_out,
        } => {
            let mut p = w_att.clone();
            p.push(*b_att);
            p.extend(w_out);
            p.push(*b_out);
            Some(p)
        }
        _ => None,
    }
}

fn attention_from_params(template: &FusionHead, p: &[f64]) -> FusionHead {
    match template {
        FusionHead::SelfAtt { w_out, .. } => {
            let d = w_out.len();
            FusionHead::SelfAtt {
                w_self: std::array::from_fn(|m| p[m * 3 * d..(m + 1) * 3 * d].to_vec()),
                b_self: [p[9 * d], p[9 * d + 1], p[9 * d + 2]],
                w_out: p[9 * d + 3..10 * d + 3].to_vec(),
                b_out: p[10 * d + 3],
            }
        }
        FusionHead::QaAtt { w_out, .. } => {
            let d = w_out.len();
            FusionHead::QaAtt {
                w_att: p[..2 * d].to_vec(),
                b_att: p[2 * d],
                w_out: p[2 * d + 1..3 * d + 1].to_vec(),
                b_out: p[3 * d + 1],
            }
        }
        other => other.clone(),
    }
}

/// Trains an attention fusion on cross-entropy of the fused score with the
/// branch heads frozen.
pub fn train_attention(
    samples: &[TrainingSample],
    heads: &BranchHeads,
    method: FusionMethod,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_train(samples, cfg)?;
    if !method.needs_embeddings() {
        return Err(Error::Config(format!("{method} is not an attention fusion")));
    }
    let dim = heads.read.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = FusionHead::init(method, dim, &mut rng);
    let mut params = attention_params(&head).expect("attention head");
    let mut opt = Momentum::new(params.len(), cfg);
    let prepared: Vec<(BranchScores, Vec<[Vec<f64>; 3]>)> = samples
        .iter()
        .map(|s| {
            let scores = sample_scores(heads, &s.embeddings)?;
            let n = scores.n_candidates()?;
            let ys = branch_embeddings(&scores, &s.embeddings, n, dim)?;
            Ok((scores, ys))
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.len()];
            for &i in batch {
                let (scores, ys) = &prepared[i];
                let fused = fuse(scores, Some(&samples[i].embeddings), &head)?;
                total += cross_entropy(&fused.omega, samples[i].gold)?;
                let g = ce_grad(&fused.omega, samples[i].gold, 1.0);
                for (c, y) in ys.iter().enumerate() {
                    let qa = samples[i].embeddings.qa.as_ref().map(|q| q[c].as_slice());
                    attention_grad(&head, y, qa, g[c], &mut grad);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut params, &grad);
            head = attention_from_params(&head, &params);
        }
        epoch_loss.push(total / samples.len() as f64);
    }
    Ok(TrainOutcome {
        heads: heads.clone(),
        fusion: head,
        epoch_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::LinearHead;
    use proptest::prelude::*;
    use rand::Rng;

    fn triple(r: &[f64], o: &[f64], ll: &[f64]) -> BranchScores {
        BranchScores::from_triple(r.to_vec(), o.to_vec(), ll.to_vec())
    }

    #[test]
    fn average_and_maximum() {
        let s = triple(&[0.2], &[0.4], &[0.6]);
        assert!((fuse(&s, None, &FusionHead::Average).unwrap().omega[0] - 0.4).abs() < 1e-15);
        assert_eq!(fuse(&s, None, &FusionHead::Maximum).unwrap().omega[0], 0.6);
    }

    #[test]
    fn uniform_fc_is_average() {
        let s = triple(&[0.2, 1.0], &[0.4, -3.0], &[0.6, 0.5]);
        let a = fuse(&s, None, &FusionHead::Average).unwrap();
        let f = fuse(&s, None, &FusionHead::uniform_fc()).unwrap();
        for (x, y) in a.omega.iter().zip(&f.omega) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let s = triple(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0]);
        for head in [FusionHead::Average, FusionHead::Maximum, FusionHead::uniform_fc()] {
            assert_eq!(fuse(&s, None, &head).unwrap().prediction, 0);
        }
    }

    #[test]
    fn disabled_branch_is_dropped() {
        let s = BranchScores {
            read: Some(vec![1.0, 3.0]),
            observe: None,
            recall: Some(vec![5.0, 1.0]),
            recall_per_segment: None,
        };
        assert_eq!(fuse(&s, None, &FusionHead::Average).unwrap().omega, vec![3.0, 2.0]);
        let fc = FusionHead::Fc {
            weights: [1.0, 100.0, 2.0],
            bias: 0.5,
        };
        assert_eq!(fuse(&s, None, &fc).unwrap().omega, vec![11.5, 5.5]);
    }

    #[test]
    fn attention_requires_embeddings() {
        let s = triple(&[1.0], &[1.0], &[1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in [FusionMethod::SelfAtt, FusionMethod::QaAtt] {
            let head = FusionHead::init(m, 4, &mut rng);
            assert!(fuse(&s, None, &head).is_err());
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(&[1000.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!(ce.is_finite() && ce < 1e-12);
        assert!((cross_entropy(&[-1000.0, 0.0], 0).unwrap() - 1000.0).abs() < 1e-9);
        assert!(cross_entropy(&[f64::NAN, 0.0], 0).is_err());
        assert!(cross_entropy(&[0.0], 1).is_err());
    }

    #[test]
    fn mw_special_cases() {
        let s = triple(&[0.3, -1.0, 2.0], &[0.0, 0.5, 0.1], &[1.0, 1.0, -2.0]);
        let omega = [0.7, 0.1, -0.4];
        let only = mw_loss(&s, &omega, 1, &MWConfig::fused_only()).unwrap();
        assert_eq!(only, cross_entropy(&omega, 1).unwrap());
        let u = triple(&[0.0; 4], &[0.0; 4], &[0.0; 4]);
        let l = mw_loss(&u, &[0.0; 4], 3, &MWConfig::default()).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let bad = MWConfig {
            beta_r: 0.5,
            ..Default::default()
        };
        assert!(mw_loss(&u, &[0.0; 4], 0, &bad).is_err());
    }

    #[test]
    fn gradient_closed_form_at_uniform() {
        let u = triple(&[0.0; 4], &[0.0; 4], &[0.0; 4]);
        let cfg = MWConfig::default();
        let g = mw_gradient(&u, &[0.0; 4], 1, &cfg).unwrap();
        for c in 0..4 {
            let base = 0.25 - if c == 1 { 1.0 } else { 0.0 };
            assert!((g.read.as_ref().unwrap()[c] - base * 0.06).abs() < 1e-15);
            assert!((g.recall.as_ref().unwrap()[c] - base * 0.08).abs() < 1e-15);
            assert!((g.omega[c] - base * 0.80).abs() < 1e-15);
        }
        let zero_r = MWConfig {
            beta_r: 0.0,
            beta_o: 0.12,
            ..cfg
        };
        let g = mw_gradient(&triple(&[3.0, 1.0], &[0.0, 1.0], &[2.0, 2.0]), &[1.0, 0.0], 0, &zero_r).unwrap();
        assert!(g.read.unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn betas_parse() {
        let c: MWConfig = "0.06,0.06,0.08,0.80".parse().unwrap();
        assert_eq!(c, MWConfig::default());
        assert!("0.5,0.5".parse::<MWConfig>().is_err());
        assert!("0.5,0.5,0.5,0.5".parse::<MWConfig>().is_err());
        assert_eq!("self_att".parse::<FusionMethod>().unwrap(), FusionMethod::SelfAtt);
    }

    fn toy_samples(n: usize, dim: usize, seed: u64) -> Vec<TrainingSample> {
        // Feature 0 of the gold candidate is raised in every branch.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let gold = rng.random_range(0..4);
                let mut make = |c: usize| -> Vec<f64> {
                    let mut y: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
                    if c == gold {
                        y[0] += 1.0;
                    }
                    y
                };
                let read: Vec<Vec<f64>> = (0..4).map(&mut make).collect();
                let observe: Vec<Vec<f64>> = (0..4).map(&mut make).collect();
                let recall: Vec<Vec<Option<Vec<f64>>>> =
                    (0..4).map(|c| vec![Some(make(c)), Some(make(c)), None]).collect();
                let qa: Vec<Vec<f64>> = (0..4).map(&mut make).collect();
                TrainingSample {
                    embeddings: FusionEmbeddings {
                        read: Some(read),
                        observe: Some(observe),
                        recall: Some(recall),
                        qa: Some(qa),
                    },
                    gold,
                }
            })
            .collect()
    }

    fn accuracy(samples: &[TrainingSample], out: &TrainOutcome) -> f64 {
        let ok = samples
            .iter()
            .filter(|s| {
                let scores = sample_scores(&out.heads, &s.embeddings).unwrap();
                fuse(&scores, Some(&s.embeddings), &out.fusion).unwrap().prediction == s.gold
            })
            .count();
        ok as f64 / samples.len() as f64
    }

    #[test]
    fn fc_training_reduces_loss() {
        let samples = toy_samples(200, 6, 3);
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            ..Default::default()
        };
        let heads = BranchHeads {
            read: LinearHead::zeros(6),
            observe: LinearHead::zeros(6),
            recall: LinearHead::zeros(6),
        };
        let out = train_fc(&samples, &heads, &cfg).unwrap();
        assert!(
            out.epoch_loss.last().unwrap() < &(out.epoch_loss[0] * 0.9),
            "{:?}",
            out.epoch_loss
        );
        assert!(accuracy(&samples, &out) > 0.8);
    }

    #[test]
    fn attention_training_reduces_loss() {
        let samples = toy_samples(150, 5, 9);
        let heads = BranchHeads::reference(5);
        for m in [FusionMethod::SelfAtt, FusionMethod::QaAtt] {
            let cfg = TrainConfig {
                epochs: 25,
                learning_rate: 0.02,
                ..Default::default()
            };
            let out = train_attention(&samples, &heads, m, &cfg).unwrap();
            assert!(
                out.epoch_loss.last().unwrap() < &out.epoch_loss[0],
                "{m}: {:?}",
                out.epoch_loss
            );
            assert_eq!(out.fusion.method(), m);
        }
    }

    /// Central-difference check of the analytic attention gradients.
    #[test]
    fn attention_gradient_matches_finite_differences() {
        let samples = toy_samples(1, 3, 21);
        let heads = BranchHeads::reference(3);
        let s = &samples[0];
        let scores = sample_scores(&heads, &s.embeddings).unwrap();
        let ys = branch_embeddings(&scores, &s.embeddings, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in [FusionMethod::SelfAtt, FusionMethod::QaAtt] {
            let head = FusionHead::init(m, 3, &mut rng);
            let p = attention_params(&head).unwrap();
            let loss = |p: &[f64]| {
                let h = attention_from_params(&head, p);
                cross_entropy(&fuse(&scores, Some(&s.embeddings), &h).unwrap().omega, s.gold).unwrap()
            };
            let omega = fuse(&scores, Some(&s.embeddings), &head).unwrap().omega;
            let g = ce_grad(&omega, s.gold, 1.0);
            let mut analytic = vec![0.0; p.len()];
            for c in 0..4 {
                let qa = s.embeddings.qa.as_ref().map(|q| q[c].as_slice());
                attention_grad(&head, &ys[c], qa, g[c], &mut analytic);
            }
            for k in 0..p.len() {
                let mut hi = p.clone();
                hi[k] += 1e-5;
                let mut lo = p.clone();
                lo[k] -= 1e-5;
                let numeric = (loss(&hi) - loss(&lo)) / 2e-5;
                assert!(
                    (numeric - analytic[k]).abs() <= 1e-6 + 1e-4 * numeric.abs(),
                    "{m} param {k}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(delta in prop::collection::vec(-50.0f64..50.0, 2..8), shift in -100.0f64..100.0, c in 0usize..8) {
            let c = c % delta.len();
            let shifted: Vec<f64> = delta.iter().map(|d| d + shift).collect();
            let a = cross_entropy(&delta, c).unwrap();
            let b = cross_entropy(&shifted, c).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn average_argmax_ignores_common_offset(
            rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 2..6),
            k in -10.0f64..10.0,
        ) {
            let col = |f: fn(&(f64, f64, f64)) -> f64, add: f64| rows.iter().map(|r| f(r) + add).collect::<Vec<_>>();
            let s = triple(&col(|r| r.0, 0.0), &col(|r| r.1, 0.0), &col(|r| r.2, 0.0));
            let t = triple(&col(|r| r.0, k), &col(|r| r.1, k), &col(|r| r.2, k));
            let a = fuse(&s, None, &FusionHead::Average).unwrap();
            let b = fuse(&t, None, &FusionHead::Average).unwrap();
            let gap = a.omega.iter().map(|x| (x - a.omega[a.prediction]).abs()).filter(|g| *g > 0.0).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(a.prediction, b.prediction);
        }

        #[test]
        fn fc_argmax_ignores_per_branch_offset(
            rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 2..6),
            w in (0.01f64..2.0, 0.01f64..2.0, 0.01f64..2.0),
            shift in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
        ) {
            let head = FusionHead::Fc { weights: [w.0, w.1, w.2], bias: 0.1 };
            let s = triple(&rows.iter().map(|r| r.0).collect::<Vec<_>>(), &rows.iter().map(|r| r.1).collect::<Vec<_>>(), &rows.iter().map(|r| r.2).collect::<Vec<_>>());
            let t = triple(&rows.iter().map(|r| r.0 + shift.0).collect::<Vec<_>>(), &rows.iter().map(|r| r.1 + shift.1).collect::<Vec<_>>(), &rows.iter().map(|r| r.2 + shift.2).collect::<Vec<_>>());
            let a = fuse(&s, None, &head).unwrap();
            let b = fuse(&t, None, &head).unwrap();
            let gap = a.omega.iter().map(|x| (x - a.omega[a.prediction]).abs()).filter(|g| *g > 0.0).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(a.prediction, b.prediction);
        }

        #[test]
        fn mw_bounded_below_by_fused_term(
            s in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 2..6),
            c in 0usize..6,
        ) {
            let c = c % s.len();
            let sc = triple(&s.iter().map(|r| r.0).collect::<Vec<_>>(), &s.iter().map(|r| r.1).collect::<Vec<_>>(), &s.iter().map(|r| r.2).collect::<Vec<_>>());
            let omega: Vec<f64> = s.iter().map(|r| r.3).collect();
            let cfg = MWConfig::default();
            let l = mw_loss(&sc, &omega, c, &cfg).unwrap();
            prop_assert!(l >= cfg.beta_omega * cross_entropy(&omega, c).unwrap() - 1e-12);
        }
    }
}
