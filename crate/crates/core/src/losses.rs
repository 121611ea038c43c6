//! Triple contrastive alignment, masked multimodal reconstruction, and their sum.

use serde::{Deserialize, Serialize};

use crate::attention::{Modality, TokenStream};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

/// Below this pooled norm the representation is replaced by the first basis vector.
pub const NORM_FLOOR: f64 = 1e-12;
/// Standard-deviation floor for per-patch target normalization.
pub const STD_FLOOR: f64 = 1e-6;

const UNIT_NORM_TOL: f64 = 1e-9;

/// Pooled, unit-norm representations per modality, all `[N×P]`.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z: Vec<(Modality, Var)>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    fn validate(&self, g: &Graph) -> Result<(usize, usize)> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::contract(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.z.len() < 2 {
            return Err(Error::contract(
                "contrastive loss needs at least two modalities",
            ));
        }
        let shape = g.shape(self.z[0].1).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::contract(format!(
                "representations must be a non-empty [N, P] matrix, got {shape:?}"
            )));
        }
        for (m, z) in &self.z {
            if g.shape(*z) != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "contrastive",
                    lhs: shape,
                    rhs: g.shape(*z).to_vec(),
                });
            }
            for row in g.value(*z).chunks(shape[1]) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::contract(format!(
                        "{m:?} representation row has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok((shape[0], shape[1]))
    }

    fn pairs(&self) -> Vec<(Var, Var)> {
        let mut out = Vec::new();
        for i in 0..self.z.len() {
            for j in i + 1..self.z.len() {
                out.push((self.z[i].1, self.z[j].1));
            }
        }
        out
    }
}

/// Sum over rows of `-log softmax(logits)[i, i]`, via a shifted log-sum-exp.
fn diagonal_nll(g: &mut Graph, logits: Var, n: usize) -> Result<Var> {
    let shift = g
        .value(logits)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let neg_shift = g.scalar(-shift);
    let centered = g.add(logits, neg_shift)?;
    let e = g.exp(centered);
    let row_sums = g.sum(e, Some(1))?;
    let lse = g.log(row_sums);
    let total_lse = g.sum(lse, None)?;
    let flat = g.reshape(centered, &[n * n])?;
    let diag_idx: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let diag = g.gather(flat, &diag_idx)?;
    let total_diag = g.sum(diag, None)?;
    g.sub(total_lse, total_diag)
}

/// Symmetric InfoNCE averaged over every unordered pair of modalities.
///
/// For each pair `(a, b)` both directions `a→b` and `b→a` are scored with
/// in-batch negatives from the other modality and averaged; the total is
/// divided by `pairs · N`.
pub fn contrastive_loss(g: &mut Graph, batch: &ContrastiveBatch) -> Result<Var> {
    let (n, _) = batch.validate(g)?;
    let pairs = batch.pairs();
    let mut terms = Vec::with_capacity(pairs.len() * 2);
    for (a, b) in &pairs {
        let bt = g.transpose(*b)?;
        let sim = g.matmul(*a, bt)?;
        let logits = g.scale(sim, 1.0 / batch.temperature)?;
        let logits_t = g.transpose(logits)?;
        terms.push(diagonal_nll(g, logits, n)?);
        terms.push(diagonal_nll(g, logits_t, n)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    g.scale(total, 0.5 / (pairs.len() * n) as f64)
}

/// The alignment objective evaluated exactly as printed: the softmax ratio
/// without a logarithm, negated, with a squared pair-count normalizer.
///
/// Evaluation only. The value lies in `[-1/pairs, 0]` and saturates once the
/// positives dominate, so it carries almost no training signal.
pub fn contrastive_loss_literal(g: &Graph, batch: &ContrastiveBatch) -> Result<f64> {
    let (n, p) = batch.validate(g)?;
    let pairs = batch.pairs();
    let mut total = 0.0;
    for (a, b) in &pairs {
        let (za, zb) = (g.value(*a), g.value(*b));
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..p).map(|t| za[i * p + t] * zb[j * p + t]).sum();
                    dot / batch.temperature
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            total += (logits[i] - mx).exp() / denom;
        }
    }
    let c = pairs.len() as f64;
    Ok(-total / (c * c * n as f64))
}

/// Per-element error used by the reconstruction objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconError {
    #[default]
    Mse,
    /// Smoothed absolute error `sqrt(x² + 1e-12)`.
    Abs,
}

/// Channel layout of one fused patch: radar, then lores, then the
/// space-to-depth folded hires channels, each followed by its `p²` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusedLayout {
    pub radar_channels: usize,
    pub lores_channels: usize,
    /// Hires channels before folding; the fused patch carries four times as many.
    pub hires_channels: usize,
    pub patch_px: usize,
}

impl FusedLayout {
    pub fn channels(&self) -> usize {
        self.radar_channels + self.lores_channels + 4 * self.hires_channels
    }

    pub fn patch_dim(&self) -> usize {
        self.channels() * self.patch_px * self.patch_px
    }

    /// Column range of each mode inside a fused patch row, in radar/lores/hires order.
    pub fn mode_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let pp = self.patch_px * self.patch_px;
        let r = self.radar_channels * pp;
        let l = r + self.lores_channels * pp;
        let h = l + 4 * self.hires_channels * pp;
        [0..r, r..l, l..h]
    }
}

/// Decoder output for one sample together with its normalized targets.
#[derive(Debug, Clone)]
pub struct ReconSample {
    /// `[L × N_ch·p²]` predictions.
    pub prediction: Var,
    /// Radar, lores, hires targets, each `[L × C_mode·p²]` and per-patch normalized.
    pub targets: [Tensor; 3],
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ReconBatch {
    pub samples: Vec<ReconSample>,
    pub layout: FusedLayout,
    pub error: ReconError,
}

/// Standardizes each `width`-sized slice to mean 0 and std 1 (population std, floored).
pub fn normalize_patches(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for patch in data.chunks(width) {
        let n = patch.len() as f64;
        let mean = patch.iter().sum::<f64>() / n;
        let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(STD_FLOOR);
        out.extend(patch.iter().map(|v| (v - mean) / std));
    }
    out
}

/// Mean over samples of the summed per-mode error on masked patches.
///
/// Each mode contributes `(1/M) Σ_masked mean_error(patch)`; unmasked
/// positions never enter the computation.
pub fn reconstruction_loss(g: &mut Graph, batch: &ReconBatch) -> Result<Var> {
    if batch.samples.is_empty() {
        return Err(Error::contract("reconstruction loss over an empty batch"));
    }
    let ranges = batch.layout.mode_ranges();
    let mut per_sample = Vec::with_capacity(batch.samples.len());
    for (i, s) in batch.samples.iter().enumerate() {
        let shape = g.shape(s.prediction).to_vec();
        if shape.len() != 2 || shape[1] != batch.layout.patch_dim() || s.mask.len() != shape[0] {
            return Err(Error::Dimension {
                op: "reconstruction",
                lhs: shape,
                rhs: vec![s.mask.len(), batch.layout.patch_dim()],
            });
        }
        let masked: Vec<usize> = (0..s.mask.len()).filter(|&j| s.mask[j]).collect();
        if masked.is_empty() {
            return Err(Error::contract(format!("sample {i} has an empty mask")));
        }
        let picked = g.gather(s.prediction, &masked)?;
        let mut modes = Vec::with_capacity(3);
        for (range, target) in ranges.iter().zip(&s.targets) {
            let width = range.len();
            if target.shape() != [shape[0], width] {
                return Err(Error::Dimension {
                    op: "reconstruction target",
                    lhs: target.shape().to_vec(),
                    rhs: vec![shape[0], width],
                });
            }
            let rows: Vec<f64> = masked
                .iter()
                .flat_map(|&j| target.row(j).to_vec())
                .collect();
            let t = g.constant(&[masked.len(), width], rows)?;
            let pred = g.slice(picked, 1, range.start, range.end)?;
            let diff = g.sub(pred, t)?;
            let err = match batch.error {
                ReconError::Mse => g.square(diff)?,
                ReconError::Abs => {
                    let sq = g.square(diff)?;
                    let eps = g.scalar(1e-12);
                    let sq = g.add(sq, eps)?;
                    let l = g.log(sq);
                    let half = g.scale(l, 0.5)?;
                    g.exp(half)
                }
            };
            modes.push(g.mean(err, None)?);
        }
        let a = g.add(modes[0], modes[1])?;
        per_sample.push(g.add(a, modes[2])?);
    }
    let mut total = per_sample[0];
    for s in &per_sample[1..] {
        total = g.add(total, *s)?;
    }
    g.scale(total, 1.0 / batch.samples.len() as f64)
}

/// Unweighted sum of the two objectives.
pub fn total_loss(g: &mut Graph, con: Var, recon: Var) -> Result<Var> {
    for (name, v) in [("contrastive", con), ("reconstruction", recon)] {
        let x = g.value(v);
        if x.len() != 1 || !x[0].is_finite() {
            return Err(Error::contract(format!(
                "{name} loss must be a finite scalar, got {x:?}"
            )));
        }
    }
    g.add(con, recon)
}

/// Mean-pools a token stream, optionally projects it, and scales to unit norm.
///
/// A pooled vector with norm below [`NORM_FLOOR`] maps to the first basis
/// vector, which keeps the output on the unit sphere.
pub fn pool_and_normalize(
    g: &mut Graph,
    store: &ParamStore,
    stream: &TokenStream,
    proj: Option<&Linear>,
) -> Result<Var> {
    if stream.is_empty() {
        return Err(Error::contract("cannot pool an empty token stream"));
    }
    let pooled = g.mean(stream.tokens, Some(0))?;
    let v = match proj {
        Some(p) => {
            let d = g.shape(pooled)[0];
            let row = g.reshape(pooled, &[1, d])?;
            let out = p.forward(g, store, row)?;
            g.reshape(out, &[p.out_dim])?
        }
        None => pooled,
    };
    unit_normalize(g, v)
}

/// L2-normalizes a vector with the [`NORM_FLOOR`] fallback.
pub fn unit_normalize(g: &mut Graph, v: Var) -> Result<Var> {
    let norm_sq: f64 = g.value(v).iter().map(|x| x * x).sum();
    if norm_sq.sqrt() < NORM_FLOOR {
        let mut e = vec![0.0; g.value(v).len()];
        e[0] = 1.0;
        return g.constant(g.shape(v).to_vec().as_slice(), e);
    }
    let sq = g.square(v)?;
    let s = g.sum(sq, None)?;
    let l = g.log(s);
    let h = g.scale(l, -0.5)?;
    let inv = g.exp(h);
    g.mul(v, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::PatchGrid;

    fn batch(g: &mut Graph, rows: &[Vec<f64>], modalities: usize, t: f64) -> ContrastiveBatch {
        let mods = [Modality::Radar, Modality::Lores, Modality::Hires];
        let z = (0..modalities)
            .map(|m| (mods[m], g.leaf(Tensor::from_rows(rows))))
            .collect();
        ContrastiveBatch { z, temperature: t }
    }

    #[test]
    fn single_sample_is_zero() {
        let mut g = Graph::new();
        let b = batch(&mut g, &[vec![0.6, 0.8]], 3, 0.1);
        let l = contrastive_loss(&mut g, &b).unwrap();
        assert!(g.item(l).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_pair_closed_form() {
        let mut g = Graph::new();
        let b = batch(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]], 3, 1.0);
        let l = contrastive_loss(&mut g, &b).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e / (e + 1.0)).ln();
        assert!((g.item(l) - expect).abs() < 1e-12);
        assert!((expect - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn collapsed_is_log_n() {
        let mut g = Graph::new();
        let rows = vec![vec![0.0, 1.0, 0.0]; 5];
        for t in [0.07, 1.0, 10.0] {
            let b = batch(&mut g, &rows, 3, t);
            let l = contrastive_loss(&mut g, &b).unwrap();
            assert!((g.item(l) - 5f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut g = Graph::new();
        let b = batch(&mut g, &[vec![1.0, 0.0]], 2, 0.0);
        assert!(contrastive_loss(&mut g, &b).is_err());
        let b = batch(&mut g, &[vec![1.0, 1.0]], 2, 1.0);
        assert!(contrastive_loss(&mut g, &b).is_err());
        let empty = g.leaf(Tensor::zeros(&[0, 2]));
        let b = ContrastiveBatch {
            z: vec![(Modality::Radar, empty), (Modality::Lores, empty)],
            temperature: 1.0,
        };
        assert!(contrastive_loss(&mut g, &b).is_err());
    }

    #[test]
    fn literal_form_is_bounded() {
        let mut g = Graph::new();
        let b = batch(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]], 3, 1.0);
        let v = contrastive_loss_literal(&g, &b).unwrap();
        let e = std::f64::consts::E;
        // 3 pairs, each contributing 2·e/(e+1), over 3²·2
        let expect = -(3.0 * 2.0 * e / (e + 1.0)) / 18.0;
        assert!((v - expect).abs() < 1e-12);
    }

    fn layout() -> FusedLayout {
        FusedLayout {
            radar_channels: 2,
            lores_channels: 3,
            hires_channels: 3,
            patch_px: 1,
        }
    }

    #[test]
    fn fused_channel_accounting() {
        let l = FusedLayout {
            patch_px: 8,
            ..layout()
        };
        assert_eq!(l.channels(), 17);
        assert_eq!(l.patch_dim(), 17 * 64);
        let r = l.mode_ranges();
        assert_eq!((r[0].len(), r[1].len(), r[2].len()), (128, 192, 768));
    }

    fn recon_fixture(g: &mut Graph, offset: f64, noise_unmasked: f64) -> ReconBatch {
        let lay = layout();
        let l = 4;
        let targets = [
            Tensor::new(vec![l, 2], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap(),
            Tensor::new(vec![l, 3], (0..12).map(|i| (i as f64).sin()).collect()).unwrap(),
            Tensor::new(vec![l, 12], (0..48).map(|i| (i as f64).cos()).collect()).unwrap(),
        ];
        let mask = vec![true, false, true, false];
        let mut pred = Vec::new();
        for (j, &masked) in mask.iter().enumerate() {
            let extra = if masked { offset } else { noise_unmasked };
            for t in &targets {
                pred.extend(t.row(j).iter().map(|v| v + extra));
            }
        }
        let prediction = g.leaf(Tensor::new(vec![l, lay.patch_dim()], pred).unwrap());
        ReconBatch {
            samples: vec![ReconSample {
                prediction,
                targets,
                mask,
            }],
            layout: lay,
            error: ReconError::Mse,
        }
    }

    #[test]
    fn recon_closed_forms() {
        let mut g = Graph::new();
        let b = recon_fixture(&mut g, 0.0, 0.0);
        let l = reconstruction_loss(&mut g, &b).unwrap();
        assert_eq!(g.item(l), 0.0);

        let b = recon_fixture(&mut g, 1.0, 0.0);
        let l = reconstruction_loss(&mut g, &b).unwrap();
        assert!((g.item(l) - 3.0).abs() < 1e-12);

        let b = recon_fixture(&mut g, 0.0, 17.5);
        let l = reconstruction_loss(&mut g, &b).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn recon_abs_mode() {
        let mut g = Graph::new();
        let mut b = recon_fixture(&mut g, -2.0, 0.0);
        b.error = ReconError::Abs;
        let l = reconstruction_loss(&mut g, &b).unwrap();
        assert!((g.item(l) - 6.0).abs() < 1e-9);
    }

    #[test]
    fn recon_empty_mask_rejected() {
        let mut g = Graph::new();
        let mut b = recon_fixture(&mut g, 0.0, 0.0);
        b.samples[0].mask = vec![false; 4];
        assert!(matches!(
            reconstruction_loss(&mut g, &b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn normalized_patches_standardized() {
        let out = normalize_patches(&[1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0], 4);
        let first = &out[..4];
        let mean: f64 = first.iter().sum::<f64>() / 4.0;
        let var: f64 = first.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var.sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(&out[4..], &[0.0; 4]);
    }

    #[test]
    fn total_loss_adds_and_checks() {
        let mut g = Graph::new();
        let a = g.scalar(0.5);
        let b = g.scalar(1.5);
        let t = total_loss(&mut g, a, b).unwrap();
        assert_eq!(g.item(t), 2.0);
        let z = g.scalar(0.0);
        let t = total_loss(&mut g, z, z).unwrap();
        assert_eq!(g.item(t), 0.0);
        let bad = g.scalar(f64::NAN);
        assert!(total_loss(&mut g, a, bad).is_err());
    }

    fn stream(g: &mut Graph, rows: &[Vec<f64>]) -> TokenStream {
        let x = g.leaf(Tensor::from_rows(rows));
        let grid = PatchGrid::new(1, rows.len(), 1, 1.0).unwrap();
        TokenStream::new(g, x, grid, Modality::Lores).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let s = stream(&mut g, &[vec![3.0, 4.0]]);
        let z = pool_and_normalize(&mut g, &store, &s, None).unwrap();
        let v = g.value(z);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let s = stream(&mut g, &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let z = pool_and_normalize(&mut g, &store, &s, None).unwrap();
        assert_eq!(g.value(z), &[1.0, 0.0]);
    }
}
