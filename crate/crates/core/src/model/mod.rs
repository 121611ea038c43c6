//! The full model: three unimodal encoders, two cross-encoders, a masked
//! decoder on the fused stream, and the training loop around them.

pub mod checkpoint;
pub mod config;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{DecoderShape, ModelConfig, StackShape};

use crate::attention::{CrossEncoder, Decoder, Encoder, Modality, TokenStream};
use crate::data::synth::derive_seed;
use crate::data::{AlignedTriplet, Raster};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, normalize_patches, pool_and_normalize, reconstruction_loss, total_loss,
    ContrastiveBatch, ReconBatch, ReconSample,
};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};

const INIT_STREAM: u64 = 0x1417;
const BATCH_STREAM: u64 = 0xBA7C;
const MASK_STREAM: u64 = 0x3A5C;

/// Module handles; all weights live in the accompanying [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ScaleAlibiModel {
    pub cfg: ModelConfig,
    pub radar: Encoder,
    pub lores: Encoder,
    pub hires: Encoder,
    /// Lores queries, radar keys and values.
    pub joint: CrossEncoder,
    /// Joint queries, hires keys and values.
    pub fused: CrossEncoder,
    pub decoder: Decoder,
    /// Optional heads for radar, lores and hires representations.
    pub proj: Option<[Linear; 3]>,
}

/// Everything one forward pass produces for a single triplet.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Unit-norm representations for radar, lores and hires.
    pub z: [Var; 3],
    pub fused: TokenStream,
    /// `[L × N_ch·p²]` decoder predictions on the fused grid.
    pub prediction: Var,
    pub mask: Vec<bool>,
}

/// Which optical encoder a probe reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeEncoder {
    Lores,
    Hires,
}

impl ScaleAlibiModel {
    /// Registers every weight in `store`, initialized from `rng`.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let [(_, radar), (_, lores), (_, hires)] = cfg.encoder_configs();
        let [joint, fused] = cfg.cross_configs();
        let radar = Encoder::new(store, "radar_encoder", radar, rng)?;
        let lores = Encoder::new(store, "lores_encoder", lores, rng)?;
        let hires = Encoder::new(store, "hires_encoder", hires, rng)?;
        let joint = CrossEncoder::new(store, "cross_joint", joint, rng)?;
        let fused = CrossEncoder::new(store, "cross_fused", fused, rng)?;
        let decoder = Decoder::new(store, "decoder", cfg.decoder_config(), rng)?;
        let proj = cfg.proj_dim.map(|p| {
            ["radar", "lores", "hires"]
                .map(|m| Linear::new(store, &format!("proj.{m}"), cfg.encoder_dim, p, rng))
        });
        Ok(Self {
            cfg: cfg.clone(),
            radar,
            lores,
            hires,
            joint,
            fused,
            decoder,
            proj,
        })
    }

    fn head(&self, i: usize) -> Option<&Linear> {
        self.proj.as_ref().map(|p| &p[i])
    }

    /// Runs the whole model on one triplet with a precomputed mask over the
    /// fused grid. Grids follow the rasters, so any size divisible by the
    /// patch works; footprints must agree.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        t: &AlignedTriplet,
        mask: &[bool],
    ) -> Result<ForwardOutput> {
        let gsd = self.cfg.lores_gsd;
        let radar = image_var(g, &t.radar)?;
        let lores = image_var(g, &t.lores)?;
        let hires = image_var(g, &t.hires)?;
        let s_radar = self.radar.forward(g, store, radar, gsd, Modality::Radar)?;
        let s_lores = self.lores.forward(g, store, lores, gsd, Modality::Lores)?;
        let s_hires = self
            .hires
            .forward(g, store, hires, self.cfg.hires_gsd(), Modality::Hires)?;

        let z = [
            pool_and_normalize(g, store, &s_radar, self.head(0))?,
            pool_and_normalize(g, store, &s_lores, self.head(1))?,
            pool_and_normalize(g, store, &s_hires, self.head(2))?,
        ];

        let joint = self
            .joint
            .forward(g, store, s_lores, s_radar, Modality::Joint)?;
        let fused = self
            .fused
            .forward(g, store, joint, s_hires, Modality::Fused)?;
        let prediction = self.decoder.forward(g, store, fused, mask)?;
        Ok(ForwardOutput {
            z,
            fused,
            prediction,
            mask: mask.to_vec(),
        })
    }

    /// Pooled, normalized representation of one optical image at the
    /// encoder's native size, the same vector the alignment loss sees.
    pub fn encode_for_probe(
        &self,
        store: &ParamStore,
        image: &Raster,
        which: ProbeEncoder,
    ) -> Result<Vec<f64>> {
        let (enc, px, gsd, head) = match which {
            ProbeEncoder::Lores => (&self.lores, self.cfg.lores_px, self.cfg.lores_gsd, 1),
            ProbeEncoder::Hires => (&self.hires, self.cfg.hires_px, self.cfg.hires_gsd(), 2),
        };
        let want = [enc.cfg.in_channels, px, px];
        if image.shape() != want {
            return Err(Error::Shape(format!(
                "{which:?} encoder expects a {want:?} image, got {:?}",
                image.shape()
            )));
        }
        let mut g = Graph::new();
        let x = image_var(&mut g, image)?;
        let modality = match which {
            ProbeEncoder::Lores => Modality::Lores,
            ProbeEncoder::Hires => Modality::Hires,
        };
        let s = enc.forward(&mut g, store, x, gsd, modality)?;
        let z = pool_and_normalize(&mut g, store, &s, self.head(head))?;
        Ok(g.value(z).to_vec())
    }
}

fn image_var(g: &mut Graph, r: &Raster) -> Result<Var> {
    g.constant(&[r.channels, r.height, r.width], r.to_f64())
}

/// Flattens a `[C×H×W]` buffer into `[L × C·p²]` patch rows, each ordered by
/// channel, then row, then column inside the patch.
pub fn patch_rows(data: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (rows, cols) = (h / p, w / p);
    let mut out = Vec::with_capacity(data.len());
    for r in 0..rows {
        for q in 0..cols {
            for ch in 0..c {
                for py in 0..p {
                    let y = r * p + py;
                    let start = ch * h * w + y * w + q * p;
                    out.extend_from_slice(&data[start..start + p]);
                }
            }
        }
    }
    out
}

/// Folds each 2×2 block of a `[C×2H×2W]` buffer into channels:
/// output channel `4c + 2dy + dx` holds pixel `(2y+dy, 2x+dx)` of channel `c`.
pub fn space_to_depth2(data: &[f64], c: usize, h2: usize, w2: usize) -> Vec<f64> {
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let oc = 4 * ch + 2 * dy + dx;
                for y in 0..h {
                    for x in 0..w {
                        out[oc * h * w + y * w + x] =
                            data[ch * h2 * w2 + (2 * y + dy) * w2 + 2 * x + dx];
                    }
                }
            }
        }
    }
    out
}

/// Per-patch normalized reconstruction targets for radar, lores and folded hires.
pub fn fused_targets(t: &AlignedTriplet, patch_px: usize) -> Result<[Tensor; 3]> {
    t.validate()?;
    let s = t.size();
    if !s.is_multiple_of(patch_px) {
        return Err(Error::Shape(format!(
            "size {s} is not divisible by patch {patch_px}"
        )));
    }
    let l = (s / patch_px) * (s / patch_px);
    let pp = patch_px * patch_px;
    let hires = space_to_depth2(&t.hires.to_f64(), t.hires.channels, 2 * s, 2 * s);
    let modes = [
        (t.radar.to_f64(), t.radar.channels),
        (t.lores.to_f64(), t.lores.channels),
        (hires, 4 * t.hires.channels),
    ];
    let out = modes.map(|(data, c)| {
        let rows = patch_rows(&data, c, s, s, patch_px);
        Tensor::new(vec![l, c * pp], normalize_patches(&rows, c * pp))
    });
    let [a, b, c] = out;
    Ok([a?, b?, c?])
}

/// Masks exactly `masked_count(tokens)` positions, chosen uniformly.
pub fn draw_mask(cfg: &ModelConfig, tokens: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let m = cfg.masked_count(tokens).max(1).min(tokens);
    let mut mask = vec![false; tokens];
    for i in sample(rng, tokens, m) {
        mask[i] = true;
    }
    mask
}

/// Step counter, weights and optimizer moments. Per-step randomness (batch
/// choice and masks) derives from `(seed, step)`, so this is the entire
/// resumable state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub store: ParamStore,
    pub adam: AdamState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_con: f64,
    pub l_recon: f64,
    pub l_total: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Loss values for a batch without touching the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub l_con: f64,
    pub l_recon: f64,
    pub l_total: f64,
}

/// A model together with its training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ScaleAlibiModel,
    pub state: TrainState,
}

impl Trainer {
    /// Fresh weights drawn from the config seed.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, INIT_STREAM]));
        let model = ScaleAlibiModel::new(cfg, &mut store, &mut rng)?;
        Ok(Self {
            model,
            state: TrainState {
                step: 0,
                store,
                adam: AdamState::new(),
            },
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    /// Learning rate at `step`: linear warmup to `lr`, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        let cfg = self.cfg();
        if cfg.warmup_steps == 0 {
            cfg.lr
        } else {
            cfg.lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        }
    }

    /// Dataset indices used by the current step, distinct, at most `batch_size`.
    pub fn batch_indices(&self, dataset_len: usize) -> Vec<usize> {
        let n = self.cfg().batch_size.min(dataset_len);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.cfg().seed,
            self.state.step,
            BATCH_STREAM,
        ]));
        sample(&mut rng, dataset_len, n).into_vec()
    }

    /// Masks for the current step, one per batch element.
    pub fn step_masks(&self, batch_len: usize, tokens: usize) -> Vec<Vec<bool>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.cfg().seed,
            self.state.step,
            MASK_STREAM,
        ]));
        (0..batch_len)
            .map(|_| draw_mask(self.cfg(), tokens, &mut rng))
            .collect()
    }

    /// Records both objectives for `batch` and returns `(graph, con, recon, total)`.
    pub fn build_loss(
        &self,
        store: &ParamStore,
        batch: &[AlignedTriplet],
        masks: &[Vec<bool>],
    ) -> Result<(Graph, Var, Var, Var)> {
        if batch.is_empty() {
            return Err(Error::contract("train step needs a non-empty batch"));
        }
        if masks.len() != batch.len() {
            return Err(Error::contract(format!(
                "{} masks for {} samples",
                masks.len(),
                batch.len()
            )));
        }
        let cfg = self.cfg();
        let mut g = Graph::new();
        let mut zs: [Vec<Var>; 3] = Default::default();
        let mut samples = Vec::with_capacity(batch.len());
        for (t, mask) in batch.iter().zip(masks) {
            let out = self.model.forward(&mut g, store, t, mask)?;
            for (acc, z) in zs.iter_mut().zip(out.z) {
                let p = g.shape(z)[0];
                acc.push(g.reshape(z, &[1, p])?);
            }
            samples.push(ReconSample {
                prediction: out.prediction,
                targets: fused_targets(t, cfg.patch_px)?,
                mask: out.mask,
            });
        }
        let mut stacked = Vec::with_capacity(3);
        for (m, rows) in [Modality::Radar, Modality::Lores, Modality::Hires]
            .into_iter()
            .zip(&zs)
        {
            stacked.push((m, g.concat(rows, 0)?));
        }
        let con = contrastive_loss(
            &mut g,
            &ContrastiveBatch {
                z: stacked,
                temperature: cfg.temperature,
            },
        )?;
        let recon = reconstruction_loss(
            &mut g,
            &ReconBatch {
                samples,
                layout: cfg.layout(),
                error: cfg.recon_error,
            },
        )?;
        let l_con = g.item(con);
        let l_recon = g.item(recon);
        if !l_con.is_finite() || !l_recon.is_finite() {
            let mut names: Vec<String> = [("l_con", l_con), ("l_recon", l_recon)]
                .iter()
                .filter(|(_, v)| !v.is_finite())
                .map(|(n, _)| n.to_string())
                .collect();
            names.extend(store.non_finite());
            return Err(Error::NonFinite {
                step: self.state.step,
                names,
            });
        }
        let total = total_loss(&mut g, con, recon)?;
        Ok((g, con, recon, total))
    }

    /// Loss values at the current weights.
    pub fn evaluate(&self, batch: &[AlignedTriplet], masks: &[Vec<bool>]) -> Result<LossValues> {
        let (g, con, recon, total) = self.build_loss(&self.state.store, batch, masks)?;
        Ok(LossValues {
            l_con: g.item(con),
            l_recon: g.item(recon),
            l_total: g.item(total),
        })
    }

    /// Forward, backward and one Adam update on `batch` with this step's masks.
    pub fn train_step(&mut self, batch: &[AlignedTriplet]) -> Result<StepMetrics> {
        let masks = self.step_masks(batch.len(), self.cfg().lores_tokens_for(batch)?);
        let (g, con, recon, total) = self.build_loss(&self.state.store, batch, &masks)?;
        let (l_con, l_recon, l_total) = (g.item(con), g.item(recon), g.item(total));
        let grads = g.backward(total)?;
        let lr = self.lr_at(self.state.step);
        let store = &mut self.state.store;
        store.zero_grad();
        store.accumulate(&grads);
        for t in store.tensors_mut() {
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.numel()]);
            }
        }
        let bad = store.non_finite();
        if !bad.is_empty() {
            return Err(Error::NonFinite {
                step: self.state.step,
                names: bad,
            });
        }
        let adam = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        adam_step(store.tensors_mut(), &mut self.state.adam, &adam)?;
        store.zero_grad();
        let bad = store.non_finite();
        if !bad.is_empty() {
            return Err(Error::NonFinite {
                step: self.state.step,
                names: bad,
            });
        }
        let metrics = StepMetrics {
            step: self.state.step,
            l_con,
            l_recon,
            l_total,
            lr,
            seed: self.cfg().seed,
        };
        self.state.step += 1;
        Ok(metrics)
    }

    /// One step on a batch drawn from `data` by [`Trainer::batch_indices`].
    pub fn train_on(&mut self, data: &[AlignedTriplet]) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::contract("cannot train on an empty dataset"));
        }
        let batch: Vec<AlignedTriplet> = self
            .batch_indices(data.len())
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        self.train_step(&batch)
    }

    /// Checks that `data` matches the config's input sizes.
    pub fn check_data(&self, data: &[AlignedTriplet]) -> Result<()> {
        let cfg = self.cfg();
        for (i, t) in data.iter().enumerate() {
            t.validate()?;
            if t.size() != cfg.lores_px {
                return Err(Error::Config(format!(
                    "sample {i} has size {}, config lores_px is {}",
                    t.size(),
                    cfg.lores_px
                )));
            }
            if t.radar.channels != cfg.radar_channels
                || t.lores.channels != cfg.lores_channels
                || t.hires.channels != cfg.hires_channels
            {
                return Err(Error::Config(format!(
                    "sample {i} channel counts do not match the config"
                )));
            }
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Fused-grid token count for a batch; all samples must share a size.
    fn lores_tokens_for(&self, batch: &[AlignedTriplet]) -> Result<usize> {
        let s = batch
            .first()
            .ok_or_else(|| Error::contract("train step needs a non-empty batch"))?
            .size();
        if batch.iter().any(|t| t.size() != s) {
            return Err(Error::contract("batch samples differ in size"));
        }
        let side = s / self.patch_px;
        Ok(side * side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    #[test]
    fn space_to_depth_layout() {
        // one channel, 4x4 -> four 2x2 channels
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let out = space_to_depth2(&data, 1, 4, 4);
        assert_eq!(&out[0..4], &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(&out[4..8], &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(&out[8..12], &[4.0, 6.0, 12.0, 14.0]);
        assert_eq!(&out[12..16], &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn patch_rows_layout() {
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let rows = patch_rows(&data, 1, 4, 4, 2);
        assert_eq!(&rows[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&rows[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn mask_count_is_exact() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = draw_mask(&cfg, 16, &mut rng);
        assert_eq!(m.iter().filter(|&&b| b).count(), 12);
    }

    #[test]
    fn micro_forward_shapes() {
        let cfg = ModelConfig::micro();
        let t = Trainer::new(&cfg).unwrap();
        let data = generate(1, 2, cfg.lores_px, 3).unwrap();
        let mut g = Graph::new();
        let mask = vec![true, false, false, true];
        let out = t
            .model
            .forward(&mut g, &t.state.store, &data[0], &mask)
            .unwrap();
        assert_eq!(g.shape(out.prediction), &[4, cfg.layout().patch_dim()]);
        assert_eq!(out.fused.len(), 4);
        for z in out.z {
            assert_eq!(g.shape(z), &[cfg.encoder_dim]);
        }
    }

    #[test]
    fn targets_are_normalized() {
        let cfg = ModelConfig::micro();
        let data = generate(1, 2, cfg.lores_px, 3).unwrap();
        let [r, l, h] = fused_targets(&data[0], cfg.patch_px).unwrap();
        assert_eq!(r.shape(), &[4, 32]);
        assert_eq!(l.shape(), &[4, 48]);
        assert_eq!(h.shape(), &[4, 192]);
        let row = h.row(0);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        assert!(mean.abs() < 1e-12);
    }
}
