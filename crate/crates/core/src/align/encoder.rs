//! Trainable satellite encoder: a two-layer per-patch map with a learned
//! pooling head.
//!
//! Each patch feature `x` goes through `u = W2 tanh(W1 x + b1)`; patch
//! embeddings are `u / |u|`. The tile embedding normalizes the
//! softmax(pool)-weighted mean of the unnormalized patch outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::AlignError;
use crate::corpus::SatTileRecord;
use crate::frozen::{dot, l2_norm, EmbeddingVec, MIN_NORM};

/// Encoder parameters stored as one flat vector:
/// `[W1 (H x F) | b1 (H) | W2 (D x H) | pool (P)]`, matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SatEncoderParams {
    feature_dim: usize,
    hidden_dim: usize,
    embed_dim: usize,
    n_patches: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub patch_embs: Vec<EmbeddingVec>,
    pub image_emb: EmbeddingVec,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<f64>,
    hidden: Vec<f64>,
    outputs: Vec<f64>,
    output_norms: Vec<f64>,
    pooled: Vec<f64>,
    pooled_norm: f64,
    weights: Vec<f64>,
}

impl SatEncoderParams {
    pub fn param_count(feature_dim: usize, hidden_dim: usize, embed_dim: usize, n_patches: usize) -> usize {
        hidden_dim * feature_dim + hidden_dim + embed_dim * hidden_dim + n_patches
    }

    pub fn zeros(feature_dim: usize, hidden_dim: usize, embed_dim: usize, n_patches: usize) -> Self {
        Self {
            feature_dim,
            hidden_dim,
            embed_dim,
            n_patches,
            data: vec![0.0; Self::param_count(feature_dim, hidden_dim, embed_dim, n_patches)],
        }
    }

    /// Scaled-Gaussian initialization (std `1/sqrt(fan_in)`), zero biases and
    /// uniform pooling.
    pub fn init(
        feature_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        n_patches: usize,
        seed: u64,
    ) -> Self {
        let mut p = Self::zeros(feature_dim, hidden_dim, embed_dim, n_patches);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, 1.0 / (feature_dim as f64).sqrt()).expect("valid std");
        for w in p.w1_mut() {
            *w = n1.sample(&mut rng);
        }
        let n2 = Normal::new(0.0, 1.0 / (hidden_dim as f64).sqrt()).expect("valid std");
        for w in p.w2_mut() {
            *w = n2.sample(&mut rng);
        }
        p
    }

    /// Rebuilds parameters from a flat vector in the layout above.
    pub fn from_flat(
        feature_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        n_patches: usize,
        data: Vec<f64>,
    ) -> Result<Self, AlignError> {
        let want = Self::param_count(feature_dim, hidden_dim, embed_dim, n_patches);
        if data.len() != want {
            return Err(AlignError::Shape(format!(
                "expected {want} parameters, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AlignError::Shape("non-finite parameter".into()));
        }
        Ok(Self {
            feature_dim,
            hidden_dim,
            embed_dim,
            n_patches,
            data,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = self.hidden_dim * self.feature_dim;
        let b1 = w1 + self.hidden_dim;
        let w2 = b1 + self.embed_dim * self.hidden_dim;
        [0, w1, b1, w2]
    }

    pub fn w1(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[0]..o[1]]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[1]..o[2]]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[2]..o[3]]
    }

    pub fn pool(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[3]..]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[0]..o[1]]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[1]..o[2]]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[2]..o[3]]
    }

    pub fn pool_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[3]..]
    }

    fn check_tile(&self, tile: &SatTileRecord) -> Result<(), AlignError> {
        if tile.feature_dim() != self.feature_dim {
            return Err(AlignError::Dim {
                expected: self.feature_dim,
                got: tile.feature_dim(),
            });
        }
        if tile.n_patches() != self.n_patches {
            return Err(AlignError::Shape(format!(
                "tile {} has {} patches, encoder expects {}",
                tile.id,
                tile.n_patches(),
                self.n_patches
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tile: &SatTileRecord) -> Result<EncoderOutput, AlignError> {
        self.forward_cached(tile).map(|(out, _)| out)
    }

    pub fn forward_cached(
        &self,
        tile: &SatTileRecord,
    ) -> Result<(EncoderOutput, ForwardCache), AlignError> {
        self.check_tile(tile)?;
        let inputs: Vec<f64> = tile.features().iter().map(|&v| v as f64).collect();
        self.forward_raw(inputs)
    }

    fn forward_raw(&self, inputs: Vec<f64>) -> Result<(EncoderOutput, ForwardCache), AlignError> {
        let (f, h, d, p) = (self.feature_dim, self.hidden_dim, self.embed_dim, self.n_patches);
        let (w1, b1, w2) = (self.w1(), self.b1(), self.w2());
        let mut hidden = vec![0.0; p * h];
        let mut outputs = vec![0.0; p * d];
        for k in 0..p {
            let x = &inputs[k * f..(k + 1) * f];
            let a = &mut hidden[k * h..(k + 1) * h];
            for (r, ar) in a.iter_mut().enumerate() {
                *ar = (dot(&w1[r * f..(r + 1) * f], x) + b1[r]).tanh();
            }
            let u = &mut outputs[k * d..(k + 1) * d];
            for (r, ur) in u.iter_mut().enumerate() {
                *ur = dot(&w2[r * h..(r + 1) * h], a);
            }
        }

        let weights = softmax(self.pool());
        let mut pooled = vec![0.0; d];
        for (k, w) in weights.iter().enumerate() {
            for (acc, u) in pooled.iter_mut().zip(&outputs[k * d..(k + 1) * d]) {
                *acc += w * u;
            }
        }

        let mut output_norms = Vec::with_capacity(p);
        let mut patch_embs = Vec::with_capacity(p);
        for k in 0..p {
            let u = &outputs[k * d..(k + 1) * d];
            let norm = l2_norm(u);
            if norm < MIN_NORM || !norm.is_finite() {
                return Err(AlignError::DegenerateOutput(format!("patch {k} output norm {norm}")));
            }
            output_norms.push(norm);
            patch_embs.push(EmbeddingVec::normalized(u.to_vec())?);
        }
        let pooled_norm = l2_norm(&pooled);
        if pooled_norm < MIN_NORM || !pooled_norm.is_finite() {
            return Err(AlignError::DegenerateOutput(format!(
                "pooled output norm {pooled_norm}"
            )));
        }
        let image_emb = EmbeddingVec::normalized(pooled.clone())?;
        Ok((
            EncoderOutput {
                patch_embs,
                image_emb,
            },
            ForwardCache {
                inputs,
                hidden,
                outputs,
                output_norms,
                pooled,
                pooled_norm,
                weights,
            },
        ))
    }

    /// Accumulates into `grad` (same layout as the parameters) the gradient
    /// given upstream gradients on the unit patch embeddings and/or the unit
    /// tile embedding.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_patch: Option<&[Vec<f64>]>,
        d_image: Option<&[f64]>,
        grad: &mut [f64],
    ) {
        let (f, h, d, p) = (self.feature_dim, self.hidden_dim, self.embed_dim, self.n_patches);
        let w2 = self.w2();
        let o = self.offsets();

        // Through the tile-level normalization and pooling.
        let mut d_pooled = vec![0.0; d];
        if let Some(gs) = d_image {
            let s: Vec<f64> = cache.pooled.iter().map(|v| v / cache.pooled_norm).collect();
            let proj = dot(&s, gs);
            for ((dp, g), sv) in d_pooled.iter_mut().zip(gs).zip(&s) {
                *dp = (g - sv * proj) / cache.pooled_norm;
            }
            let d_weight: Vec<f64> = (0..p)
                .map(|k| dot(&d_pooled, &cache.outputs[k * d..(k + 1) * d]))
                .collect();
            let mean = dot(&cache.weights, &d_weight);
            let d_pool = &mut grad[o[3]..];
            for k in 0..p {
                d_pool[k] += cache.weights[k] * (d_weight[k] - mean);
            }
        }

        let mut du = vec![0.0; d];
        let mut da = vec![0.0; h];
        for k in 0..p {
            let u = &cache.outputs[k * d..(k + 1) * d];
            let mut active = false;
            if d_image.is_some() {
                for (x, dp) in du.iter_mut().zip(&d_pooled) {
                    *x = cache.weights[k] * dp;
                }
                active = true;
            } else {
                du.iter_mut().for_each(|x| *x = 0.0);
            }
            if let Some(ge) = d_patch.map(|g| &g[k]) {
                if ge.iter().any(|&v| v != 0.0) {
                    let norm = cache.output_norms[k];
                    let proj = dot(u, ge) / norm;
                    for ((x, g), uv) in du.iter_mut().zip(ge).zip(u) {
                        *x += (g - uv / norm * proj) / norm;
                    }
                    active = true;
                }
            }
            if !active {
                continue;
            }

            let a = &cache.hidden[k * h..(k + 1) * h];
            let x_in = &cache.inputs[k * f..(k + 1) * f];
            {
                let gw2 = &mut grad[o[2]..o[3]];
                for (r, dur) in du.iter().enumerate() {
                    for (c, av) in a.iter().enumerate() {
                        gw2[r * h + c] += dur * av;
                    }
                }
            }
            for (c, dac) in da.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (r, dur) in du.iter().enumerate() {
                    acc += w2[r * h + c] * dur;
                }
                *dac = acc * (1.0 - a[c] * a[c]);
            }
            {
                let (gw1, rest) = grad[..o[2]].split_at_mut(o[1]);
                for (r, dh) in da.iter().enumerate() {
                    rest[r] += dh;
                    for (c, xv) in x_in.iter().enumerate() {
                        gw1[r * f + c] += dh * xv;
                    }
                }
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, TileSpec};

    fn tile(features: Vec<f32>, f: usize) -> SatTileRecord {
        let spec = TileSpec::new(GeoPoint::new(0.0, 0.0).unwrap(), 1.0, 32, 16).unwrap();
        SatTileRecord::new("t", spec, 0, 3, f, features).unwrap()
    }

    #[test]
    fn zero_hidden_weights_give_identical_patches() {
        let mut p = SatEncoderParams::init(3, 4, 5, 4, 1);
        p.w1_mut().iter_mut().for_each(|w| *w = 0.0);
        p.b1_mut().copy_from_slice(&[0.3, -0.2, 0.9, 0.1]);
        let t = tile((0..12).map(|v| v as f32).collect(), 3);
        let out = p.forward(&t).unwrap();
        let a: Vec<f64> = p.b1().iter().map(|b| b.tanh()).collect();
        let u: Vec<f64> = (0..5).map(|r| dot(&p.w2()[r * 4..(r + 1) * 4], &a)).collect();
        let want = EmbeddingVec::normalized(u).unwrap();
        for e in &out.patch_embs {
            for (x, y) in e.as_slice().iter().zip(want.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_are_unit_norm() {
        let p = SatEncoderParams::init(3, 8, 6, 4, 7);
        let t = tile((0..12).map(|v| (v as f32 * 0.37).sin()).collect(), 3);
        let out = p.forward(&t).unwrap();
        for e in out.patch_embs.iter().chain(std::iter::once(&out.image_emb)) {
            assert!((l2_norm(e.as_slice()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn patch_permutation_with_uniform_pooling() {
        let p = SatEncoderParams::init(3, 8, 6, 4, 3);
        let feats: Vec<f32> = (0..12).map(|v| (v as f32 * 0.71).cos()).collect();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &k in &perm {
            permuted.extend_from_slice(&feats[k * 3..(k + 1) * 3]);
        }
        let a = p.forward(&tile(feats, 3)).unwrap();
        let b = p.forward(&tile(permuted, 3)).unwrap();
        for (slot, &k) in perm.iter().enumerate() {
            assert_eq!(b.patch_embs[slot], a.patch_embs[k]);
        }
        for (x, y) in a.image_emb.as_slice().iter().zip(b.image_emb.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let p = SatEncoderParams::init(4, 8, 6, 4, 3);
        assert!(matches!(
            p.forward(&tile(vec![0.5; 12], 3)),
            Err(AlignError::Dim { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn flat_layout_round_trip() {
        let p = SatEncoderParams::init(3, 4, 5, 4, 11);
        let q = SatEncoderParams::from_flat(3, 4, 5, 4, p.as_slice().to_vec()).unwrap();
        assert_eq!(p, q);
        assert!(SatEncoderParams::from_flat(3, 4, 5, 4, vec![0.0; 3]).is_err());
        assert_eq!(p.len(), 12 + 4 + 20 + 4);
    }
}
