//! Temporal encoder: self-attention across frames followed by hierarchical
//! attentive blending into per-frame context vectors.
//!
//! Attention: `out = a·softmax(Q·Kᵀ/√F)·(X·Wv) + r·X` with `Q = X·Wq`,
//! `K = X·Wk`. At initialization `Wq = Wk = 0`, `Wv = I` and `a = r = 0.5`,
//! so every frame starts as half itself and half the sequence mean, and a
//! single frame passes through unchanged.
//!
//! Blending: features are reduced in groups of three consecutive entries
//! (a tail group may hold two or one) until one remains. Within a group the
//! weights are `softmax(v·h_i + pos[slot_i])`, with per-level `v` and `pos`.
//! A final linear map takes the blend from F to C dimensions.
//!
//! Per-frame contexts blend a window of `min(T, window)` frames centred on
//! the target; indices past either end repeat the boundary frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{init_linear, linear, Init};
use crate::numeric::{Bound, Graph, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Per-frame feature size F.
    pub feature: usize,
    /// Context size C.
    pub context: usize,
    pub window: usize,
    /// Number of distinct blend levels; deeper trees reuse the last one.
    pub levels: usize,
    /// Initial positional score of the middle slot of each group.
    pub centre_bias: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature: 128,
            context: 256,
            window: 9,
            levels: 4,
            centre_bias: 4f64.ln(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    cfg: EncoderConfig,
    prefix: String,
}

/// Group boundaries `(start, end)` for one level over `n` entries.
pub fn groups(n: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(3).map(|s| (s, (s + 3).min(n))).collect()
}

/// Frame indices of the window for target `t` in a sequence of `len`.
pub fn window_indices(t: usize, len: usize, window: usize) -> Vec<usize> {
    let w = window.min(len);
    let half = (w / 2) as isize;
    (0..w as isize)
        .map(|k| (t as isize - half + k).clamp(0, len as isize - 1) as usize)
        .collect()
}

impl TemporalEncoder {
    pub fn new(cfg: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        if cfg.feature == 0 || cfg.context == 0 || cfg.window == 0 || cfg.levels == 0 {
            return Err(Error::Config(format!("encoder extents must be positive, got {cfg:?}")));
        }
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn name(&self, item: &str) -> String {
        format!("{}{item}", self.prefix)
    }

    fn level_name(&self, level: usize, item: &str) -> String {
        let l = level.min(self.cfg.levels - 1);
        format!("{}hafi.{l}.{item}", self.prefix)
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let f = self.cfg.feature;
        let mut p = ParamSet::new();
        p.insert(self.name("moca.q"), Tensor::zeros(&[f, f]));
        p.insert(self.name("moca.k"), Tensor::zeros(&[f, f]));
        p.insert(self.name("moca.v"), Tensor::eye(f));
        p.insert(self.name("moca.attn"), Tensor::full(&[1], T::lit(0.5)));
        p.insert(self.name("moca.residual"), Tensor::full(&[1], T::lit(0.5)));
        for l in 0..self.cfg.levels {
            p.insert(self.level_name(l, "v"), Tensor::zeros(&[f]));
            let c = T::lit(self.cfg.centre_bias);
            p.insert(
                self.level_name(l, "pos"),
                Tensor::from_vec(&[3], vec![T::zero(), c, T::zero()]).expect("3 entries"),
            );
        }
        init_linear(&mut p, &self.name("hafi.out"), f, self.cfg.context, Init::Scaled(1.0), rng);
        p
    }

    /// `(T, F)` → `(T, F)`.
    pub fn moca_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.cfg.feature {
            return Err(shape_err("moca", &s, &[0, self.cfg.feature]));
        }
        let q = g.matmul(x, p.get(&self.name("moca.q"))?)?;
        let k = g.matmul(x, p.get(&self.name("moca.k"))?)?;
        let v = g.matmul(x, p.get(&self.name("moca.v"))?)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, T::one() / T::from_usize_lossy(self.cfg.feature).sqrt())?;
        let attn = g.softmax(logits)?;
        let mixed = g.matmul(attn, v)?;
        let a = g.expand(p.get(&self.name("moca.attn"))?, &s)?;
        let r = g.expand(p.get(&self.name("moca.residual"))?, &s)?;
        let mixed = g.mul(a, mixed)?;
        let res = g.mul(r, x)?;
        g.add(mixed, res)
    }

    /// Attention matrix of [`Self::moca_var`], `(T, T)`.
    pub fn attention<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.filter_prefix(&self.prefix).bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let q = g.matmul(xv, p.get(&self.name("moca.q"))?)?;
        let k = g.matmul(xv, p.get(&self.name("moca.k"))?)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, T::one() / T::from_usize_lossy(self.cfg.feature).sqrt())?;
        let attn = g.softmax(logits)?;
        Ok(g.value(attn).clone())
    }

    /// Hierarchical blend of `(B, n, F)` down to `(B, F)` (before the final
    /// linear map).
    pub fn blend_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[2] != self.cfg.feature {
            return Err(shape_err("hafi", &s, &[0, 0, self.cfg.feature]));
        }
        let (b, f) = (s[0], s[2]);
        let mut h = h;
        let mut n = s[1];
        let mut level = 0;
        while n > 1 {
            let v = g.reshape(p.get(&self.level_name(level, "v"))?, &[f, 1])?;
            let flat = g.reshape(h, &[b * n, f])?;
            let scores = g.matmul(flat, v)?;
            let scores = g.reshape(scores, &[b, n])?;
            let slots: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let pos = g.index_select(p.get(&self.level_name(level, "pos"))?, 0, &slots)?;
            let scores = g.add(scores, pos)?;
            let mut out = Vec::new();
            for (start, end) in groups(n) {
                let len = end - start;
                let hs = g.slice(h, 1, start, end)?;
                if len == 1 {
                    out.push(hs);
                    continue;
                }
                let sc = g.slice(scores, 1, start, end)?;
                let w = g.softmax(sc)?;
                let w = g.reshape(w, &[b, 1, len])?;
                out.push(g.bmm(w, hs)?);
            }
            h = g.concat(&out, 1)?;
            n = out.len();
            level += 1;
        }
        g.reshape(h, &[b, f])
    }

    /// `(B, n, F)` → `(B, C)`.
    pub fn hafi_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        let blended = self.blend_var(g, p, h)?;
        linear(g, p, &self.name("hafi.out"), blended)
    }

    /// Per-frame contexts `(T, C)` for features `(T, F)`.
    pub fn encode_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let h = self.moca_var(g, p, x)?;
        let w = self.cfg.window.min(t);
        let idx: Vec<usize> = (0..t).flat_map(|i| window_indices(i, t, self.cfg.window)).collect();
        let win = g.index_select(h, 0, &idx)?;
        let win = g.reshape(win, &[t, w, self.cfg.feature])?;
        self.hafi_var(g, p, win)
    }

    pub fn encode<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.filter_prefix(&self.prefix).bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let c = self.encode_var(&mut g, &p, xv)?;
        Ok(g.value(c).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_layout() {
        assert_eq!(groups(9), vec![(0, 3), (3, 6), (6, 9)]);
        assert_eq!(groups(5), vec![(0, 3), (3, 5)]);
        assert_eq!(groups(4), vec![(0, 3), (3, 4)]);
        assert_eq!(groups(1), vec![(0, 1)]);
    }

    #[test]
    fn windows_replicate_edges() {
        assert_eq!(window_indices(0, 16, 9), vec![0, 0, 0, 0, 0, 1, 2, 3, 4]);
        assert_eq!(window_indices(8, 16, 9), vec![4, 5, 6, 7, 8, 9, 10, 11, 12]);
        assert_eq!(window_indices(15, 16, 9), vec![11, 12, 13, 14, 15, 15, 15, 15, 15]);
        assert_eq!(window_indices(0, 1, 9), vec![0]);
        assert_eq!(window_indices(1, 4, 9), vec![0, 0, 1, 2]);
    }
}
