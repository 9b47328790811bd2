use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy)]
enum Init {
    Ones,
    Normal,
    Residual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

/// All trainable tensors. Gradients and optimizer moments share this shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Matrix,
    /// `hidden × vocab`; absent when embeddings are tied.
    pub unembed: Option<Matrix>,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl Parameters {
    pub(crate) fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let out_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        Self::build(cfg, |rows, cols, kind| match kind {
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Normal => normal(rows, cols, INIT_STD, rng),
            Init::Residual => normal(rows, cols, out_std, rng),
        })
    }

    pub(crate) fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, |rows, cols, _| Matrix::zeros(rows, cols))
    }

    fn build(cfg: &ModelConfig, mut make: impl FnMut(usize, usize, Init) -> Matrix) -> Self {
        let h = cfg.hidden();
        let f = cfg.ffn_hidden();
        let embed = make(cfg.vocab_size, h, Init::Normal);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: make(1, h, Init::Ones),
                wq: make(h, h, Init::Normal),
                wk: make(h, h, Init::Normal),
                wv: make(h, h, Init::Normal),
                wo: make(h, h, Init::Residual),
                ffn_norm: make(1, h, Init::Ones),
                w_in: make(h, f, Init::Normal),
                w_out: make(f, h, Init::Residual),
            })
            .collect();
        let unembed = (!cfg.tied_embeddings).then(|| make(h, cfg.vocab_size, Init::Normal));
        Self {
            embed,
            layers,
            final_norm: make(1, h, Init::Ones),
            unembed,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            embed: z(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    ffn_norm: z(&l.ffn_norm),
                    w_in: z(&l.w_in),
                    w_out: z(&l.w_out),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            unembed: self.unembed.as_ref().map(z),
        }
    }

    /// Tensors with their names, in declaration (= checkpoint) order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w_in", &l.w_in),
                ("w_out", &l.w_out),
            ] {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(u) = &self.unembed {
            out.push(("unembed".to_string(), u));
        }
        out
    }

    /// Mutable tensors in the same order as [`Parameters::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_in,
                &mut l.w_out,
            ]);
        }
        out.push(&mut self.final_norm);
        if let Some(u) = &mut self.unembed {
            out.push(u);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.named().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scale(&mut self, alpha: f64) {
        for m in self.tensors_mut() {
            m.scale(alpha);
        }
    }

    pub fn add_assign(&mut self, other: &Parameters) {
        let theirs: Vec<&Matrix> = other.named().into_iter().map(|(_, m)| m).collect();
        for (a, b) in self.tensors_mut().into_iter().zip(theirs) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    /// Flattened copy of every value, in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, m) in self.named() {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape("Parameters::load_flat", self.len(), flat.len()));
        }
        let mut at = 0;
        for m in self.tensors_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub(crate) fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let h = cfg.hidden();
        let f = cfg.ffn_hidden();
        let expect = |name: &str, m: &Matrix, r: usize, c: usize| -> Result<()> {
            if m.shape() != (r, c) {
                return Err(Error::shape(
                    "model parameters",
                    format!("{name} {r}x{c}"),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
            Ok(())
        };
        expect("embed", &self.embed, cfg.vocab_size, h)?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::shape("model layers", cfg.n_layers, self.layers.len()));
        }
        for l in &self.layers {
            expect("attn_norm", &l.attn_norm, 1, h)?;
            expect("wq", &l.wq, h, h)?;
            expect("wk", &l.wk, h, h)?;
            expect("wv", &l.wv, h, h)?;
            expect("wo", &l.wo, h, h)?;
            expect("ffn_norm", &l.ffn_norm, 1, h)?;
            expect("w_in", &l.w_in, h, f)?;
            expect("w_out", &l.w_out, f, h)?;
        }
        expect("final_norm", &self.final_norm, 1, h)?;
        match (&self.unembed, cfg.tied_embeddings) {
            (Some(u), false) => expect("unembed", u, h, cfg.vocab_size),
            (None, true) => Ok(()),
            _ => Err(Error::InvalidConfig("unembedding presence disagrees with tied flag".into())),
        }
    }
}
