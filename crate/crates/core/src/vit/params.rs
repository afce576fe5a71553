use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub heads: Vec<HeadParams>,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Backbone weights. Query/key/value projections are stored per head.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: ModelConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("xavier shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("normal shape")
}

impl BackboneParams {
    /// Seeded initialization: Xavier-uniform linear weights, zero biases,
    /// unit layer-norm gains, N(0, 0.02²) class token and positions.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let dh = config.head_dim();
        let hidden = config.mlp_hidden();
        let n = config.token_count();
        let patch_w = xavier(&mut rng, config.patch_dim(), d);
        let cls = normal(&mut rng, &[1, d], 0.02);
        let pos = normal(&mut rng, &[n, d], 0.02);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                heads: (0..config.heads)
                    .map(|_| HeadParams {
                        wq: xavier(&mut rng, d, dh),
                        bq: Tensor::zeros(&[dh]),
                        wk: xavier(&mut rng, d, dh),
                        bk: Tensor::zeros(&[dh]),
                        wv: xavier(&mut rng, d, dh),
                        bv: Tensor::zeros(&[dh]),
                    })
                    .collect(),
                wo: xavier(&mut rng, d, d),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                w1: xavier(&mut rng, d, hidden),
                b1: Tensor::zeros(&[hidden]),
                w2: xavier(&mut rng, hidden, d),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls,
            pos,
            blocks,
            norm_g: Tensor::ones(&[d]),
            norm_b: Tensor::zeros(&[d]),
            head_w: xavier(&mut rng, d, config.class_count),
            head_b: Tensor::zeros(&[config.class_count]),
        })
    }

    /// Parameters in canonical order with dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch.w".into(), &self.patch_w),
            ("patch.b".into(), &self.patch_b),
            ("cls".into(), &self.cls),
            ("pos".into(), &self.pos),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.ln1.g"), &b.ln1_g));
            out.push((format!("blocks.{l}.ln1.b"), &b.ln1_b));
            for (h, hp) in b.heads.iter().enumerate() {
                out.push((format!("blocks.{l}.attn.{h}.wq"), &hp.wq));
                out.push((format!("blocks.{l}.attn.{h}.bq"), &hp.bq));
                out.push((format!("blocks.{l}.attn.{h}.wk"), &hp.wk));
                out.push((format!("blocks.{l}.attn.{h}.bk"), &hp.bk));
                out.push((format!("blocks.{l}.attn.{h}.wv"), &hp.wv));
                out.push((format!("blocks.{l}.attn.{h}.bv"), &hp.bv));
            }
            out.push((format!("blocks.{l}.attn.wo"), &b.wo));
            out.push((format!("blocks.{l}.attn.bo"), &b.bo));
            out.push((format!("blocks.{l}.ln2.g"), &b.ln2_g));
            out.push((format!("blocks.{l}.ln2.b"), &b.ln2_b));
            out.push((format!("blocks.{l}.mlp.w1"), &b.w1));
            out.push((format!("blocks.{l}.mlp.b1"), &b.b1));
            out.push((format!("blocks.{l}.mlp.w2"), &b.w2));
            out.push((format!("blocks.{l}.mlp.b2"), &b.b2));
        }
        out.push(("norm.g".into(), &self.norm_g));
        out.push(("norm.b".into(), &self.norm_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable parameters in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls,
            &mut self.pos,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_g);
            out.push(&mut b.ln1_b);
            for hp in &mut b.heads {
                out.push(&mut hp.wq);
                out.push(&mut hp.bq);
                out.push(&mut hp.wk);
                out.push(&mut hp.bk);
                out.push(&mut hp.wv);
                out.push(&mut hp.bv);
            }
            out.push(&mut b.wo);
            out.push(&mut b.bo);
            out.push(&mut b.ln2_g);
            out.push(&mut b.ln2_b);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.norm_g);
        out.push(&mut self.norm_b);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let patch_w = leaf(&self.patch_w)?;
        let patch_b = leaf(&self.patch_b)?;
        let cls = leaf(&self.cls)?;
        let pos = leaf(&self.pos)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let ln1_g = leaf(&b.ln1_g)?;
            let ln1_b = leaf(&b.ln1_b)?;
            let mut heads = Vec::with_capacity(b.heads.len());
            for hp in &b.heads {
                heads.push(BoundHead {
                    wq: leaf(&hp.wq)?,
                    bq: leaf(&hp.bq)?,
                    wk: leaf(&hp.wk)?,
                    bk: leaf(&hp.bk)?,
                    wv: leaf(&hp.wv)?,
                    bv: leaf(&hp.bv)?,
                });
            }
            blocks.push(BoundBlock {
                ln1_g,
                ln1_b,
                heads,
                wo: leaf(&b.wo)?,
                bo: leaf(&b.bo)?,
                ln2_g: leaf(&b.ln2_g)?,
                ln2_b: leaf(&b.ln2_b)?,
                w1: leaf(&b.w1)?,
                b1: leaf(&b.b1)?,
                w2: leaf(&b.w2)?,
                b2: leaf(&b.b2)?,
            });
        }
        Ok(BoundParams {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g: leaf(&self.norm_g)?,
            norm_b: leaf(&self.norm_b)?,
            head_w: leaf(&self.head_w)?,
            head_b: leaf(&self.head_b)?,
        })
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::init(&self.config, 0)?;
        let ours = self.named();
        let theirs = reference.named();
        if ours.len() != theirs.len() {
            return Err(Error::Config("parameter count mismatch".into()));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "params",
                    format!("{name}: {:?} vs expected {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BoundHead {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub heads: Vec<BoundHead>,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<BoundBlock>,
    pub norm_g: Var,
    pub norm_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl BoundParams {
    /// Vars in the same order as [`BackboneParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            out.extend([b.ln1_g, b.ln1_b]);
            for h in &b.heads {
                out.extend([h.wq, h.bq, h.wk, h.bk, h.wv, h.bv]);
            }
            out.extend([b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2]);
        }
        out.extend([self.norm_g, self.norm_b, self.head_w, self.head_b]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_consistent() {
        let cfg = ModelConfig::toy();
        let a = BackboneParams::init(&cfg, 7).unwrap();
        let b = BackboneParams::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let mut t = Tape::new();
        let bound = a.bind(&mut t, false).unwrap();
        assert_eq!(bound.vars().len(), a.named().len());
        assert_eq!(a.tensors_mut_len(), a.named().len());
    }

    impl BackboneParams {
        fn tensors_mut_len(&self) -> usize {
            self.clone().tensors_mut().len()
        }
    }
}
