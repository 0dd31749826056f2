use rand_chacha::ChaCha8Rng;

use super::{ModelParams, ViTConfig, IN_CHANNELS};
use crate::error::{Error, Result};
use crate::imageproc::ImageF32;
use crate::tensor::{Scalar, Tape, Tensor, Var};

type Affine = (Var, Var);

#[derive(Clone, Debug)]
struct BlockVars {
    norm1: Affine,
    qkv: Affine,
    proj: Affine,
    norm2: Affine,
    fc1: Affine,
    fc2: Affine,
}

/// Model parameters recorded on a tape, ready for a forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    config: ViTConfig,
    vars: Vec<Var>,
    patch: Affine,
    cls: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    norm: Affine,
    extra: Option<Affine>,
    head: Affine,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[batch, num_classes]`.
    pub logits: Var,
    /// Output of every transformer block, `[batch * seq_len, embed_dim]`.
    pub block_outputs: Vec<Var>,
    /// Attention output of every block; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
    pub batch: usize,
}

/// Records every parameter of `params` as a leaf.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, requires_grad: bool) -> Bound {
    let vars = params.tensors().iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
    Bound::from_vars(params.config().clone(), vars).expect("parameter layout matches its config")
}

impl Bound {
    /// Assigns existing tape variables, given in canonical parameter order.
    pub fn from_vars(config: ViTConfig, vars: Vec<Var>) -> Result<Self> {
        config.validate()?;
        let expected = super::param_specs(&config).len();
        if vars.len() != expected {
            return Err(Error::Dimension(format!("expected {expected} parameter variables, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut pair = || (it.next().unwrap(), it.next().unwrap());
        let patch = pair();
        let (cls, pos) = pair();
        let blocks = (0..config.num_blocks())
            .map(|_| BlockVars { norm1: pair(), qkv: pair(), proj: pair(), norm2: pair(), fc1: pair(), fc2: pair() })
            .collect();
        let norm = pair();
        let extra = config.customized.then(&mut pair);
        let head = pair();
        Ok(Self { config, vars, patch, cls, pos, blocks, norm, extra, head })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Parameter variables in canonical order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Forward pass over a `[batch, H, W, 3]` image tensor.
    ///
    /// Dropout is active only when `dropout_rng` is given and the config
    /// rate is positive.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        let batch = images.shape().first().copied().unwrap_or(0);
        let expected = [batch, c.image_size, c.image_size, IN_CHANNELS];
        if images.shape() != expected || batch == 0 {
            return Err(Error::Dimension(format!(
                "expected images of shape [batch, {}, {}, {IN_CHANNELS}], got {:?}",
                c.image_size,
                c.image_size,
                images.shape()
            )));
        }
        let patches = tape.constant(patchify(images, c.patch_size)?);
        self.forward_patches(tape, patches, batch, dropout_rng)
    }

    /// Forward pass from already patchified input `[batch * num_patches, patch_dim]`.
    pub fn forward_patches<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        patches: Var,
        batch: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        let d = c.embed_dim;
        let rate = c.dropout;
        let mut drop = |tape: &mut Tape<T>, x: Var| match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => tape.dropout(x, rate, rng),
            _ => x,
        };

        let emb = linear(tape, patches, self.patch)?;
        let mut x = tape.embed_tokens(emb, self.cls, self.pos, batch)?;
        x = drop(tape, x);

        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = tape.layer_norm(x, blk.norm1.0, blk.norm1.1)?;
            let qkv = linear(tape, h, blk.qkv)?;
            let q = tape.narrow_cols(qkv, 0, d)?;
            let k = tape.narrow_cols(qkv, d, d)?;
            let v = tape.narrow_cols(qkv, 2 * d, d)?;
            let a = tape.attention(q, k, v, batch, c.heads)?;
            attention.push(a);
            let a = linear(tape, a, blk.proj)?;
            let a = drop(tape, a);
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, blk.norm2.0, blk.norm2.1)?;
            let h = linear(tape, h, blk.fc1)?;
            let h = tape.gelu(h);
            let h = linear(tape, h, blk.fc2)?;
            let h = drop(tape, h);
            x = tape.add(x, h)?;
            block_outputs.push(x);
        }

        let cls_rows: Vec<usize> = (0..batch).map(|b| b * c.seq_len()).collect();
        let mut z = tape.gather_rows(x, &cls_rows)?;
        z = tape.layer_norm(z, self.norm.0, self.norm.1)?;
        if let Some(extra) = self.extra {
            z = linear(tape, z, extra)?;
            z = tape.gelu(z);
        }
        let logits = linear(tape, z, self.head)?;
        Ok(ForwardTrace { logits, block_outputs, attention, batch })
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, (w, b): Affine) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

impl<T: Scalar> ModelParams<T> {
    /// Logits `[batch, num_classes]` for a `[batch, H, W, 3]` image tensor.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, self, false);
        let trace = bound.forward(&mut tape, images, None)?;
        Ok(tape.value(trace.logits).clone())
    }
}

/// Stacks equally sized RGB images into a `[batch, H, W, 3]` tensor.
pub fn images_to_batch(images: &[&ImageF32]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Contract("cannot batch zero images".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w * IN_CHANNELS);
    for img in images {
        if (img.height(), img.width(), img.channels()) != (h, w, IN_CHANNELS) {
            return Err(Error::Dimension(format!(
                "expected {h}x{w}x{IN_CHANNELS} images, got {}x{}x{}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), h, w, IN_CHANNELS], data)
}

/// Splits `[batch, H, W, C]` images into non-overlapping `p x p` patches.
///
/// The result is `[batch * (H/p) * (W/p), p * p * C]`; patches are in
/// row-major grid order and each patch row holds its pixels in row-major
/// order with channels innermost.
pub fn patchify<T: Scalar>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let &[batch, h, w, ch] = images.shape() else {
        return Err(Error::Dimension(format!("patchify expects [batch, H, W, C], got {:?}", images.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Dimension(format!("{h}x{w} images do not tile into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let start = ((b * h + gy * p + py) * w + gx * p) * ch;
                    out.extend_from_slice(&src[start..start + p * ch]);
                }
            }
        }
    }
    Tensor::new(vec![batch * gh * gw, p * p * ch], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::seed;
    use crate::tensor::{grad_check, DEFAULT_STEP};
    use rand::Rng;

    fn random_images(batch: usize, size: usize, seed_value: u64) -> Tensor<f32> {
        let mut rng = seed::rng(seed_value, &[]);
        Tensor::from_fn(&[batch, size, size, 3], |_| rng.random::<f32>())
    }

    #[test]
    fn patchify_layout() {
        // 1 image, 4x4, one channel holding its flat pixel index
        let imgs = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let p = patchify(&imgs, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
        assert!(patchify(&imgs, 3).is_err());
    }

    #[test]
    fn logits_shape_and_softmax() {
        let params = build_model(&ViTConfig::tiny(), 0).unwrap();
        let logits = params.forward(&random_images(2, 8, 1)).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert!(logits.is_finite());
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(logits);
        let p = tape.softmax(l, 1).unwrap();
        for row in tape.value(p).data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_input_dims_name_expected_shape() {
        let params = build_model(&ViTConfig::tiny(), 0).unwrap();
        let err = params.forward(&random_images(1, 12, 0)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(err.to_string().contains("[batch, 8, 8, 3]"), "{err}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = ViTConfig::desk();
        let params = build_model(&c, 2).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, false);
        let trace = bound.forward(&mut tape, &random_images(2, 64, 3), None).unwrap();
        assert_eq!(trace.attention.len(), 3);
        for &a in &trace.attention {
            let probs = tape.attention_probs(a).unwrap();
            assert_eq!(probs.len(), 2 * c.heads * c.seq_len() * c.seq_len());
            for row in probs.chunks(c.seq_len()) {
                assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn patch_permutation_with_positions_preserves_logits() {
        let c = ViTConfig { image_size: 16, patch_size: 4, embed_dim: 16, depth: 2, heads: 4, ..ViTConfig::default() };
        let params = build_model(&c, 5).unwrap().cast::<f64>();
        let images = random_images(2, 16, 6).cast::<f64>();
        let patches = patchify(&images, 4).unwrap();
        let n = c.num_patches();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();

        let run = |params: &ModelParams<f64>, patches: Tensor<f64>| {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, params, false);
            let pv = tape.constant(patches);
            let t = bound.forward_patches(&mut tape, pv, 2, None).unwrap();
            tape.value(t.logits).clone()
        };
        let base = run(&params, patches.clone());

        let dim = c.patch_dim();
        let mut permuted = patches.clone();
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                let s = (b * n + src) * dim;
                let t = (b * n + dst) * dim;
                permuted.data_mut()[t..t + dim].copy_from_slice(&patches.data()[s..s + dim]);
            }
        }
        let mut moved = params.clone();
        let pos = params.get("pos_embed").unwrap().clone();
        let d = c.embed_dim;
        let target = moved.get_mut("pos_embed").unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            target.data_mut()[(dst + 1) * d..(dst + 2) * d].copy_from_slice(&pos.data()[(src + 1) * d..(src + 2) * d]);
        }
        let shuffled = run(&moved, permuted);
        for (a, b) in base.data().iter().zip(shuffled.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let c = ViTConfig::tiny();
        let mut params = build_model(&c, 4).unwrap();
        let zeroed: Vec<usize> = (0..params.specs().len())
            .filter(|&i| {
                let name = &params.specs()[i].name;
                name.starts_with("blocks.1.") && !name.ends_with("gamma")
            })
            .collect();
        for i in zeroed {
            params.tensors_mut()[i].data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, false);
        let trace = bound.forward(&mut tape, &random_images(2, 8, 9), None).unwrap();
        assert_eq!(tape.value(trace.block_outputs[1]), tape.value(trace.block_outputs[0]));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let c = ViTConfig::desk();
        let params = build_model(&c, 11).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true);
        let trace = bound.forward(&mut tape, &random_images(4, 64, 12), None).unwrap();
        let loss = tape.cross_entropy(trace.logits, &[0, 1, 2, 0]).unwrap();
        tape.backward(loss).unwrap();
        for (s, &v) in params.specs().iter().zip(bound.vars()) {
            let g = tape.grad(v).unwrap_or_else(|| panic!("{} unreached", s.name));
            assert!(g.iter().any(|&x| x != 0.0), "{} has an all-zero gradient", s.name);
        }
    }

    #[test]
    fn dropout_only_with_rng() {
        let c = ViTConfig { dropout: 0.5, ..ViTConfig::tiny() };
        let params = build_model(&c, 1).unwrap();
        let images = random_images(2, 8, 2);
        let run = |rng: Option<&mut ChaCha8Rng>| {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, false);
            let t = bound.forward(&mut tape, &images, rng).unwrap();
            tape.value(t.logits).clone()
        };
        assert_eq!(run(None), params.forward(&images).unwrap());
        assert_ne!(run(Some(&mut seed::rng(0, &[]))), run(None));
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let c = ViTConfig::tiny();
        let params = build_model(&c, 21).unwrap().cast::<f64>();
        let images = random_images(2, 8, 22).cast::<f64>();
        let report = grad_check(
            |tape, vars| {
                let bound = Bound::from_vars(c.clone(), vars.to_vec())?;
                let trace = bound.forward(tape, &images, None)?;
                tape.cross_entropy(trace.logits, &[0, 2])
            },
            params.tensors(),
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
