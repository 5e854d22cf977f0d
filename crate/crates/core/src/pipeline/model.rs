use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mvas::{mvas_block, MvasBlockParams};
use crate::optim::Parameter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{ModelConfig, StageConfig};

/// One value per pyramid stage, finest first.
pub type Pyramid<X> = [X; 3];

/// Convolution weight `[out, in, kh, kw]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<P> {
    pub w: P,
    pub b: P,
}

impl<P> Conv<P> {
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&P) -> Result<Q, E>) -> Result<Conv<Q>, E> {
        Ok(Conv {
            w: f(&self.w)?,
            b: f(&self.b)?,
        })
    }
}

impl<T: Scalar> Conv<Tensor<T>> {
    /// He-normal weights, zero bias.
    pub fn he(c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        Conv {
            w: Tensor::randn(vec![c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
            b: Tensor::zeros(vec![c_out]),
        }
    }

    fn with_random_bias(mut self, scale: f64, rng: &mut impl Rng) -> Self {
        let n = self.b.numel();
        self.b = Tensor::uniform(vec![n], -scale, scale, rng);
        self
    }
}

/// Frozen encoder: a stride-2 stem, then three stages of
/// `conv3x3/s2, relu, conv3x3/s1, relu`.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher<T> {
    pub stem: Conv<Tensor<T>>,
    pub stages: Pyramid<[Conv<Tensor<T>>; 2]>,
}

impl<T: Scalar> Teacher<T> {
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let stem = Conv::he(3, cfg.stem_channels, 3, rng).with_random_bias(0.1, rng);
        let ins = [cfg.stem_channels, cfg.channels[0], cfg.channels[1]];
        let stages = [0, 1, 2].map(|j| {
            let c = cfg.channels[j];
            [
                Conv::he(ins[j], c, 3, rng).with_random_bias(0.1, rng),
                Conv::he(c, c, 3, rng).with_random_bias(0.1, rng),
            ]
        });
        Teacher { stem, stages }
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("teacher.stem.w".to_string(), &self.stem.w), ("teacher.stem.b".to_string(), &self.stem.b)];
        for (j, stage) in self.stages.iter().enumerate() {
            for (i, conv) in stage.iter().enumerate() {
                out.push((format!("teacher.s{}.conv{i}.w", j + 1), &conv.w));
                out.push((format!("teacher.s{}.conv{i}.b", j + 1), &conv.b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("teacher.stem.w".to_string(), &mut self.stem.w),
            ("teacher.stem.b".to_string(), &mut self.stem.b),
        ];
        for (j, stage) in self.stages.iter_mut().enumerate() {
            for (i, conv) in stage.iter_mut().enumerate() {
                out.push((format!("teacher.s{}.conv{i}.w", j + 1), &mut conv.w));
                out.push((format!("teacher.s{}.conv{i}.b", j + 1), &mut conv.b));
            }
        }
        out
    }

    /// Stage features of `images: [n, 3, H, W]`, each `[n, c_j, h_j, w_j]`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Pyramid<Tensor<T>>> {
        let mut tape = Tape::new();
        let bind = |tape: &mut Tape<T>, c: &Conv<Tensor<T>>| -> Result<Conv<Var>> { c.try_map(&mut |t| tape.constant(t.clone())) };
        let x = tape.constant(images.clone())?;
        let stem = bind(&mut tape, &self.stem)?;
        let mut h = tape.conv2d(x, stem.w, Some(stem.b), 2, 1)?;
        h = tape.relu(h)?;
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            for (i, conv) in stage.iter().enumerate() {
                let c = bind(&mut tape, conv)?;
                h = tape.conv2d(h, c.w, Some(c.b), if i == 0 { 2 } else { 1 }, 1)?;
                h = tape.relu(h)?;
            }
            outs.push(tape.value(h).clone());
        }
        let [a, b, c]: [Tensor<T>; 3] = outs.try_into().expect("three stages");
        Ok([a, b, c])
    }
}

/// Downsample-concat-project fusion of the enhanced pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct Fpn<P> {
    pub down1: Conv<P>,
    pub down2: Conv<P>,
    pub project: Conv<P>,
}

/// Trainable part of the model: MVAS stages, FPN fusion and decoder.
///
/// `decoder[0]` produces the coarsest stage; `decoder[2]` the finest.
#[derive(Debug, Clone, PartialEq)]
pub struct Student<P> {
    pub mvas: Pyramid<Vec<MvasBlockParams<P>>>,
    pub fpn: Fpn<P>,
    pub decoder: [[Conv<P>; 2]; 3],
}

/// Field names inside one MVAS block, in visit order.
pub const BLOCK_FIELDS: [&str; 12] = [
    "qkv.wq",
    "qkv.wk",
    "qkv.wv",
    "mlp_in.w",
    "mlp_in.b",
    "mlp_out.w",
    "mlp_out.b",
    "norm_attn.gamma",
    "norm_attn.beta",
    "norm_mlp.gamma",
    "norm_mlp.beta",
    "positional",
];

impl<P> Student<P> {
    /// Maps every field; the flag is false only for positional tables.
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&P, bool) -> Result<Q, E>) -> Result<Student<Q>, E> {
        let mut mvas: Vec<Vec<MvasBlockParams<Q>>> = Vec::with_capacity(3);
        for stage in &self.mvas {
            mvas.push(stage.iter().map(|b| b.try_map(f)).collect::<Result<_, E>>()?);
        }
        let mut conv = |c: &Conv<P>| c.try_map(&mut |p| f(p, true));
        let fpn = Fpn {
            down1: conv(&self.fpn.down1)?,
            down2: conv(&self.fpn.down2)?,
            project: conv(&self.fpn.project)?,
        };
        let mut decoder = Vec::with_capacity(3);
        for [c0, c1] in &self.decoder {
            decoder.push([conv(c0)?, conv(c1)?]);
        }
        Ok(Student {
            mvas: mvas.try_into().ok().expect("three stages"),
            fpn,
            decoder: decoder.try_into().ok().expect("three stages"),
        })
    }

    /// Visits every field with its name and trainable flag.
    pub fn visit_named<'a>(&'a self, f: &mut impl FnMut(String, &'a P, bool)) {
        for (j, stage) in self.mvas.iter().enumerate() {
            for (n, block) in stage.iter().enumerate() {
                let mut i = 0;
                block.visit(&mut |p, t| {
                    f(format!("mvas.s{}.b{n}.{}", j + 1, BLOCK_FIELDS[i]), p, t);
                    i += 1;
                });
            }
        }
        for (name, c) in [("down1", &self.fpn.down1), ("down2", &self.fpn.down2), ("project", &self.fpn.project)] {
            f(format!("fpn.{name}.w"), &c.w, true);
            f(format!("fpn.{name}.b"), &c.b, true);
        }
        for (d, stage) in self.decoder.iter().enumerate() {
            for (i, c) in stage.iter().enumerate() {
                f(format!("decoder.d{d}.conv{i}.w"), &c.w, true);
                f(format!("decoder.d{d}.conv{i}.b"), &c.b, true);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut P, bool)) {
        for stage in self.mvas.iter_mut() {
            for block in stage.iter_mut() {
                block.visit_mut(f);
            }
        }
        for c in [&mut self.fpn.down1, &mut self.fpn.down2, &mut self.fpn.project] {
            f(&mut c.w, true);
            f(&mut c.b, true);
        }
        for stage in self.decoder.iter_mut() {
            for c in stage.iter_mut() {
                f(&mut c.w, true);
                f(&mut c.b, true);
            }
        }
    }
}

impl<T: Scalar> Student<Tensor<T>> {
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let mvas = [0, 1, 2].map(|j| {
            let side = cfg.stage_side(j);
            (0..cfg.stages[j].blocks)
                .map(|_| MvasBlockParams::random(side, side, c[j], rng))
                .collect()
        });
        let fpn = Fpn {
            down1: Conv::he(c[0], c[1], 3, rng),
            down2: Conv::he(2 * c[1], c[2], 3, rng),
            project: Conv::he(2 * c[2], cfg.bottleneck, 1, rng),
        };
        let decoder = [
            [Conv::he(cfg.bottleneck, c[2], 3, rng), Conv::he(c[2], c[2], 3, rng)],
            [Conv::he(c[2], c[1], 3, rng), Conv::he(c[1], c[1], 3, rng)],
            [Conv::he(c[1], c[0], 3, rng), Conv::he(c[0], c[0], 3, rng)],
        ];
        Student { mvas, fpn, decoder }
    }

    /// Binds every field as a tape leaf; positional tables never require grad.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Student<Var>> {
        self.try_map(&mut |t, flag| tape.leaf(t.clone(), trainable && flag))
    }
}

impl<T: Scalar> Student<Parameter<T>> {
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Student<Var>> {
        self.try_map(&mut |p, flag| tape.leaf(p.tensor.clone(), trainable && flag))
    }

    pub fn tensors(&self) -> Student<Tensor<T>> {
        self.try_map(&mut |p, _| Ok::<_, Error>(p.tensor.clone())).expect("infallible")
    }
}

/// Teacher, student and the config that shaped them.
#[derive(Debug, Clone)]
pub struct MvadModel<T> {
    pub config: ModelConfig,
    pub teacher: Teacher<T>,
    pub student: Student<Parameter<T>>,
}

impl<T: Scalar> MvadModel<T> {
    /// Seeded initialization. Teacher and student draw from separate streams.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(10);
        let teacher = Teacher::random(&config, &mut rng);
        rng.set_stream(11);
        let student = Student::random(&config, &mut rng);
        Ok(Self::from_parts(config, teacher, student))
    }

    pub fn from_parts(config: ModelConfig, teacher: Teacher<T>, student: Student<Tensor<T>>) -> Self {
        let student = student
            .try_map(&mut |t, _| Ok::<_, Error>(Parameter::new(t.clone())))
            .expect("infallible");
        Self { config, teacher, student }
    }

    pub fn views(&self) -> usize {
        self.config.views
    }
}

/// Applies `blocks` to each sample's views independently.
///
/// `feats: [p·v, c, h, w]`, sample-major. Views of different samples never
/// meet inside a block.
pub fn enhance_stage<T: Scalar>(
    tape: &mut Tape<T>,
    feats: Var,
    views: usize,
    blocks: &[MvasBlockParams<Var>],
    stage: StageConfig,
) -> Result<Var> {
    if blocks.is_empty() {
        return Ok(feats);
    }
    let shape = tape.shape(feats).to_vec();
    if shape.len() != 4 || views == 0 || !shape[0].is_multiple_of(views) {
        return Err(Error::Dimension(format!(
            "enhance_stage: features {shape:?} are not whole samples of {views} views"
        )));
    }
    let p = shape[0] / views;
    let mut outs = Vec::with_capacity(p);
    for i in 0..p {
        let sample = tape.slice(feats, 0, i * views, views)?;
        let mut x = tape.permute(sample, &[0, 2, 3, 1])?;
        for block in blocks {
            x = mvas_block(tape, x, block, stage.a, stage.k)?;
        }
        outs.push(tape.permute(x, &[0, 3, 1, 2])?);
    }
    tape.concat(&outs, 0)
}

/// Fuses the three enhanced stages into the decoder bottleneck.
pub fn fpn_fuse<T: Scalar>(tape: &mut Tape<T>, stages: &Pyramid<Var>, fpn: &Fpn<Var>) -> Result<Var> {
    let d1 = tape.conv2d(stages[0], fpn.down1.w, Some(fpn.down1.b), 2, 1)?;
    let d1 = tape.relu(d1)?;
    let c2 = tape.concat(&[d1, stages[1]], 1)?;
    let d2 = tape.conv2d(c2, fpn.down2.w, Some(fpn.down2.b), 2, 1)?;
    let d2 = tape.relu(d2)?;
    let c3 = tape.concat(&[d2, stages[2]], 1)?;
    tape.conv2d(c3, fpn.project.w, Some(fpn.project.b), 1, 0)
}

/// Reconstructs the three stages from the bottleneck, coarsest first.
/// Returns them finest first to line up with the teacher.
pub fn decoder_forward<T: Scalar>(tape: &mut Tape<T>, bottleneck: Var, decoder: &[[Conv<Var>; 2]; 3]) -> Result<Pyramid<Var>> {
    let mut outs = Vec::with_capacity(3);
    let mut x = bottleneck;
    for (d, [c0, c1]) in decoder.iter().enumerate() {
        if d > 0 {
            let act = tape.relu(x)?;
            x = tape.upsample_nearest(act, 2)?;
        }
        let h = tape.conv2d(x, c0.w, Some(c0.b), 1, 1)?;
        let h = tape.relu(h)?;
        x = tape.conv2d(h, c1.w, Some(c1.b), 1, 1)?;
        outs.push(x);
    }
    Ok([outs[2], outs[1], outs[0]])
}

/// Student reconstruction of teacher features `[p·v, c_j, h_j, w_j]`.
pub fn student_forward<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_feats: &Pyramid<Var>,
    student: &Student<Var>,
    cfg: &ModelConfig,
) -> Result<Pyramid<Var>> {
    let mut enhanced = Vec::with_capacity(3);
    for (j, &feats) in teacher_feats.iter().enumerate() {
        enhanced.push(enhance_stage(tape, feats, cfg.views, &student.mvas[j], cfg.stages[j])?);
    }
    let enhanced = [enhanced[0], enhanced[1], enhanced[2]];
    let bottleneck = fpn_fuse(tape, &enhanced, &student.fpn)?;
    decoder_forward(tape, bottleneck, &student.decoder)
}

/// `Σ_j ‖f_E^j − f_D^j‖² / (h_j w_j)`, summed over channels and averaged
/// over images.
pub fn distillation_loss<T: Scalar>(tape: &mut Tape<T>, f_e: &Pyramid<Var>, f_d: &Pyramid<Var>) -> Result<Var> {
    let mut total = tape.mse_loss(f_e[0], f_d[0])?;
    for j in 1..3 {
        let l = tape.mse_loss(f_e[j], f_d[j])?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}
