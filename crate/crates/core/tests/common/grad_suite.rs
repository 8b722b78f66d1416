//! Finite-difference checks of every hand-written backward pass at 64-bit.
//! Each check panics on the first instance over tolerance.

use dvq::baselines::{
    gumbel_noise_like, gumbel_softmax_backward, gumbel_softmax_with_noise, saturating_sigmoid, saturating_sigmoid_grad,
    semhash_backward, semhash_decoder_input, GumbelConfig, SemHashCode, SemHashState,
};
use dvq::entropy::EntropyReport;
use dvq::model::{
    Batch, BottleneckKind, CodebookMode, EncoderConfig, EncoderKind, Mode, Model, ModelConfig, TrainContext,
};
use dvq::ops::attention::{self_attention, self_attention_backward, AttentionWeights};
use dvq::ops::dropconnect::dropconnect_apply;
use dvq::ops::gradcheck::grad_check;
use dvq::ops::linalg::{gelu, gelu_backward, linear, linear_backward, matmul, matmul_backward};
use dvq::ops::loss::softmax_cross_entropy_masked;
use dvq::ops::norm::{layer_norm, layer_norm_backward};
use dvq::quantizer::{codebook_grad, commitment_grad, quantize, Metric, VqLossConfig};
use dvq::{Result, RngState, Tensor};

const INSTANCES: u64 = 20;
const LINEAR_TOL: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::normal(shape, 1.0, rng)
}

fn with(shape: &[usize], x: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, x).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.dot(b).unwrap()
}

fn assert_close(name: &str, seed: u64, err: f64, tol: f64) {
    assert!(err < tol, "{name} seed {seed}: relative error {err:e} >= {tol:e}");
}

pub fn matmul_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(s);
        let (a, b, r) = (
            randn(&[3, 4], &mut rng),
            randn(&[4, 5], &mut rng),
            randn(&[3, 5], &mut rng),
        );
        let (ga, gb) = matmul_backward(&a, &b, &r).unwrap();
        let ea = grad_check(|x| Ok(dot(&matmul(&with(&[3, 4], x), &b)?, &r)), a.data(), ga.data()).unwrap();
        let eb = grad_check(|x| Ok(dot(&matmul(&a, &with(&[4, 5], x))?, &r)), b.data(), gb.data()).unwrap();
        assert_close("matmul a", s, ea, LINEAR_TOL);
        assert_close("matmul b", s, eb, LINEAR_TOL);
    }
}

pub fn linear_grads_any_rank() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(100 + s);
        let x = randn(&[2, 3, 4], &mut rng);
        let w = randn(&[4, 5], &mut rng);
        let b = randn(&[5], &mut rng);
        let r = randn(&[2, 3, 5], &mut rng);
        let g = linear_backward(&x, &w, &r).unwrap();
        let f =
            |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> { Ok(dot(&linear(x, w, Some(b))?, &r)) };
        let ex = grad_check(|v| f(&with(&[2, 3, 4], v), &w, &b), x.data(), g.x.data()).unwrap();
        let ew = grad_check(|v| f(&x, &with(&[4, 5], v), &b), w.data(), g.w.data()).unwrap();
        let eb = grad_check(|v| f(&x, &w, &with(&[5], v)), b.data(), g.b.data()).unwrap();
        assert_close("linear x", s, ex, LINEAR_TOL);
        assert_close("linear w", s, ew, LINEAR_TOL);
        assert_close("linear b", s, eb, LINEAR_TOL);
    }
}

pub fn layer_norm_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(200 + s);
        let x = randn(&[3, 6], &mut rng);
        let gain = randn(&[6], &mut rng);
        let bias = randn(&[6], &mut rng);
        let r = randn(&[3, 6], &mut rng);
        let (_, cache) = layer_norm(&x, &gain, &bias).unwrap();
        let (gx, gg, gb) = layer_norm_backward(&cache, &gain, &r).unwrap();
        let f =
            |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> { Ok(dot(&layer_norm(x, g, b)?.0, &r)) };
        let ex = grad_check(|v| f(&with(&[3, 6], v), &gain, &bias), x.data(), gx.data()).unwrap();
        let eg = grad_check(|v| f(&x, &with(&[6], v), &bias), gain.data(), gg.data()).unwrap();
        let eb = grad_check(|v| f(&x, &gain, &with(&[6], v)), bias.data(), gb.data()).unwrap();
        assert_close("layer_norm x", s, ex, TOL);
        assert_close("layer_norm gain", s, eg, TOL);
        assert_close("layer_norm bias", s, eb, TOL);
    }
}

pub fn gelu_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(300 + s);
        let x = Tensor::normal(&[4, 5], 2.0, &mut rng);
        let r = randn(&[4, 5], &mut rng);
        let g = gelu_backward(&x, &r).unwrap();
        let e = grad_check(|v| Ok(dot(&gelu(&with(&[4, 5], v)), &r)), x.data(), g.data()).unwrap();
        assert_close("gelu", s, e, TOL);
    }
}

pub fn cross_entropy_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(400 + s);
        let logits = Tensor::normal(&[5, 6], 2.0, &mut rng);
        let targets: Vec<usize> = (0..5).map(|_| rng.below(6)).collect();
        let mask: Vec<bool> = (0..5).map(|i| i == 0 || rng.bernoulli(0.7)).collect();
        let m = (s % 2 == 0).then_some(mask.as_slice());
        let (_, g) = softmax_cross_entropy_masked(&logits, &targets, m).unwrap();
        let e = grad_check(
            |v| Ok(softmax_cross_entropy_masked(&with(&[5, 6], v), &targets, m)?.0),
            logits.data(),
            g.data(),
        )
        .unwrap();
        assert_close("cross entropy", s, e, TOL);
    }
}

pub fn attention_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(500 + s);
        let (t, d, heads) = (5, 8, if s % 2 == 0 { 2 } else { 4 });
        let x = randn(&[t, d], &mut rng);
        let ws: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::normal(&[d, d], 0.4, &mut rng)).collect();
        let mask: Vec<bool> = (0..t).map(|i| i == 0 || rng.bernoulli(0.7)).collect();
        let r = randn(&[t, d], &mut rng);
        let aw = |w: &[Tensor<f64>]| -> [Tensor<f64>; 4] { [w[0].clone(), w[1].clone(), w[2].clone(), w[3].clone()] };
        let f = |x: &Tensor<f64>, w: &[Tensor<f64>; 4]| -> Result<f64> {
            let weights = AttentionWeights {
                wq: &w[0],
                wk: &w[1],
                wv: &w[2],
                wo: &w[3],
            };
            Ok(dot(&self_attention(x, weights, heads, Some(&mask))?.0, &r))
        };
        let base = aw(&ws);
        let weights = AttentionWeights {
            wq: &base[0],
            wk: &base[1],
            wv: &base[2],
            wo: &base[3],
        };
        let (_, cache) = self_attention(&x, weights, heads, Some(&mask)).unwrap();
        let g = self_attention_backward(&cache, weights, &r).unwrap();
        let ex = grad_check(|v| f(&with(&[t, d], v), &base), x.data(), g.x.data()).unwrap();
        assert_close("attention x", s, ex, TOL);
        for (i, gw) in [&g.wq, &g.wk, &g.wv, &g.wo].into_iter().enumerate() {
            let e = grad_check(
                |v| {
                    let mut w = base.clone();
                    w[i] = with(&[d, d], v);
                    f(&x, &w)
                },
                base[i].data(),
                gw.data(),
            )
            .unwrap();
            assert_close(&format!("attention w{i}"), s, e, TOL);
        }
    }
}

pub fn dropconnect_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(600 + s);
        let x = randn(&[3, 4], &mut rng);
        let w = randn(&[4, 5], &mut rng);
        let r = randn(&[3, 5], &mut rng);
        let (masked, mask) = dropconnect_apply(&w, 0.3, &mut rng, true).unwrap();
        let gw = mask.backward(&linear_backward(&x, &masked, &r).unwrap().w).unwrap();
        let e = grad_check(
            |v| {
                let raw = with(&[4, 5], v);
                let m = raw.zip_map(&mask.mask, |a, k| a * k * mask.scale)?;
                Ok(dot(&linear(&x, &m, None)?, &r))
            },
            w.data(),
            gw.data(),
        )
        .unwrap();
        assert_close("dropconnect", s, e, LINEAR_TOL);
    }
}

pub fn gumbel_softmax_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(700 + s);
        let logits = randn(&[3, 5], &mut rng);
        let noise = gumbel_noise_like(&[3, 5], &mut rng);
        let cfg = GumbelConfig {
            tau: 0.5 + rng.uniform() * 1.5,
            k: 5,
            hard: false,
        };
        let r = randn(&[3, 5], &mut rng);
        let sample = gumbel_softmax_with_noise(&logits, &noise, &cfg).unwrap();
        let g = gumbel_softmax_backward(&sample, &r, cfg.tau).unwrap();
        let e = grad_check(
            |v| {
                Ok(dot(
                    &gumbel_softmax_with_noise(&with(&[3, 5], v), &noise, &cfg)?.output,
                    &r,
                ))
            },
            logits.data(),
            g.data(),
        )
        .unwrap();
        assert_close("gumbel softmax", s, e, TOL);
    }
}

/// Kinks of the saturating sigmoid, where `1.2·σ(x) − 0.1` hits 0 or 1.
fn near_kink(x: f64) -> bool {
    (x.abs() - 11f64.ln()).abs() < 1e-3
}

pub fn saturating_sigmoid_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(800 + s);
        let mut x = Tensor::normal(&[12], 3.0, &mut rng);
        x.data_mut()
            .iter_mut()
            .filter(|v| near_kink(**v))
            .for_each(|v| *v += 0.1);
        let r = randn(&[12], &mut rng);
        let g = saturating_sigmoid_grad(&x).zip_map(&r, |a, b| a * b).unwrap();
        let e = grad_check(
            |v| Ok(dot(&saturating_sigmoid(&with(&[12], v)), &r)),
            x.data(),
            g.data(),
        )
        .unwrap();
        assert_close("saturating sigmoid", s, e, TOL);
    }
}

fn soft_code(z: &Tensor<f64>) -> SemHashCode<f64> {
    let f = saturating_sigmoid(z);
    SemHashCode {
        pre: z.clone(),
        g: f.map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        h: f.clone(),
        f,
        used_soft: true,
    }
}

pub fn semhash_soft_path_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(900 + s);
        let mut z = Tensor::normal(&[3, 6], 2.0, &mut rng);
        z.data_mut()
            .iter_mut()
            .filter(|v| near_kink(**v))
            .for_each(|v| *v += 0.1);
        let state = SemHashState::<f64>::new(6, 4, &mut rng);
        let r = randn(&[3, 4], &mut rng);
        let mut st = state.clone();
        let gz = semhash_backward(&soft_code(&z), &r, &mut st).unwrap();
        let ez = grad_check(
            |v| {
                Ok(dot(
                    &semhash_decoder_input(&soft_code(&with(&[3, 6], v)).h, &state)?,
                    &r,
                ))
            },
            z.data(),
            gz.data(),
        )
        .unwrap();
        assert_close("semhash z_e", s, ez, TOL);
        let e1 = grad_check(
            |v| {
                let mut t = state.clone();
                t.e1.value = with(&[6, 4], v);
                Ok(dot(&semhash_decoder_input(&soft_code(&z).h, &t)?, &r))
            },
            state.e1.value.data(),
            st.e1.grad.data(),
        )
        .unwrap();
        assert_close("semhash e1", s, e1, LINEAR_TOL);
    }
}

fn toy_config(kind: EncoderKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 10,
            max_len: 4,
            d_model: 8,
            kind,
            heads: 2,
            n_sub_encoders: 2,
        },
        bottleneck: BottleneckKind::Dvq,
        codebook_size: 16,
        vq: VqLossConfig::default(),
        codebook_mode: CodebookMode::Regular,
        ema_decay: 0.99,
        laplace_eps: 1e-5,
        gumbel_tau: 1.0,
        gumbel_hard: false,
    }
}

fn toy_batch(rng: &mut RngState) -> Batch {
    let a: Vec<usize> = (0..4).map(|_| 2 + rng.below(8)).collect();
    let b: Vec<usize> = (0..3).map(|_| 2 + rng.below(8)).collect();
    Batch::from_sequences(&[&a, &b], 4, None).unwrap()
}

pub fn decoder_path_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(1000 + s);
        let mut model = Model::<f64>::new(toy_config(EncoderKind::Mlp), &mut rng).unwrap();
        let batch = toy_batch(&mut rng);
        let targets = batch.targets();
        let z_q = randn(&[targets.len(), 8], &mut rng);
        model.zero_grad();
        let (_, _, g_zq) = model.decoder_loss_backward(&z_q, &targets).unwrap();
        let loss = |m: &Model<f64>, z: &Tensor<f64>| -> Result<f64> {
            Ok(dvq::ops::loss::softmax_cross_entropy(&m.decode(z)?, &targets)?.0)
        };
        let ez = grad_check(|v| loss(&model, &with(z_q.shape(), v)), z_q.data(), g_zq.data()).unwrap();
        assert_close("decoder z_q", s, ez, TOL);
        let mut probe = model.clone();
        let ew = grad_check(
            |v| {
                probe.params.dec_w.value = with(&[8, 10], v);
                loss(&probe, &z_q)
            },
            model.params.dec_w.value.data(),
            model.params.dec_w.grad.data(),
        )
        .unwrap();
        assert_close("decoder w", s, ew, TOL);
    }
}

/// Encoder parameters against the commitment term with the assignments and
/// `z_q` held fixed. Odd instances run in training mode with entropy-gated
/// DropConnect, replaying identical masks from a fixed seed.
pub fn encoder_commitment_path_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(1100 + s);
        let kind = if s % 4 < 2 {
            EncoderKind::Transformer
        } else {
            EncoderKind::Mlp
        };
        let training = s % 2 == 1;
        let mut model = Model::<f64>::new(toy_config(kind), &mut rng).unwrap();
        let batch = toy_batch(&mut rng);
        let valid = batch.valid_positions();
        let report = EntropyReport::from_entropies(vec![0.5, 1.5]).unwrap();
        let beta = 0.25;
        let encode = |m: &Model<f64>| {
            let mut mask_rng = RngState::new(77);
            let mut mode = if training {
                Mode::Train(TrainContext {
                    rng: &mut mask_rng,
                    dropconnect_rate: 0.1,
                    gate: Some(&report),
                })
            } else {
                Mode::Eval
            };
            m.encode(&batch, &mut mode)
        };
        let (z_e, cache) = encode(&model).unwrap();
        let zv = z_e.gather_rows(&valid).unwrap();
        let q = quantize(&zv, model.bottleneck.codebook().unwrap(), &model.config.vq).unwrap();
        let g_valid = commitment_grad(&zv, &q, beta).unwrap();
        let mut g = Tensor::zeros(z_e.shape());
        for (r, &p) in valid.iter().enumerate() {
            g.row_mut(p).copy_from_slice(g_valid.row(r));
        }
        model.zero_grad();
        model.encode_backward(&cache, &g).unwrap();
        let analytic = model.flat_grads();
        let x0 = model.flat_values();
        let z_q = q.z_q.clone();
        let n = q.n as f64;
        let mut probe = model.clone();
        let e = grad_check(
            |v| {
                probe.set_flat_values(v);
                let zv = encode(&probe)?.0.gather_rows(&valid)?;
                let sq: f64 = zv.data().iter().zip(z_q.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(beta * sq / (zv.rows() as f64 * n))
            },
            &x0,
            &analytic,
        )
        .unwrap();
        assert_close(&format!("encoder {kind:?} training={training}"), s, e, TOL);
    }
}

pub fn codebook_vq_path_grads() {
    for s in 0..INSTANCES {
        let mut rng = RngState::new(1200 + s);
        let model = Model::<f64>::new(toy_config(EncoderKind::Mlp), &mut rng).unwrap();
        let cb = model.bottleneck.codebook().unwrap().clone();
        let cfg = VqLossConfig {
            metric: if s % 2 == 0 { Metric::L1 } else { Metric::L2 },
            ..VqLossConfig::default()
        };
        let z = Tensor::normal(&[7, 8], 0.5, &mut rng);
        let q = quantize(&z, &cb, &cfg).unwrap();
        let grads = codebook_grad(&z, &q, &cb);
        let shape = cb.shape();
        for i in 0..shape.n {
            let e = grad_check(
                |v| {
                    let table = with(&[shape.sub_size, shape.sub_dim], v);
                    let mut sq = 0.0;
                    for p in 0..z.rows() {
                        let code = table.row(q.index(p, i));
                        let zs = &z.row(p)[i * shape.sub_dim..(i + 1) * shape.sub_dim];
                        sq += zs.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    }
                    Ok(sq / (z.rows() * shape.n) as f64)
                },
                cb.sub[i].value.data(),
                grads[i].data(),
            )
            .unwrap();
            assert_close("codebook", s, e, TOL);
        }
    }
}

/// Every check with its name, in a fixed order.
pub const ALL: &[(&str, fn())] = &[
    ("matmul_grads", matmul_grads),
    ("linear_grads_any_rank", linear_grads_any_rank),
    ("layer_norm_grads", layer_norm_grads),
    ("gelu_grads", gelu_grads),
    ("cross_entropy_grads", cross_entropy_grads),
    ("attention_grads", attention_grads),
    ("dropconnect_grads", dropconnect_grads),
    ("gumbel_softmax_grads", gumbel_softmax_grads),
    ("saturating_sigmoid_grads", saturating_sigmoid_grads),
    ("semhash_soft_path_grads", semhash_soft_path_grads),
    ("decoder_path_grads", decoder_path_grads),
    ("encoder_commitment_path_grads", encoder_commitment_path_grads),
    ("codebook_vq_path_grads", codebook_vq_path_grads),
];
