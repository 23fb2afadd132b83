//! Finite-difference verification of every differentiable operation and of
//! the composed model losses.
//!
//! Analytic gradients come from the reverse-mode tape; numeric gradients
//! from central differences (step 1e-5) of the forward value. Relative
//! tolerance is 1e-4 everywhere except through the straight-through
//! estimator, where it is 1e-3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavrep::encoder::{self, EncoderConfig, MaskInput};
use wavrep::finetuning::{am_softmax_loss, SpeakerHeadConfig};
use wavrep::numerics::fd::{central_diff, max_grad_error};
use wavrep::numerics::{ParamSet, Tape, Tensor, VarId};
use wavrep::pretraining::{
    self, contrastive_loss, GumbelSchedule, LossWeights, MaskSpec, PretrainModel,
};
use wavrep::quantizer::{self, QuantizeMode, QuantizerConfig};

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TOL_ST: f64 = 1e-3;

/// Check d(loss)/d(inputs[i]) for a tape-built scalar loss against central
/// differences of the same forward computation.
fn check_op<F>(name: &str, inputs: &[Tensor], tol: f64, build: F)
where
    F: Fn(&mut Tape, &[VarId]) -> VarId,
{
    let forward = |flat: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut ids = Vec::new();
        let mut offset = 0;
        for t in inputs {
            let data = flat[offset..offset + t.len()].to_vec();
            offset += t.len();
            ids.push(tape.leaf(Tensor::new(t.shape().to_vec(), data).unwrap()));
        }
        let out = build(&mut tape, &ids);
        assert_eq!(tape.value(out).len(), 1, "{name}: loss must be scalar");
        tape.value(out).item()
    };

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();

    // analytic
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let grads = tape.backward(out);
    let analytic: Vec<f64> = inputs
        .iter()
        .zip(&ids)
        .flat_map(|(t, &id)| grads.get_or_zeros(id, t.shape()).into_data())
        .collect();

    let numeric = central_diff(forward, &flat, FD_STEP);
    let err = max_grad_error(&analytic, &numeric);
    assert!(err <= tol, "{name}: gradient error {err:.3e} > {tol:e}");
}

/// Deterministic scalarization weights so non-scalar outputs reduce to one
/// number with nonzero gradient everywhere.
fn scalarize(tape: &mut Tape, y: VarId) -> VarId {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.05 * (i as f64 * 1.7).sin()).collect();
    let w = tape.leaf(Tensor::new(shape, w).unwrap());
    let prod = tape.mul(y, w);
    tape.sum_all(prod)
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(vec![3, 4], &mut rng);
    let b = rand_tensor(vec![3, 4], &mut rng);
    let v = rand_tensor(vec![4], &mut rng);

    check_op("add", &[a.clone(), b.clone()], TOL, |t, ids| {
        let y = t.add(ids[0], ids[1]);
        scalarize(t, y)
    });
    check_op("sub", &[a.clone(), b.clone()], TOL, |t, ids| {
        let y = t.sub(ids[0], ids[1]);
        scalarize(t, y)
    });
    check_op("mul", &[a.clone(), b.clone()], TOL, |t, ids| {
        let y = t.mul(ids[0], ids[1]);
        scalarize(t, y)
    });
    check_op("scale", &[a.clone()], TOL, |t, ids| {
        let y = t.scale(ids[0], -1.7);
        scalarize(t, y)
    });
    check_op("add_row_vec", &[a.clone(), v.clone()], TOL, |t, ids| {
        let y = t.add_row_vec(ids[0], ids[1]);
        scalarize(t, y)
    });
    check_op("mul_row_vec", &[a.clone(), v.clone()], TOL, |t, ids| {
        let y = t.mul_row_vec(ids[0], ids[1]);
        scalarize(t, y)
    });
    check_op("gelu", &[a], TOL, |t, ids| {
        let y = t.gelu(ids[0]);
        scalarize(t, y)
    });
}

#[test]
fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(vec![3, 4], &mut rng);
    let b = rand_tensor(vec![4, 5], &mut rng);
    let bt = rand_tensor(vec![5, 4], &mut rng);
    check_op("matmul", &[a.clone(), b], TOL, |t, ids| {
        let y = t.matmul(ids[0], ids[1]);
        scalarize(t, y)
    });
    check_op("matmul_nt", &[a, bt], TOL, |t, ids| {
        let y = t.matmul_nt(ids[0], ids[1]);
        scalarize(t, y)
    });
}

#[test]
fn normalization_and_softmax_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(vec![4, 6], &mut rng);
    check_op("softmax_rows", &[a.clone()], TOL, |t, ids| {
        let y = t.softmax_rows(ids[0]);
        scalarize(t, y)
    });
    check_op("layer_norm_rows", &[a.clone()], TOL, |t, ids| {
        let y = t.layer_norm_rows(ids[0]);
        scalarize(t, y)
    });
    // keep rows away from zero norm
    let shifted = a.map(|x| x + 2.5);
    check_op("normalize_rows", &[shifted], TOL, |t, ids| {
        let y = t.normalize_rows(ids[0]);
        scalarize(t, y)
    });
    let positive = Tensor::rand_uniform(vec![3, 5], 0.05, 1.0, &mut rng);
    check_op("xlogx", &[positive], TOL, |t, ids| {
        let y = t.xlogx(ids[0]);
        scalarize(t, y)
    });
}

#[test]
fn reduction_and_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(vec![4, 3], &mut rng);
    let b = rand_tensor(vec![2, 3], &mut rng);
    check_op("mean_rows", &[a.clone()], TOL, |t, ids| {
        let y = t.mean_rows(ids[0]);
        scalarize(t, y)
    });
    check_op("mean_all", &[a.clone()], TOL, |t, ids| t.mean_all(ids[0]));
    check_op("sum_all", &[a.clone()], TOL, |t, ids| t.sum_all(ids[0]));
    check_op("reshape", &[a.clone()], TOL, |t, ids| {
        let y = t.reshape(ids[0], vec![2, 6]);
        scalarize(t, y)
    });
    check_op("gather_rows", &[a.clone()], TOL, |t, ids| {
        let y = t.gather_rows(ids[0], &[0, 2, 2, 3]);
        scalarize(t, y)
    });
    check_op("gather_pairs", &[a.clone()], TOL, |t, ids| {
        let y = t.gather_pairs(ids[0], vec![(0, 1), (2, 2), (3, 0), (0, 1)], 2);
        scalarize(t, y)
    });
    check_op("concat_rows", &[a.clone(), b.clone()], TOL, |t, ids| {
        let y = t.concat_rows(&[ids[0], ids[1]]);
        scalarize(t, y)
    });
    let c = rand_tensor(vec![4, 2], &mut rng);
    check_op("concat_cols", &[a.clone(), c], TOL, |t, ids| {
        let y = t.concat_cols(&[ids[0], ids[1]]);
        scalarize(t, y)
    });
    check_op("slice_cols", &[a.clone()], TOL, |t, ids| {
        let y = t.slice_cols(ids[0], 1, 2);
        scalarize(t, y)
    });
    let embed = rand_tensor(vec![3], &mut rng);
    check_op("mask_rows", &[a, embed], TOL, |t, ids| {
        let y = t.mask_rows(ids[0], ids[1], &[true, false, true, false]);
        scalarize(t, y)
    });
}

#[test]
fn cross_entropy_rows_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(vec![4, 5], &mut rng);
    check_op("cross_entropy_rows", &[logits], TOL, |t, ids| {
        t.cross_entropy_rows(ids[0], &[1, 0, 4, 2])
    });
}

#[test]
fn convolution_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // valid strided conv: x [9,2], w [3,2,4], b [3], stride 2
    let x = rand_tensor(vec![9, 2], &mut rng);
    let w = rand_tensor(vec![3, 2, 4], &mut rng);
    let b = rand_tensor(vec![3], &mut rng);
    check_op("conv_valid", &[x, w, b], TOL, |t, ids| {
        let y = t.conv_valid(ids[0], ids[1], ids[2], 2);
        scalarize(t, y)
    });

    // grouped same-pad conv: x [7,4], groups 2, kernel 3 -> w [4,2,3]
    let x = rand_tensor(vec![7, 4], &mut rng);
    let w = rand_tensor(vec![4, 2, 3], &mut rng);
    let b = rand_tensor(vec![4], &mut rng);
    check_op("conv_same_pad", &[x.clone(), w.clone(), b.clone()], TOL, |t, ids| {
        let y = t.conv_same_pad(ids[0], ids[1], ids[2], 2);
        scalarize(t, y)
    });
    // even kernel exercises the asymmetric padding split
    let w_even = rand_tensor(vec![4, 2, 4], &mut rng);
    check_op("conv_same_pad_even", &[x, w_even, b], TOL, |t, ids| {
        let y = t.conv_same_pad(ids[0], ids[1], ids[2], 2);
        scalarize(t, y)
    });
}

fn desk16_encoder() -> EncoderConfig {
    EncoderConfig {
        conv_channels: 8,
        conv_strides: vec![4, 2],
        conv_kernels: vec![6, 4],
        transformer_layers: 2,
        model_dim: 16,
        ffn_dim: 32,
        heads: 2,
        pos_kernel: 5,
        pos_groups: 2,
        pre_norm: true,
    }
}

/// Full encoder: gradient w.r.t. the raw waveform and every parameter.
#[test]
fn full_encoder_gradient() {
    for pre_norm in [true, false] {
        let mut cfg = desk16_encoder();
        cfg.pre_norm = pre_norm;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        encoder::init_params(&cfg, &mut params, &mut rng);
        let wave: Vec<f64> = (0..48).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mask: Vec<bool> = (0..cfg.frame_count(48).unwrap())
            .map(|t| t % 2 == 0)
            .collect();
        let mut mask_params = params.clone();
        mask_params.insert(
            "mask.embed",
            Tensor::rand_uniform(vec![cfg.latent_dim()], -0.3, 0.3, &mut rng),
        );

        let forward = |p: &ParamSet, wave: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let tp = p.load(&mut tape);
            let wid = tape.leaf(Tensor::matrix(wave.len(), 1, wave.to_vec()).unwrap());
            let out = encoder::forward(
                &mut tape,
                &tp,
                &cfg,
                wid,
                Some(MaskInput {
                    mask: &mask,
                    embed: tp.id("mask.embed"),
                }),
            )
            .unwrap();
            let ctx = out.context();
            let loss = scalarize(&mut tape, ctx);
            tape.value(loss).item()
        };

        // analytic
        let mut tape = Tape::new();
        let tp = mask_params.load(&mut tape);
        let wid = tape.leaf(Tensor::matrix(wave.len(), 1, wave.clone()).unwrap());
        let out = encoder::forward(
            &mut tape,
            &tp,
            &cfg,
            wid,
            Some(MaskInput {
                mask: &mask,
                embed: tp.id("mask.embed"),
            }),
        )
        .unwrap();
        let ctx = out.context();
        let loss = scalarize(&mut tape, ctx);
        let grads = tape.backward(loss);

        // w.r.t. waveform
        let analytic_wave: Vec<f64> = grads
            .get_or_zeros(wid, &[wave.len(), 1])
            .into_data();
        let numeric_wave = central_diff(
            |w| forward(&mask_params, w),
            &wave,
            FD_STEP,
        );
        let err = max_grad_error(&analytic_wave, &numeric_wave);
        assert!(err <= TOL, "waveform gradient (pre_norm={pre_norm}): {err:.3e}");

        // w.r.t. every parameter
        for (name, tensor) in mask_params.clone().iter() {
            let analytic = grads.get_or_zeros(tp.id(name), tensor.shape()).into_data();
            let numeric = central_diff(
                |vals| {
                    let mut p = mask_params.clone();
                    *p.get_mut(name) = Tensor::new(tensor.shape().to_vec(), vals.to_vec()).unwrap();
                    forward(&p, &wave)
                },
                tensor.data(),
                FD_STEP,
            );
            let err = max_grad_error(&analytic, &numeric);
            assert!(err <= TOL, "param {name} (pre_norm={pre_norm}): {err:.3e}");
        }
    }
}

fn tiny_quantizer() -> QuantizerConfig {
    QuantizerConfig {
        groups: 2,
        entries_per_group: 4,
        entry_dim: 3,
        input_dim: 5,
        output_dim: 6,
        usage_temperature: 1.0,
        usage_from_probs: false,
    }
}

/// Soft quantizer path: gradients w.r.t. the latents and every parameter.
#[test]
fn quantizer_soft_path_gradient() {
    let cfg = tiny_quantizer();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = ParamSet::new();
    quantizer::init_params(&cfg, &mut params, &mut rng);
    let z = rand_tensor(vec![3, 5], &mut rng);

    let forward = |p: &ParamSet, z_vals: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let tp = p.load(&mut tape);
        let zid = tape.leaf(Tensor::matrix(3, 5, z_vals.to_vec()).unwrap());
        let out = quantizer::quantize_rows::<ChaCha8Rng>(
            &mut tape,
            &tp,
            &cfg,
            zid,
            0.7,
            QuantizeMode::TrainSoft,
            None,
        )
        .unwrap();
        let loss = scalarize(&mut tape, out.quantized);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let tp = params.load(&mut tape);
    let zid = tape.leaf(z.clone());
    let out = quantizer::quantize_rows::<ChaCha8Rng>(
        &mut tape,
        &tp,
        &cfg,
        zid,
        0.7,
        QuantizeMode::TrainSoft,
        None,
    )
    .unwrap();
    let loss = scalarize(&mut tape, out.quantized);
    let grads = tape.backward(loss);

    let analytic_z = grads.get_or_zeros(zid, z.shape()).into_data();
    let numeric_z = central_diff(|v| forward(&params, v), z.data(), FD_STEP);
    let err = max_grad_error(&analytic_z, &numeric_z);
    assert!(err <= TOL, "z gradient: {err:.3e}");

    for (name, tensor) in params.clone().iter() {
        let analytic = grads.get_or_zeros(tp.id(name), tensor.shape()).into_data();
        let numeric = central_diff(
            |vals| {
                let mut p = params.clone();
                *p.get_mut(name) = Tensor::new(tensor.shape().to_vec(), vals.to_vec()).unwrap();
                forward(&p, z.data())
            },
            tensor.data(),
            FD_STEP,
        );
        let err = max_grad_error(&analytic, &numeric);
        assert!(err <= TOL, "param {name}: {err:.3e}");
    }
}

/// Straight-through estimator: analytic gradient through the hard forward
/// against finite differences of the soft (non-hardened) path, with a loss
/// linear in the quantized output.
#[test]
fn straight_through_gradient_matches_soft_path() {
    let cfg = tiny_quantizer();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ParamSet::new();
    quantizer::init_params(&cfg, &mut params, &mut rng);
    let z = rand_tensor(vec![2, 5], &mut rng);

    let run = |z_vals: &[f64], mode: QuantizeMode, want_grad: bool| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let tp = params.load(&mut tape);
        let zid = tape.leaf(Tensor::matrix(2, 5, z_vals.to_vec()).unwrap());
        let out = quantizer::quantize_rows::<ChaCha8Rng>(
            &mut tape, &tp, &cfg, zid, 0.7, mode, None,
        )
        .unwrap();
        let loss = scalarize(&mut tape, out.quantized);
        let loss_val = tape.value(loss).item();
        if want_grad {
            let grads = tape.backward(loss);
            (loss_val, grads.get_or_zeros(zid, &[2, 5]).into_data())
        } else {
            (loss_val, Vec::new())
        }
    };

    let (_, analytic) = run(z.data(), QuantizeMode::TrainHard, true);
    let numeric = central_diff(
        |v| run(v, QuantizeMode::TrainSoft, false).0,
        z.data(),
        FD_STEP,
    );
    let err = max_grad_error(&analytic, &numeric);
    assert!(err <= TOL_ST, "straight-through gradient: {err:.3e}");
}

/// Contrastive loss assembled on the tape against finite differences of the
/// independent plain implementation.
#[test]
fn contrastive_loss_gradient_against_plain_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dim = 5;
    let k = 3;
    let c_t = rand_tensor(vec![1, dim], &mut rng).map(|v| v + 0.3);
    let cands = rand_tensor(vec![k + 1, dim], &mut rng).map(|v| v + 0.3);
    let temperature = 0.2;

    // analytic through the tape ops used by pretraining
    let mut tape = Tape::new();
    let cid = tape.leaf(c_t.clone());
    let qid = tape.leaf(cands.clone());
    let c_hat = tape.normalize_rows(cid);
    let q_hat = tape.normalize_rows(qid);
    let sims = tape.matmul_nt(c_hat, q_hat);
    let logits = tape.scale(sims, 1.0 / temperature);
    let loss = tape.cross_entropy_rows(logits, &[0]);
    let grads = tape.backward(loss);
    let analytic: Vec<f64> = grads
        .get_or_zeros(cid, &[1, dim])
        .into_data()
        .into_iter()
        .chain(grads.get_or_zeros(qid, &[k + 1, dim]).into_data())
        .collect();

    // numeric through the plain scalar function
    let flat: Vec<f64> = c_t.data().iter().chain(cands.data()).copied().collect();
    let numeric = central_diff(
        |v| {
            let c = Tensor::from_vec(v[..dim].to_vec());
            let target = Tensor::from_vec(v[dim..2 * dim].to_vec());
            let distractors: Vec<Tensor> = (1..=k)
                .map(|j| Tensor::from_vec(v[(j + 1) * dim..(j + 2) * dim].to_vec()))
                .collect();
            contrastive_loss(&c, &target, &distractors, temperature).unwrap()
        },
        &flat,
        FD_STEP,
    );
    let err = max_grad_error(&analytic, &numeric);
    assert!(err <= TOL, "contrastive gradient: {err:.3e}");

    // loss values agree too (dual route)
    let plain = contrastive_loss(
        &Tensor::from_vec(c_t.data().to_vec()),
        &Tensor::from_vec(cands.row(0).to_vec()),
        &(1..=k)
            .map(|j| Tensor::from_vec(cands.row(j).to_vec()))
            .collect::<Vec<_>>(),
        temperature,
    )
    .unwrap();
    assert!((tape.value(loss).item() - plain).abs() < 1e-12);
}

/// AM-softmax assembled on the tape against finite differences of the
/// independent plain implementation.
#[test]
fn am_softmax_gradient_against_plain_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 6;
    let classes = 4;
    let head = SpeakerHeadConfig {
        num_speakers: classes,
        scale: 8.0,
        margin: 0.2,
    };
    let e = rand_tensor(vec![1, dim], &mut rng).map(|v| v + 0.4);
    let w = rand_tensor(vec![classes, dim], &mut rng).map(|v| v + 0.2);
    let label = 2usize;

    let mut tape = Tape::new();
    let eid = tape.leaf(e.clone());
    let wid_ = tape.leaf(w.clone());
    let e_hat = tape.normalize_rows(eid);
    let w_hat = tape.normalize_rows(wid_);
    let cos = tape.matmul_nt(e_hat, w_hat);
    let mut margins = Tensor::zeros(vec![1, classes]);
    margins.data_mut()[label] = head.margin;
    let mid = tape.leaf(margins);
    let margined = tape.sub(cos, mid);
    let logits = tape.scale(margined, head.scale);
    let loss = tape.cross_entropy_rows(logits, &[label]);
    let grads = tape.backward(loss);
    let analytic: Vec<f64> = grads
        .get_or_zeros(eid, &[1, dim])
        .into_data()
        .into_iter()
        .chain(grads.get_or_zeros(wid_, &[classes, dim]).into_data())
        .collect();

    let flat: Vec<f64> = e.data().iter().chain(w.data()).copied().collect();
    let numeric = central_diff(
        |v| {
            let emb = &v[..dim];
            let weights = Tensor::matrix(classes, dim, v[dim..].to_vec()).unwrap();
            am_softmax_loss(emb, label, &weights, &head).unwrap()
        },
        &flat,
        FD_STEP,
    );
    let err = max_grad_error(&analytic, &numeric);
    assert!(err <= TOL, "am-softmax gradient: {err:.3e}");

    // values agree (dual route)
    let plain = am_softmax_loss(e.data(), label, &w, &head).unwrap();
    assert!((tape.value(loss).item() - plain).abs() < 1e-12);
}

/// The full pooled pre-training loss (noise-suppressed soft quantizer path):
/// gradient w.r.t. every trainable parameter.
#[test]
fn pretrain_total_loss_gradient() {
    let enc = EncoderConfig {
        conv_channels: 5,
        conv_strides: vec![4, 2],
        conv_kernels: vec![6, 4],
        transformer_layers: 1,
        model_dim: 8,
        ffn_dim: 12,
        heads: 2,
        pos_kernel: 3,
        pos_groups: 2,
        pre_norm: true,
    };
    let quant = QuantizerConfig {
        groups: 2,
        entries_per_group: 3,
        entry_dim: 2,
        input_dim: 5,
        output_dim: 8,
        usage_temperature: 1.0,
        usage_from_probs: false,
    };
    let model = PretrainModel::init(
        enc,
        quant,
        MaskSpec {
            start_probability: 0.5,
            span_length: 2,
        },
        LossWeights {
            diversity_weight: 0.1,
            penalty_weight: 10.0,
            similarity_temperature: 0.2,
            distractors: 2,
        },
        42,
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batch: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..56).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();
    let temperature = GumbelSchedule::desk().at_step(0);
    let seed = 5;
    let step = 1;

    let (loss0, analytic) =
        pretraining::batch_loss_soft_grads(&model, &batch, temperature, seed, step).unwrap();
    assert!(loss0.is_finite());

    for (name, tensor) in model.params.clone().iter() {
        let analytic_grad = analytic.get(name).unwrap().data().to_vec();
        let numeric = central_diff(
            |vals| {
                let mut m = model.clone();
                *m.params.get_mut(name) =
                    Tensor::new(tensor.shape().to_vec(), vals.to_vec()).unwrap();
                pretraining::batch_loss_soft(&m, &batch, temperature, seed, step)
                    .unwrap()
                    .total
            },
            tensor.data(),
            FD_STEP,
        );
        let err = max_grad_error(&analytic_grad, &numeric);
        assert!(err <= TOL_ST, "param {name}: {err:.3e}");
    }
}
