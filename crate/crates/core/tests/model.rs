use swin_mae::masking::{MaskPlan, RngState};
use swin_mae::model::vit_mae::{VitMae, VitMaeSpec};
use swin_mae::model::{DecoderVariant, EncoderVariant, ModelSpec, SwinMae};
use swin_mae::tensor::{Tape, Tensor};
use swin_mae::train::pretrain::as_batch;
use swin_mae::train::MaskedModel;

fn image(seed: u64, side: usize) -> Tensor {
    let mut r = RngState::new(seed);
    as_batch(&Tensor::from_fn(&[3, side, side], |_| r.uniform())).unwrap()
}

fn variants() -> Vec<ModelSpec> {
    let base = ModelSpec::default();
    vec![
        base.clone(),
        ModelSpec {
            decoder_variant: DecoderVariant::Vit,
            ..base.clone()
        },
        ModelSpec {
            decoder_embedding: true,
            ..base.clone()
        },
        ModelSpec {
            encoder_variant: EncoderVariant::I,
            decoder_variant: DecoderVariant::Vit,
            mask_window_r: 4,
            ..base.clone()
        },
        ModelSpec {
            encoder_variant: EncoderVariant::II,
            decoder_variant: DecoderVariant::Vit,
            use_abs_pos_embed: true,
            mask_window_r: 4,
            ..base.clone()
        },
        ModelSpec {
            norm_pix: true,
            ..base
        },
    ]
}

#[test]
fn every_variant_reconstructs_its_input_size() {
    let x = image(0, 32);
    for spec in variants() {
        let m = SwinMae::new(spec.clone(), 1).unwrap();
        let plan = m.plan(&mut RngState::new(2)).unwrap();
        let input = m.prepare_input(&x).unwrap();
        let y = m.reconstruct_value(&x, &plan).unwrap();
        assert_eq!(y.shape(), input.shape(), "{spec:?}");
        assert!(y.all_finite());
        let (loss, grads) = m.loss_and_grads(&x, &plan).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(grads.params().count() > 0);
    }
}

#[test]
fn variant_two_doubles_the_image() {
    let m = SwinMae::new(variants()[4].clone(), 0).unwrap();
    assert_eq!(m.prepare_input(&image(0, 32)).unwrap().shape(), &[1, 3, 64, 64]);
}

#[test]
fn loss_ignores_visible_pixels_of_the_target() {
    let m = SwinMae::new(ModelSpec::default(), 3).unwrap();
    let plan = m.plan(&mut RngState::new(4)).unwrap();
    let x = image(5, 32);
    let mask = plan.pixel_mask(m.geometry.input.patch_side, 3);
    let mut y = x.clone();
    for (v, &hidden) in y.data_mut().iter_mut().zip(&mask) {
        if !hidden {
            *v = 0.5;
        }
    }
    // the encoder sees the visible pixels, so compare through the loss only
    let loss = |img: &Tensor| {
        let mut tape = Tape::with_params(&m.params);
        let input = tape.constant(x.clone());
        let recon = m.reconstruct(&mut tape, input, &plan).unwrap();
        let l = tape.masked_mse(recon, img, &mask).unwrap();
        tape.value(l).item().unwrap()
    };
    assert_eq!(loss(&x).to_bits(), loss(&y).to_bits());
}

#[test]
fn keep_all_plan_is_accepted_for_reconstruction() {
    let m = SwinMae::new(ModelSpec::default(), 0).unwrap();
    let plan = MaskPlan::keep_all(m.geometry.d, m.spec.mask_window_r);
    assert!(m.reconstruct_value(&image(1, 32), &plan).is_ok());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let m = SwinMae::new(ModelSpec::default(), 0).unwrap();
    let plan = m.plan(&mut RngState::new(0)).unwrap();
    let e = m.loss_and_grads(&image(0, 16), &plan).err().unwrap();
    assert_eq!(e.kind(), "shape");
}

#[test]
fn invalid_specs_are_config_errors() {
    let bad = [
        ModelSpec {
            encoder_variant: EncoderVariant::I,
            ..ModelSpec::default()
        },
        ModelSpec {
            use_abs_pos_embed: true,
            ..ModelSpec::default()
        },
        ModelSpec {
            embed_dim: 15,
            ..ModelSpec::default()
        },
        ModelSpec {
            mask_ratio: 0.99,
            ..ModelSpec::default()
        },
    ];
    for spec in bad {
        assert_eq!(SwinMae::new(spec.clone(), 0).unwrap_err().kind(), "config", "{spec:?}");
    }
}

#[test]
fn from_params_checks_layout() {
    let a = SwinMae::new(ModelSpec::default(), 0).unwrap();
    let vit = ModelSpec {
        decoder_variant: DecoderVariant::Vit,
        ..ModelSpec::default()
    };
    assert!(SwinMae::from_params(vit, a.params.clone()).is_err());
    let b = SwinMae::from_params(ModelSpec::default(), a.params.clone()).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn same_seed_same_weights() {
    let a = SwinMae::new(ModelSpec::default(), 11).unwrap();
    let b = SwinMae::new(ModelSpec::default(), 11).unwrap();
    let c = SwinMae::new(ModelSpec::default(), 12).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn reference_autoencoder_trains_on_random_patches() {
    let m = VitMae::new(VitMaeSpec::default(), 0).unwrap();
    let plan = MaskedModel::plan(&m, &mut RngState::new(1)).unwrap();
    assert_eq!(plan.num_tokens(), 16);
    assert_eq!(plan.keep_indices.len(), 4);
    let (loss, _) = MaskedModel::loss_and_grads(&m, &image(2, 32), &plan).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
}
