use advpatch::naturalizer::*;
use advpatch::Error;
use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

fn latent(v: Vec<f32>, shape: (usize, usize, usize)) -> LatentCode {
    LatentCode { l: Tensor::from_vec(v, shape, &Device::Cpu).unwrap(), source: LatentSource::EncodedFromImage }
}

fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn zero_perturbation_is_identity_and_negation_inverts() {
    let v: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
    let l = latent(v.clone(), (4, 2, 3));
    let zero = LatentPerturbation { delta: l.l.zeros_like().unwrap(), norm_budget: 0.0 };
    assert_eq!(values(&perturb_latent(&l, &zero).unwrap()), v);
    let neg = LatentPerturbation { delta: l.l.neg().unwrap(), norm_budget: 0.0 };
    assert!(values(&perturb_latent(&l, &neg).unwrap()).iter().all(|&x| x == 0.0));
    let bad = LatentPerturbation { delta: Tensor::zeros((4, 3, 2), DType::F32, &Device::Cpu).unwrap(), norm_budget: 0.0 };
    assert!(matches!(perturb_latent(&l, &bad), Err(Error::Shape(_))));
}

#[test]
fn regularizer_arithmetic() {
    assert!((latent_regularizer(&[3.0, 4.0], 0.01) - 0.25).abs() < 1e-12);
    assert_eq!(latent_regularizer(&[0.0; 16], 0.01), 0.0);
    assert!((latent_regularizer(&[1.0; 16], 0.5) - 8.0).abs() < 1e-12);
    let t = Tensor::new(&[[[[3.0f64, 4.0]]], [[[0.0, 0.0]]]], &Device::Cpu).unwrap();
    let r = latent_regularizer_tensor(&t, 0.01).unwrap().to_scalar::<f64>().unwrap();
    assert!((r - 0.125).abs() < 1e-12, "{r}");
}

#[test]
fn gan_closed_forms() {
    let ln2 = std::f64::consts::LN_2;
    assert!((gan_discriminator_loss(&[0.5], &[0.5]).unwrap() - 2.0 * ln2).abs() < 1e-9);
    assert!((gan_generator_loss(&[0.5], 0.0, 1.0).unwrap() - ln2).abs() < 1e-9);
    assert!((gan_generator_loss(&[0.5], 2.0, 0.25).unwrap() - (ln2 + 0.5)).abs() < 1e-9);
    assert!(gan_discriminator_loss(&[1.0], &[0.0]).unwrap().abs() < 1e-6);
    assert!(gan_discriminator_loss(&[0.0], &[1.0]).unwrap().is_finite());
    let half = Tensor::new(&[0.5f64, 0.5], &Device::Cpu).unwrap();
    let d = gan_discriminator_loss_tensor(&half, &half).unwrap().to_scalar::<f64>().unwrap();
    assert!((d - 2.0 * ln2).abs() < 1e-9);
}

#[test]
fn missing_decoder_reports_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_decoder(DecoderKind::Tiny, &dir.path().join("absent")).err().unwrap();
    assert!(matches!(err, Error::Dependency(_)));
    assert!(err.to_string().contains("make-decoder"));
}

#[test]
fn tiny_decoder_roundtrip_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let images = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
    fit_tiny_autoencoder(dir.path(), &images, (16, 16), 0, TinyConfig::default(), 3).unwrap();
    let ae = TinyAutoencoder::load(dir.path()).unwrap();
    let loaded = load_decoder(DecoderKind::Tiny, dir.path()).unwrap();
    assert_eq!(loaded.frozen_checksum().unwrap(), ae.frozen_checksum().unwrap());
    let l = Tensor::randn(0f32, 1.0, (1, 4, 4, 4), &Device::Cpu).unwrap();
    let img = decode_latent(loaded.as_ref(), &l, 12, 12).unwrap();
    assert_eq!(img.dims(), &[1, 3, 12, 12]);
    assert!(values(&img).iter().all(|v| (-1.0..=1.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturb_then_subtract(v in proptest::collection::vec(-4.0f32..4.0, 12), d in proptest::collection::vec(-1.0f32..1.0, 12)) {
        let l = latent(v.clone(), (3, 2, 2));
        let dt = Tensor::from_vec(d.clone(), (3, 2, 2), &Device::Cpu).unwrap();
        let p = perturb_latent(&l, &LatentPerturbation { delta: dt.clone(), norm_budget: 1.0 }).unwrap();
        let back = values(&(p - dt).unwrap());
        for (a, b) in back.iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn regularizer_is_homogeneous(d in proptest::collection::vec(-2.0f64..2.0, 1..32), k in 0.1f64..4.0, w in 0.0f64..1.0) {
        let scaled: Vec<f64> = d.iter().map(|x| x * k).collect();
        let base = latent_regularizer(&d, w);
        prop_assert!(base >= 0.0);
        prop_assert!((latent_regularizer(&scaled, w) - k * k * base).abs() < 1e-9 * (1.0 + base * k * k));
    }

    #[test]
    fn discriminator_loss_nonnegative(r in proptest::collection::vec(0.0f64..=1.0, 1..8), f in proptest::collection::vec(0.0f64..=1.0, 1..8)) {
        prop_assert!(gan_discriminator_loss(&r, &f).unwrap() >= 0.0);
    }
}
