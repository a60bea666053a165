//! Autodiff through the whole encoder, LoRA factors included, against
//! Richardson-extrapolated central differences in f64. Extrapolating
//! `(4·D(h/2) − D(h)) / 3` cancels the O(h²) truncation term, which at the
//! N(0, 0.02) init otherwise dominates the comparison for a 1e-3 step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use peftt::adapter::{inject_adapters, AdapterMode};
use peftt::encoder::{EncoderConfig, EncoderModel, HeadKind};
use peftt::prompt::{ResolvedVerbalizer, WrappedInput};
use peftt::tensor::{ParamStore, Tape};
use peftt::training::batch_loss;
use peftt::vocab::{CLS_ID, MASK_ID, PAD_ID};

fn input(content: &[u32], masked: bool, label: usize) -> WrappedInput {
    let mut ids = content.to_vec();
    if masked {
        ids.insert(1, MASK_ID);
    }
    let n = ids.len();
    ids.resize(9, PAD_ID);
    WrappedInput {
        pad_mask: (0..ids.len()).map(|i| i >= n).collect(),
        ids,
        mask_pos: masked.then_some(1),
        label,
    }
}

fn check(head: HeadKind, b_scale: f32) {
    let config = EncoderConfig {
        n_layers: 2,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        vocab_size: 24,
        max_len: 10,
    };
    let mut model = EncoderModel::new(config, head, 31).unwrap();
    inject_adapters(&mut model, 2, AdapterMode::ParallelLora, 32).unwrap();
    model.set_base_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let normal = Normal::new(0.0f32, b_scale).unwrap();
    for pair in model.adapters().unwrap().pairs().to_vec() {
        for x in model.params_mut().get_mut(pair.b).data_mut() {
            *x = normal.sample(&mut rng);
        }
    }
    let masked = matches!(head, HeadKind::Mlm { .. });
    let verbalizer = masked.then(|| ResolvedVerbalizer::new(vec![vec![vec![10]], vec![vec![11], vec![12, 13]], vec![vec![14]]], 24).unwrap());
    let inputs = [
        input(&[CLS_ID, 7, 8, 9, 20], masked, 0),
        input(&[CLS_ID, 15, 16], masked, 1),
        input(&[CLS_ID, 5, 6, 21, 22, 19], masked, 2),
    ];
    let refs: Vec<&WrappedInput> = inputs.iter().collect();

    let loss_of = |store: &ParamStore<f64>| {
        let mut tape = Tape::new(store);
        let loss = batch_loss(&model, &mut tape, &refs, verbalizer.as_ref()).unwrap();
        tape.value(loss)[0]
    };
    let mut store = model.params().cast::<f64>();
    let grads = {
        let mut tape = Tape::new(&store);
        let loss = batch_loss(&model, &mut tape, &refs, verbalizer.as_ref()).unwrap();
        tape.backward(loss).unwrap()
    };

    let h = 1e-3;
    let mut checked = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let analytic = grads.param(id).unwrap().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            if a.abs() <= 1e-8 {
                continue;
            }
            let orig = store.get(id).data()[k];
            let mut central = |step: f64| {
                store.get_mut(id).data_mut()[k] = orig + step;
                let up = loss_of(&store);
                store.get_mut(id).data_mut()[k] = orig - step;
                let down = loss_of(&store);
                store.get_mut(id).data_mut()[k] = orig;
                (up - down) / (2.0 * step)
            };
            let numeric = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            assert!(rel < 1e-4, "{name}[{k}]: autodiff {a:e}, numeric {numeric:e}, rel {rel:e}");
            checked += 1;
        }
    }
    assert!(checked > 1000, "only {checked} entries checked");
}

#[test]
fn untied_mlm_head_with_adapters() {
    check(HeadKind::Mlm { tied: false }, 0.02);
}

#[test]
fn tied_mlm_head_with_adapters() {
    check(HeadKind::Mlm { tied: true }, 0.02);
}

#[test]
fn classifier_head_with_adapters() {
    check(HeadKind::Classifier { n_classes: 3 }, 0.02);
}

#[test]
fn large_adapter_factors() {
    check(HeadKind::Mlm { tied: false }, 0.5);
}
