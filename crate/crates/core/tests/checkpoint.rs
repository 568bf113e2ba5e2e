mod common;

use common::{random_tensor, rng};
use gasformer::checkpoint::*;
use gasformer::training::OptimState;
use gasformer::{Error, Model, ModelConfig, StageSet, Tensor};

fn model(classes: usize, seed: u64) -> Model<f32> {
    Model::build(&ModelConfig::tiny(classes), seed).unwrap()
}

fn noisy_state(m: &Model<f32>) -> OptimState {
    let mut g = rng(9);
    let mut st = OptimState::new(&m.params);
    st.step = 17;
    for t in st.first.iter_mut().chain(st.second.iter_mut()) {
        let shape = t.shape().to_vec();
        *t = random_tensor(&mut g, &shape, 1.0);
    }
    st
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(3, 4);
    let st = noisy_state(&m);
    save_checkpoint(&path, &m, Some(123), Some(&st)).unwrap();
    let back = load_checkpoint(&path, &LoadOptions::default()).unwrap();
    assert_eq!(back.model.config, m.config);
    assert_eq!(back.model.params, m.params);
    assert_eq!(back.iteration, Some(123));
    assert_eq!(back.optimizer, Some(st));
    assert!(!back.head_reinitialized);

    let image: Tensor<f32> = random_tensor(&mut rng(1), &[3, 40, 36], 2.0);
    assert_eq!(m.infer(&image, true).unwrap(), back.model.infer(&image, true).unwrap());
    assert_eq!(encode(&back.model, Some(123), back.optimizer.as_ref()).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn weights_only_checkpoint_has_no_training_state() {
    let m = model(2, 0);
    let loaded = decode(&encode(&m, None, None).unwrap(), &LoadOptions::default()).unwrap();
    assert_eq!(loaded.iteration, None);
    assert!(loaded.optimizer.is_none());
}

#[test]
fn head_reinit_transfers_everything_but_the_classifier() {
    let m = model(11, 2);
    let bytes = encode(&m, Some(5), Some(&noisy_state(&m))).unwrap();
    let target = ModelConfig::tiny(2);

    let refused = decode(&bytes, &LoadOptions { config: Some(target.clone()), ..Default::default() });
    assert!(matches!(refused, Err(Error::Config { .. })));

    let opts = LoadOptions { config: Some(target), reinit_head: true, seed: 77 };
    let t = decode(&bytes, &opts).unwrap();
    assert!(t.head_reinitialized);
    assert!(t.optimizer.is_none());
    assert_eq!(t.model.config.num_classes, 2);
    for (_, p) in t.model.params.iter() {
        let src = &m.params.get(m.params.find(&p.name).unwrap()).value;
        if p.name.starts_with(CLASSIFIER_PREFIX) {
            assert_eq!(p.value.shape()[0], 2);
        } else {
            assert_eq!(&p.value, src, "{}", p.name);
        }
    }
    assert_eq!(decode(&bytes, &opts).unwrap().model.params, t.model.params);
}

#[test]
fn malformed_inputs_are_format_errors() {
    let m = model(2, 1);
    let bytes = encode(&m, Some(1), None).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad, &LoadOptions::default()), Err(Error::Format(_))));
    for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut], &LoadOptions::default()), Err(Error::Format(_))), "cut {cut}");
    }

    let mut doubled = bytes.clone();
    let tail_start = bytes.len() - tail_record_len(&m);
    doubled.extend_from_slice(&bytes[tail_start..]);
    assert!(matches!(decode(&doubled, &LoadOptions::default()), Err(Error::Format(_))));

    let other = ModelConfig::tiny(2).with_stages(StageSet::Three);
    assert!(decode(&bytes, &LoadOptions { config: Some(other), ..Default::default() }).is_err());

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(&dir.path().join("absent"), &LoadOptions::default()), Err(Error::Io(_))));
}

/// Byte length of the last record written for a weights-plus-iteration
/// checkpoint: the iteration scalar.
fn tail_record_len(_: &Model<f32>) -> usize {
    let name = "meta.iteration";
    4 + name.len() + 1 + 1 + 8
}
