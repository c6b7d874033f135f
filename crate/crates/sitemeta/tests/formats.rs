use std::io::Cursor;

use proptest::prelude::*;

use sitemeta::binfmt::{
    read_checkpoint, read_dataset, read_tensor, write_checkpoint, write_dataset, write_tensor,
    FormatError,
};
use sitemeta_core::backbone::{forward, ModelSpec};
use sitemeta_core::episodes::{synth_generate, synth_volumes, SynthConfig};
use sitemeta_core::metalearn::{Checkpoint, MetaConfig, MetaModel, Order};
use sitemeta_core::Tensor;

proptest! {
    #[test]
    fn tensors_round_trip(
        name in "[a-z0-9._]{0,12}",
        shape in proptest::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) % 1000) as f64 / 7.0 - 50.0).collect();
        let t = Tensor::new(&shape, data).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &name, &t).unwrap();
        prop_assert_eq!(buf.len(), 8 + name.len() + 8 + 8 * shape.len() + 8 * n);
        let (back_name, back) = read_tensor(&mut Cursor::new(buf)).unwrap();
        prop_assert_eq!(back_name, name);
        prop_assert!(back.bit_eq(&t));
    }
}

#[test]
fn tensor_layout_is_little_endian() {
    let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
    let mut buf = Vec::new();
    write_tensor(&mut buf, "w", &t).unwrap();
    let mut expected = Vec::new();
    expected.extend(1u64.to_le_bytes());
    expected.push(b'w');
    expected.extend(1u64.to_le_bytes());
    expected.extend(2u64.to_le_bytes());
    expected.extend(1.0f64.to_le_bytes());
    expected.extend((-2.5f64).to_le_bytes());
    assert_eq!(buf, expected);
}

#[test]
fn datasets_round_trip() {
    let table = synth_generate(&SynthConfig {
        n_sites: 5,
        n_per_site: 12,
        feature_dim: 3,
        split: [3, 1, 1],
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_dataset(&mut buf, &table).unwrap();
    let back = read_dataset(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(back.roles, table.roles);
    for (a, b) in back.sites.iter().zip(&table.sites) {
        assert!(a.features.bit_eq(&b.features));
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.holdout, b.holdout);
        assert_eq!(a.generation, b.generation);
    }
    let mut again = Vec::new();
    write_dataset(&mut again, &back).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn volume_datasets_round_trip() {
    let cfg = SynthConfig {
        n_sites: 3,
        n_per_site: 8,
        split: [1, 1, 1],
        ..SynthConfig::default()
    };
    let table = synth_volumes(&cfg, [4, 3, 2]).unwrap();
    let mut buf = Vec::new();
    write_dataset(&mut buf, &table).unwrap();
    let back = read_dataset(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(back.feature_shape(), &[4, 3, 2]);
    assert!(back.sites[2].features.bit_eq(&table.sites[2].features));
}

#[test]
fn damaged_datasets_are_rejected() {
    let table = synth_generate(&SynthConfig {
        n_sites: 3,
        n_per_site: 8,
        feature_dim: 2,
        split: [1, 1, 1],
        ..SynthConfig::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_dataset(&mut buf, &table).unwrap();

    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        read_dataset(&mut Cursor::new(bad_magic)),
        Err(FormatError::BadMagic { .. })
    ));

    let mut bad_version = buf.clone();
    bad_version[4] = 9;
    assert!(matches!(
        read_dataset(&mut Cursor::new(bad_version)),
        Err(FormatError::Version(9))
    ));

    let truncated = &buf[..buf.len() - 3];
    assert!(read_dataset(&mut Cursor::new(truncated)).is_err());

    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(matches!(
        read_dataset(&mut Cursor::new(trailing)),
        Err(FormatError::Corrupt(_))
    ));
}

fn checkpoint(spec: ModelSpec, seed: u64) -> Checkpoint {
    let config = MetaConfig {
        seed,
        order: Order::First,
        inner_steps: 3,
        meta_lr: 2.5e-4,
        ..MetaConfig::default()
    };
    let model = MetaModel::init(&spec, &config).unwrap();
    Checkpoint {
        score: 0.8125,
        epoch: 17,
        spec,
        params: model.params,
        lr_table: model.lr_table.filled(0.0375),
        config,
    }
}

fn round_trip(c: &Checkpoint) -> Checkpoint {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, c).unwrap();
    read_checkpoint(&mut Cursor::new(buf)).unwrap()
}

#[test]
fn checkpoints_reproduce_forward_outputs_bit_for_bit() {
    for (spec, shape) in [
        (ModelSpec::mlp(&[5, 7, 3, 1]).unwrap(), vec![4, 5]),
        (ModelSpec::vgg_tiny(8, 12).unwrap(), vec![3, 8, 12]),
    ] {
        let c = checkpoint(spec, 3);
        let back = round_trip(&c);
        assert_eq!(back.spec, c.spec);
        assert_eq!(back.config, c.config);
        assert_eq!(back.lr_table, c.lr_table);
        assert_eq!((back.score, back.epoch), (0.8125, 17));
        assert!(back.params.bit_eq(&c.params));
        let n: usize = shape.iter().product();
        let x = Tensor::new(&shape, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = forward(&c.spec, &c.params, &x).unwrap();
        let b = forward(&back.spec, &back.params, &x).unwrap();
        assert!(a.bit_eq(&b));
    }
}

#[test]
fn checkpoint_with_mismatched_parameters_is_rejected() {
    let mut c = checkpoint(ModelSpec::mlp(&[2, 1]).unwrap(), 0);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &c).unwrap();
    // Claim a different network in the model record: one more hidden layer.
    c.spec = ModelSpec::mlp(&[2, 2, 1]).unwrap();
    let mut other = Vec::new();
    write_checkpoint(&mut other, &c).unwrap();
    assert!(read_checkpoint(&mut Cursor::new(other)).is_err());
    assert!(read_checkpoint(&mut Cursor::new(buf)).is_ok());
}
