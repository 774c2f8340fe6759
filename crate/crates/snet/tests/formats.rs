use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snet::checkpoint::{Checkpoint, TrainState};
use snet::stnt::{read_array, read_tensor, write_array, write_tensor, Array, Payload};
use snet::Error;
use snet_core::model::{Model, NetworkConfig};
use snet_core::optim::Sgd;
use snet_core::train::predict_logits;
use snet_core::Tensor;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1e3..1e3))
}

fn format_offset(e: Error) -> usize {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn large_tensor_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.stnt");
    let t = random_tensor(&[3, 224, 224], 1);
    write_tensor(&p, &t).unwrap();
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 4 + 3 + 3 * 8 + 3 * 224 * 224 * 8);
    assert!(read_tensor(&p).unwrap().bit_eq(&t));
}

#[test]
fn special_values_survive() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.stnt");
    let t = Tensor::new(&[5], vec![0.0, -0.0, f64::MIN_POSITIVE, f64::MAX, 1e-310]).unwrap();
    write_tensor(&p, &t).unwrap();
    let back = read_tensor(&p).unwrap();
    for (a, b) in back.data().iter().zip(t.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn constant_half_decodes_by_hand() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.stnt");
    write_tensor(&p, &Tensor::full(&[2, 3], 0.5)).unwrap();
    let b = std::fs::read(&p).unwrap();
    assert_eq!(&b[..4], b"STNT");
    assert_eq!((b[4], b[5], b[6]), (1, 1, 2));
    let dims: Vec<u64> = (0..2).map(|i| u64::from_le_bytes(b[7 + 8 * i..15 + 8 * i].try_into().unwrap())).collect();
    assert_eq!(dims, [2, 3]);
    let vals: Vec<f64> = b[23..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(vals, vec![0.5; 6]);
    // 0.5 as an IEEE double: sign 0, exponent 0x3fe, mantissa 0.
    assert_eq!(&b[23..31], &[0, 0, 0, 0, 0, 0, 0xe0, 0x3f]);
}

#[test]
fn hand_built_f32_file_reads_as_half() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.stnt");
    let mut b = b"STNT".to_vec();
    b.extend([1, 0, 1]);
    b.extend(4u64.to_le_bytes());
    for _ in 0..4 {
        b.extend([0x00, 0x00, 0x00, 0x3f]);
    }
    std::fs::write(&p, b).unwrap();
    let t = read_tensor(&p).unwrap();
    assert_eq!(t.shape(), &[4]);
    assert_eq!(t.data(), &[0.5; 4]);
}

#[test]
fn truncation_reports_the_end_of_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.stnt");
    write_tensor(&p, &random_tensor(&[4, 4], 2)).unwrap();
    let full = std::fs::read(&p).unwrap();
    for cut in [0, 3, 5, 6, 7, 12, 22, 23, 30, full.len() - 1] {
        std::fs::write(&p, &full[..cut]).unwrap();
        let e = read_array(&p).unwrap_err();
        assert_eq!(format_offset(e), cut, "cut at {cut}");
    }
}

#[test]
fn header_errors_name_their_byte() {
    let good = Array::from_tensor(&Tensor::ones(&[2])).encode();
    let cases: [(usize, u8, usize); 3] = [(0, b'X', 0), (4, 2, 4), (5, 9, 5)];
    for (at, byte, offset) in cases {
        let mut b = good.clone();
        b[at] = byte;
        assert_eq!(Array::decode(&b).unwrap_err().offset, offset);
    }
    let mut b = good.clone();
    b.push(0);
    assert_eq!(Array::decode(&b).unwrap_err().offset, good.len());

    let mut huge = b"STNT".to_vec();
    huge.extend([1, 1, 2]);
    huge.extend(u64::MAX.to_le_bytes());
    huge.extend(u64::MAX.to_le_bytes());
    assert_eq!(Array::decode(&huge).unwrap_err().offset, 7);
}

#[test]
fn labels_and_text_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.stnt");
    let a = Array::labels(&[2, 2], vec![0, 3, u32::MAX, 1]).unwrap();
    write_array(&p, &a).unwrap();
    assert_eq!(read_array(&p).unwrap().to_labels().unwrap(), vec![0, 3, u32::MAX, 1]);
    let t = Array::text("key = value\n");
    assert_eq!(Array::decode(&t.encode()).unwrap().to_text().unwrap(), "key = value\n");
    assert!(Array::labels(&[3], vec![1, 2]).is_err());
    assert!(Array::from_tensor(&Tensor::ones(&[1])).to_labels().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_dtype_roundtrips(shape in proptest::collection::vec(0usize..4, 0..4), seed in any::<u64>(), kind in 0u8..4) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let payload = match kind {
            0 => Payload::F32((0..n).map(|_| f32::from_bits(rng.random())).collect()),
            1 => Payload::F64((0..n).map(|_| f64::from_bits(rng.random())).collect()),
            2 => Payload::U32((0..n).map(|_| rng.random()).collect()),
            _ => Payload::U8((0..n).map(|_| rng.random()).collect()),
        };
        let a = Array::new(&shape, payload).unwrap();
        let bytes = a.encode();
        let back = Array::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back.shape, shape);
    }
}

fn small_model(seed: u64) -> Model {
    let cfg = NetworkConfig { base_width: 2, ..NetworkConfig::default() };
    Model::build(&cfg, seed).unwrap()
}

#[test]
fn checkpoint_roundtrip_gives_bitwise_identical_logits() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.snck");
    let mut model = small_model(4);
    // Move the batch-norm statistics off their initial values.
    for stats in model.buffers.values_mut() {
        stats.mean.iter_mut().for_each(|m| *m += 0.25);
        stats.var.iter_mut().for_each(|v| *v *= 1.5);
    }
    let mut opt = Sgd::new(0.05, 0.9, 1e-4).unwrap();
    opt.step = 17;
    for (n, t) in model.params.iter() {
        opt.velocity.insert(n.clone(), t.map(|v| v * 0.5));
    }
    let ck = Checkpoint { model: model.clone(), optimizer: Some(opt.clone()), state: TrainState { epoch: 3, seed: 4, best: Some((2, 0.75)) } };
    ck.save(&p).unwrap();
    let mut back = Checkpoint::load(&p).unwrap();
    assert!(back.model.params.bit_eq(&model.params));
    assert_eq!(back.model.buffers, model.buffers);
    assert_eq!(back.optimizer.as_ref(), Some(&opt));
    assert_eq!(back.state, ck.state);
    assert_eq!(back.encode(), ck.encode());

    let x = random_tensor(&[2, 1, 64, 64], 5).map(|v| v / 1e3);
    let a = predict_logits(&mut model, &x).unwrap();
    let b = predict_logits(&mut back.model, &x).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn checkpoint_without_optimizer() {
    let ck = Checkpoint { model: small_model(1), optimizer: None, state: TrainState { epoch: 0, seed: 1, best: None } };
    let back = Checkpoint::decode(&ck.encode()).unwrap();
    assert!(back.optimizer.is_none());
    assert!(back.model.params.bit_eq(&ck.model.params));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ck = Checkpoint { model: small_model(2), optimizer: None, state: TrainState { epoch: 0, seed: 2, best: None } };
    let bytes = ck.encode();
    let e = Checkpoint::decode(&bytes[..bytes.len() / 2]).unwrap_err();
    assert_eq!(format_offset(e), bytes.len() / 2);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(format_offset(Checkpoint::decode(&bad).unwrap_err()), 0);

    // A parameter with the wrong shape is a data error, not a panic.
    let mut entries = ck.entries();
    let (_, a) = entries.iter_mut().find(|(n, _)| n.starts_with("param/")).unwrap();
    *a = Array::from_tensor(&Tensor::zeros(&[1]));
    let mut out = b"SNCK".to_vec();
    out.push(1);
    out.extend((entries.len() as u32).to_le_bytes());
    for (n, a) in &entries {
        out.extend((n.len() as u32).to_le_bytes());
        out.extend(n.as_bytes());
        a.encode_into(&mut out);
    }
    assert!(matches!(Checkpoint::decode(&out), Err(Error::Data(_))));

    // Dropping an entry is reported by name.
    let mut entries = ck.entries();
    let dropped = entries.remove(5).0;
    let mut out = b"SNCK".to_vec();
    out.push(1);
    out.extend((entries.len() as u32).to_le_bytes());
    for (n, a) in &entries {
        out.extend((n.len() as u32).to_le_bytes());
        out.extend(n.as_bytes());
        a.encode_into(&mut out);
    }
    match Checkpoint::decode(&out) {
        Err(Error::Data(m)) => assert!(m.contains(&dropped), "{m}"),
        other => panic!("{other:?}"),
    }
}
