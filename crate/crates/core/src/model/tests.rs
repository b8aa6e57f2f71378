use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::targets::PixelSampleSet;
use crate::tensor::{PaddingMode, Tape, Tensor};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(3)
}

fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn identity_conv_network() {
    let spec = NetworkSpec {
        input_channels: 1,
        input_size: 5,
        layers: vec![LayerSpec::new(
            "id",
            LayerKind::Conv { out_channels: 1, kernel: 1, stride: 1, pad: 0, padding: PaddingMode::Zero },
        )],
        taps: vec!["id".into()],
    };
    let mut net = Network::<f64>::build(&spec, &mut rng()).unwrap();
    net.params.get_mut("id.weight").unwrap().data_mut()[0] = 1.0;
    let x = random_input([2, 1, 5, 5], 1);
    let out = net.infer(&x).unwrap();
    assert_eq!(out[0], x);
}

#[test]
fn grayscale_spec_rejects_color_input() {
    let spec = NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero);
    let net = Network::<f64>::build(&spec, &mut rng()).unwrap();
    assert!(net.infer(&Tensor::zeros(vec![1, 3, 32, 32])).is_err());
}

#[test]
fn forward_shapes_match_spec() {
    for spec in [NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero), NetworkSpec::mini_alex(1, 32, PaddingMode::Zero)] {
        let net = Network::<f32>::build(&spec, &mut rng()).unwrap();
        let outs = net.infer(&Tensor::zeros(vec![2, 1, 32, 32])).unwrap();
        for (t, s) in outs.iter().zip(spec.shapes().unwrap()) {
            assert_eq!(t.shape(), &[2, s.channels, s.height, s.width]);
        }
    }
}

#[test]
fn stride_one_tap_at_integer_location_is_indexing() {
    let tape = Tape::<f64>::new();
    let fm = random_input([2, 3, 6, 6], 4);
    let tap = tape.constant(fm.clone());
    let locs = PixelSampleSet { locations: vec![(1, 2, 5), (0, 0, 0)] };
    let col = hypercolumn_extract(&[tap], (6, 6), &locs).unwrap().value();
    for (k, &(b, y, x)) in locs.locations.iter().enumerate() {
        for c in 0..3 {
            assert_eq!(col.data()[k * 3 + c], fm.data()[((b * 3 + c) * 6 + y) * 6 + x]);
        }
    }
}

#[test]
fn two_taps_concatenate_channels() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(random_input([1, 3, 8, 8], 5));
    let b = tape.constant(random_input([1, 5, 4, 4], 6));
    let locs = PixelSampleSet { locations: vec![(0, 3, 4)] };
    assert_eq!(hypercolumn_extract(&[a, b], (8, 8), &locs).unwrap().shape(), vec![1, 8]);
    assert!(hypercolumn_extract(&[a], (8, 8), &PixelSampleSet { locations: vec![(1, 0, 0)] }).is_err());
}

#[test]
fn coordinate_alignment() {
    assert_eq!(map_coordinate(5.0, 8, 8), 5.0);
    assert_eq!(map_coordinate(1.0, 8, 4), 0.25);
    assert_eq!(map_coordinate(0.0, 8, 4), 0.0);
    assert_eq!(map_coordinate(7.0, 8, 4), 3.0);
    assert_eq!(map_coordinate(3.0, 8, 1), 0.0);
}

#[test]
fn fov_blocks_leave_existing_activations_unchanged() {
    let spec = NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero);
    let net = Network::<f64>::build(&spec, &mut rng()).unwrap();
    let ext_spec = add_fov_blocks(&spec, 2, 8).unwrap();
    let mut ext = Network::<f64>::build(&ext_spec, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    for (k, v) in &net.params.tensors {
        ext.params.tensors.insert(k.clone(), v.clone());
    }
    let x = random_input([2, 1, 32, 32], 7);
    let a = net.infer(&x).unwrap();
    let b = ext.infer(&x).unwrap();
    for (ta, tb) in a.iter().zip(&b) {
        assert_eq!(ta, tb);
    }
    assert_eq!(b.last().unwrap().shape(), &[2, 8, 1, 1]);
    assert_eq!(ext_spec.taps.len(), spec.taps.len() + 2);
}

#[test]
fn receptive_field_matches_probing() {
    // linear positive network: a pixel influences an output unit iff it lies
    // inside the computed field
    let conv = |name: &str, k: usize, s: usize| {
        LayerSpec::new(name, LayerKind::Conv { out_channels: 1, kernel: k, stride: s, pad: 0, padding: PaddingMode::Zero })
    };
    let spec = NetworkSpec {
        input_channels: 1,
        input_size: 24,
        layers: vec![
            conv("c1", 3, 1),
            LayerSpec::new("p1", LayerKind::MaxPool { kernel: 2, stride: 2 }),
            conv("c2", 3, 2),
            conv("c3", 2, 1),
        ],
        taps: vec!["c3".into()],
    };
    let mut net = Network::<f64>::build(&spec, &mut rng()).unwrap();
    for t in net.params.tensors.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 1.0);
    }
    let (rf, stride) = compute_receptive_field(&spec, "c3").unwrap();
    let base = net.infer(&Tensor::zeros(vec![1, 1, 24, 24])).unwrap().pop().unwrap();
    let (oh, ow) = (base.shape()[2], base.shape()[3]);
    for py in 0..24 {
        for px in 0..24 {
            let mut x = Tensor::zeros(vec![1, 1, 24, 24]);
            x.data_mut()[py * 24 + px] = 1.0;
            let out = net.infer(&x).unwrap().pop().unwrap();
            for oy in 0..oh {
                for ox in 0..ow {
                    let changed = out.data()[oy * ow + ox] != base.data()[oy * ow + ox];
                    let inside = (oy * stride..oy * stride + rf).contains(&py)
                        && (ox * stride..ox * stride + rf).contains(&px);
                    assert_eq!(changed, inside, "pixel ({py},{px}) unit ({oy},{ox})");
                }
            }
        }
    }
}

#[test]
fn bias_padding_fill_follows_batchnorm_and_relu() {
    let spec = NetworkSpec::mini_vgg(1, 32, PaddingMode::BiasOfPrevious);
    let mut net = Network::<f64>::build(&spec, &mut rng()).unwrap();
    let b = net.params.get_mut("conv1_1.bias").unwrap();
    b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 - 8.0);
    let s = net.stats.get_mut("conv1_1_bn").unwrap();
    s.mean.iter_mut().for_each(|m| *m = 1.0);
    s.var.iter_mut().for_each(|v| *v = 4.0);
    let idx = spec.layer_index("conv1_2").unwrap();
    let fill = net.padding_fill(idx).unwrap().unwrap();
    for (i, f) in fill.iter().enumerate() {
        let want = ((i as f64 - 9.0) / (4.0 + BN_EPS).sqrt()).max(0.0);
        assert!((f - want).abs() < 1e-12);
    }
    assert!(net.padding_fill(0).unwrap().is_none());
}

#[test]
fn running_stats_update_is_ema() {
    let spec = NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero);
    let mut net = Network::<f64>::build(&spec, &mut rng()).unwrap();
    let tape = Tape::new();
    let bound = net.bind(&tape, &|_| true);
    let x = tape.constant(random_input([2, 1, 32, 32], 8));
    let acts = net.forward(&bound, x, Mode::Train).unwrap();
    let observed = acts.batch_stats.clone();
    assert_eq!(observed.len(), 8);
    net.update_running_stats(&observed).unwrap();
    let (name, s) = &observed[0];
    let r = &net.stats[name];
    assert!((r.mean[0] - 0.01 * s.mean[0]).abs() < 1e-12);
    assert!((r.var[0] - (0.99 + 0.01 * s.var[0])).abs() < 1e-12);
}

#[test]
fn mlp_shapes() {
    let spec = MlpSpec { input: 6, hidden: vec![4], output: 3 };
    let head = Mlp::<f64>::build(&spec, "head", &mut rng()).unwrap();
    let tape = Tape::new();
    let bound = head.bind(&tape, true);
    let y = head.forward(&bound, tape.constant(random_input([5, 6, 1, 1], 9).reshape(vec![5, 6]).unwrap())).unwrap();
    assert_eq!(y.shape(), vec![5, 3]);
    assert_eq!(head.params.tensors.len(), 4);
}
