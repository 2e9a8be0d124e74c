//! Memory audit against the per-layer formula and against what training stores.

use tracegrad::lowmem::{memory_footprint, LayerDims, ProbeMode, Storage};
use tracegrad::mem_audit::{audit, AuditConfig, Convention};
use tracegrad::nn::{GradMode, LayerSpec, Network, NetworkSpec, StepContext};
use tracegrad::rng::{Domain, SeqRng};
use tracegrad::{ChannelTensor, ImageShape};

fn conv3() -> NetworkSpec {
    NetworkSpec::mnist_conv3(GradMode::Exact)
}

#[test]
fn conv_rows_follow_memory_footprint() {
    let spec = conv3();
    let dims = spec.layer_dims().unwrap();
    for mode in [ProbeMode::Independent, ProbeMode::Multi] {
        let mut cfg = AuditConfig::new(64, 16);
        cfg.mode = mode.clone();
        let rep = audit(&spec, &cfg).unwrap();
        for row in &rep.rows {
            let din = dims[row.layer].0;
            if let LayerSpec::Conv { c_in, c_out, .. } = spec.layers[row.layer].layer {
                let fp = memory_footprint(
                    &LayerDims { pixels: din.pixels(), c_in, c_out, batch: 64 },
                    &Storage::Probed { r: 16, mode: mode.clone() },
                );
                assert_eq!((row.conventional, row.probed), (fp.conventional, fp.stored));
            }
        }
    }
}

#[test]
fn nnlib_convention_charges_more_than_native() {
    let spec = conv3();
    let native = audit(&spec, &AuditConfig::new(64, 16)).unwrap();
    let mut cfg = AuditConfig::new(64, 16);
    cfg.convention = Convention::Nnlib;
    let nnlib = audit(&spec, &cfg).unwrap();
    assert!(nnlib.total_conventional > native.total_conventional);
    assert!(nnlib.factor() < native.factor());
    assert!(nnlib.factor() > 1.0);
}

#[test]
fn training_tape_matches_native_audit_for_conv_layers() {
    let mut net = Network::build(&conv3(), 1).unwrap();
    net.set_conv_mode(&GradMode::Multi { r: 16 }).unwrap();
    let mut rng = SeqRng::from_u64(2, Domain::Instance);
    let x = ChannelTensor::from_fn(ImageShape::square(28).unwrap(), 1, 8, |_, _, _| rng.normal()).unwrap();
    let (_, tape) = net.forward_train(&x, &StepContext::new(0, 0)).unwrap();
    let rep = audit(&conv3(), &AuditConfig::new(8, 16)).unwrap();
    let audited: u64 = rep.rows.iter().filter(|r| r.kind == "conv").map(|r| r.probed).sum();
    assert_eq!(tape.conv_scalars(&net), audited);
    assert_eq!(audited, 3 * 16 * 8);
}

#[test]
fn shape_only_presets_audit() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    for name in ["squeezenet1_1", "resnet18"] {
        let spec = NetworkSpec::load(&root.join(format!("{name}.json"))).unwrap();
        assert!(spec.shape_only);
        assert!(Network::build(&spec, 0).is_err());
        let rep = audit(&spec, &AuditConfig::new(64, 16)).unwrap();
        assert!(rep.factor() > 1.0, "{name}");
    }
}
