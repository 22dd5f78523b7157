//! Quantization and checkpoint properties, shared by the property suite and
//! the acceptance run.

use cfdr::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, QuantizedLayerView};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub const LAYERS: [&str; 6] = [
    "encoder.conv1",
    "encoder.conv2",
    "encoder.conv3",
    "head.fc1",
    "head.fc2",
    "classifier",
];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn weights() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop_oneof![4 => -10.0f32..10.0, 1 => Just(0.0f32), 1 => -1e-6f32..1e-6], 1..300)
}

/// Round trip within scale/2, the scale rule, and double flip identity on
/// a bare view.
pub fn view_case(w: &[f32], pick: usize, bit: u8) -> Result<(), TestCaseError> {
    let v = QuantizedLayerView::from_weights("l", w);
    let max = w.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
    ensure(v.scale == scale, || format!("scale {} vs {scale}", v.scale))?;
    for (o, d) in w.iter().zip(&v.shadow) {
        // One rounding step of slack on top of scale/2 for the f32 products.
        let bound = v.scale / 2.0 * (1.0 + 1e-6) + f32::EPSILON * o.abs();
        ensure((o - d).abs() <= bound, || format!("{o} -> {d}, scale {}", v.scale))?;
    }
    let i = pick % w.len();
    let mut f = v.clone();
    f.flip_bit(i, bit).map_err(|e| TestCaseError::fail(e.to_string()))?;
    ensure(f.qweights[i] != v.qweights[i], || "flip changed nothing".into())?;
    f.flip_bit(i, bit).map_err(|e| TestCaseError::fail(e.to_string()))?;
    ensure(f.qweights == v.qweights && bits(&f.shadow) == bits(&v.shadow), || "double flip differs".into())
}

/// A model with random float bit patterns, some layers quantized.
pub fn random_model(seed: u64, noise: u64, quantize: u8) -> Model {
    let mut m = Model::build(ModelConfig::tiny(seed)).unwrap();
    let mut state = noise | 1;
    for p in m.params_mut() {
        for v in p.tensor.data_mut() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let cand = f32::from_bits(state as u32);
            if cand.is_finite() && state % 5 == 0 {
                *v = cand;
            }
        }
    }
    for (k, layer) in LAYERS.iter().enumerate() {
        if quantize >> k & 1 == 1 {
            m.quantize_layer(layer).unwrap();
        }
    }
    m
}

/// Double flip on the full model state, compared through checkpoint bytes.
pub fn model_flip_case(seed: u64, noise: u64, layer: usize, pick: usize, bit: u8) -> Result<(), TestCaseError> {
    let layer = LAYERS[layer % LAYERS.len()];
    let mut m = random_model(seed, noise, 0);
    m.quantize_layer(layer).unwrap();
    let before = save_checkpoint(&m);
    let n = m.quantized_view(layer).unwrap().len();
    m.flip_bit(layer, pick % n, bit).unwrap();
    ensure(save_checkpoint(&m) != before, || "flip left the state unchanged".into())?;
    m.flip_bit(layer, pick % n, bit).unwrap();
    ensure(save_checkpoint(&m) == before, || format!("{layer}[{}] bit {bit} not restored", pick % n))
}

/// save -> load -> save is byte-identical and every parameter, view and
/// scale survives bit-exactly.
pub fn checkpoint_case(seed: u64, noise: u64, quantize: u8, flips: &[(usize, usize, u8)], phase: &str) -> Result<(), TestCaseError> {
    let mut m = random_model(seed, noise, quantize);
    for &(layer, pick, bit) in flips {
        let layer = LAYERS[layer % LAYERS.len()];
        if let Some(v) = m.quantized_view(layer) {
            let n = v.len();
            m.flip_bit(layer, pick % n, bit).unwrap();
        }
    }
    m.metadata.phase = phase.to_string();
    let bytes = save_checkpoint(&m);
    let back = load_checkpoint(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
    ensure(save_checkpoint(&back) == bytes, || "second save differs".into())?;
    for (a, b) in m.params().iter().zip(back.params()) {
        ensure(a.name == b.name && a.tensor.shape() == b.tensor.shape(), || format!("{} layout", a.name))?;
        ensure(bits(a.tensor.data()) == bits(b.tensor.data()), || format!("{} bits", a.name))?;
    }
    ensure(m.quantized_layers() == back.quantized_layers(), || "view set".into())?;
    for l in m.quantized_layers() {
        let (a, b) = (m.quantized_view(&l).unwrap(), back.quantized_view(&l).unwrap());
        ensure(a.scale.to_bits() == b.scale.to_bits() && a.qweights == b.qweights, || format!("{l} view"))?;
    }
    ensure(m.metadata == back.metadata, || "metadata".into())
}

pub fn flips() -> impl Strategy<Value = Vec<(usize, usize, u8)>> {
    prop::collection::vec((0..6usize, any::<usize>(), 0..8u8), 0..12)
}

/// Runs the three properties with `cases` each; returns the first failure.
pub fn run_all(cases: u32) -> Result<(), String> {
    let cfg = || Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new(cfg())
        .run(&(weights(), any::<usize>(), 0..8u8), |(w, i, b)| view_case(&w, i, b))
        .map_err(|e| format!("view: {e}"))?;
    TestRunner::new(cfg())
        .run(&(0..4u64, any::<u64>(), 0..6usize, any::<usize>(), 0..8u8), |(s, n, l, i, b)| {
            model_flip_case(s, n, l, i, b)
        })
        .map_err(|e| format!("model flip: {e}"))?;
    TestRunner::new(cfg())
        .run(&(0..4u64, any::<u64>(), any::<u8>(), flips(), "[a-z_]{0,12}"), |(s, n, q, f, p)| {
            checkpoint_case(s, n, q, &f, &p)
        })
        .map_err(|e| format!("checkpoint: {e}"))?;
    Ok(())
}
