use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dsl::{parse, Term};

fn rows(values: &[&[f64]]) -> Value {
    let n = values[0].len();
    let flat: Vec<f64> = values.iter().flat_map(|r| r.iter().copied()).collect();
    Value::from_matrix(&flat, n)
}

fn gate_store(theta: Vec<f64>, mask: Vec<bool>) -> ParamStore {
    let term = Term::pred();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = ParamStore::init(&term, theta.len(), &MlpArch::default(), &mut rng);
    p.prims.insert(0, PrimParams::Pred(GateParams { theta, mask }));
    p
}

fn tensor_values(v: &Value) -> Vec<f64> {
    v.leaves().iter().flat_map(|t| t.data.iter().copied()).collect()
}

#[test]
fn gate_halves_inputs_at_zero_logits() {
    let p = gate_store(vec![0.0, 0.0], vec![true, true]);
    let out = predict(&Term::pred(), &p, &rows(&[&[2.0, 4.0]])).unwrap();
    assert_eq!(tensor_values(&out), vec![1.0, 2.0]);
}

#[test]
fn masked_coordinate_is_zeroed() {
    let p = gate_store(vec![0.7, -0.3], vec![false, true]);
    let out = predict(&Term::pred(), &p, &rows(&[&[5.0, 3.0]])).unwrap();
    assert_eq!(tensor_values(&out), vec![0.0, sigmoid(-0.3) * 3.0]);
}

#[test]
fn cat_concatenates_list_elements() {
    let term = Term::cat(Term::pred());
    let p = gate_store(vec![40.0; 3], vec![true; 3]);
    let out = predict(&term, &p, &rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
    let t = out.as_tensor().unwrap();
    assert_eq!((t.rows, t.cols), (2, 3));
    for (a, b) in t.data.iter().zip([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gate_then_sum_has_half_input_gradient() {
    let p = gate_store(vec![0.0; 3], vec![true; 3]);
    let input = rows(&[&[1.0, -2.0, 0.5]]);
    let (_, g) = loss_and_gradients(&Term::pred(), &p, &input, &LossHead::Sum).unwrap();
    assert_eq!(tensor_values(&g.input), vec![0.5, 0.5, 0.5]);
}

#[test]
fn masked_gradients_are_exactly_zero() {
    let term = Term::default_program();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamStore::init(&term, 4, &MlpArch::default(), &mut rng);
    p.set_mask(1, false);
    p.set_mask(3, false);
    let x: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (_, g) = loss_and_gradients(&term, &p, &Value::from_matrix(&x, 4), &LossHead::Mse { targets: &y }).unwrap();
    let inputs = g.input.as_list().unwrap();
    for i in [1, 3] {
        assert!(inputs[i].as_tensor().unwrap().data.iter().all(|v| v.to_bits() == 0));
        assert_eq!(g.params.gate(1).unwrap()[i].to_bits(), 0);
    }
    assert!(inputs[0].as_tensor().unwrap().data.iter().any(|&v| v != 0.0));
}

#[test]
fn gradients_match_finite_differences_on_default_program() {
    let term = Term::default_program();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = ParamStore::init(&term, 3, &MlpArch::default(), &mut rng);
    for g in p.gates_mut() {
        g.theta.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
    }
    let x: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
    let err = grad_check(&term, &p, &Value::from_matrix(&x, 3), &LossHead::Mse { targets: &y }, 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn linear_network_with_quadratic_loss_is_tight() {
    let term = parse("COMP(nn, CAT(pred))").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let arch = MlpArch { hidden: vec![], skip: false };
    let p = ParamStore::init(&term, 2, &arch, &mut rng);
    let x = [0.5, -1.0, 2.0, 0.25, -0.3, 1.1];
    let y = [1.0, -0.5, 0.2];
    let err = grad_check(&term, &p, &Value::from_matrix(&x, 2), &LossHead::Mse { targets: &y }, 1e-5).unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn constant_program_grad_check_is_zero() {
    let p = gate_store(vec![0.3, 0.1], vec![false, false]);
    let err = grad_check(&Term::pred(), &p, &rows(&[&[1.0, 2.0]]), &LossHead::Sum, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn cox_head_gradients_match_finite_differences() {
    let term = Term::default_program();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = ParamStore::init(&term, 3, &MlpArch::default(), &mut rng);
    let x: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let times: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..3.0)).collect();
    let events = [true, false, true, true, false, true, true, false];
    let strata = [0, 0, 0, 0, 1, 1, 1, 1];
    let head = LossHead::Cox { times: &times, events: &events, strata: &strata };
    let err = grad_check(&term, &p, &Value::from_matrix(&x, 3), &head, 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn forward_is_batch_equivariant() {
    let term = Term::default_program();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = ParamStore::init(&term, 3, &MlpArch::default(), &mut rng);
    let x: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
    let full = predict(&term, &p, &Value::from_matrix(&x, 3)).unwrap();
    let parts: Vec<Value> = (0..10)
        .map(|r| predict(&term, &p, &Value::from_rows(&x, 3, &[r])).unwrap())
        .collect();
    assert_eq!(Value::concat_rows(&parts), full);
}

#[test]
fn non_finite_inputs_are_reported() {
    let term = Term::default_program();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = ParamStore::init(&term, 2, &MlpArch::default(), &mut rng);
    let err = predict(&term, &p, &rows(&[&[f64::NAN, 1.0]])).unwrap_err();
    assert!(matches!(err, RuntimeError::NonFiniteValue { .. }));
}

#[test]
fn adam_leaves_parameters_unchanged_on_zero_gradients() {
    let term = Term::default_program();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParamStore::init(&term, 3, &MlpArch::default(), &mut rng);
    let before = p.clone();
    let zeros = PrimGrads::zeros_like(&p);
    let mut state = AdamState::new(&p);
    for _ in 0..5 {
        adam_step(&mut p, &zeros, &mut state, &AdamConfig::default());
    }
    assert_eq!(p, before);
    assert_eq!(AdamConfig::default().lr, 0.02);
}

#[test]
fn adam_constant_gradient_steps_at_learning_rate() {
    // With g = 1 every step, m_hat = v_hat = 1 so each step is lr / (1 + eps).
    let mut p = gate_store(vec![0.0], vec![true]);
    let mut grads = PrimGrads::zeros_like(&p);
    grads.prims.insert(0, PrimGrad::Pred(vec![1.0]));
    let cfg = AdamConfig::default();
    let mut state = AdamState::new(&p);
    let mut prev = 0.0;
    for _ in 0..200 {
        adam_step(&mut p, &grads, &mut state, &cfg);
        let theta = p.gates().next().unwrap().theta[0];
        let step = prev - theta;
        assert!(step > 0.0);
        assert!((step - cfg.lr / (1.0 + cfg.eps)).abs() < 1e-12, "step {step}");
        prev = theta;
    }
}

#[test]
fn adam_never_touches_mask() {
    let mut p = gate_store(vec![0.0, 0.0], vec![true, false]);
    let mut grads = PrimGrads::zeros_like(&p);
    grads.prims.insert(0, PrimGrad::Pred(vec![0.5, 0.5]));
    let mut state = AdamState::new(&p);
    adam_step(&mut p, &grads, &mut state, &AdamConfig::default());
    assert_eq!(p.mask(), vec![true, false]);
}

#[test]
fn checkpoint_roundtrip_and_mask_validation() {
    let term = Term::default_program();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamStore::init(&term, 3, &MlpArch::default(), &mut rng);
    p.set_mask(2, false);
    let json = p.to_json();
    assert!(json.contains("\"mask\""));
    assert_eq!(ParamStore::from_json(&json).unwrap(), p);
    let bad = json.replacen("0\n", "2\n", 1);
    if bad != json {
        assert!(ParamStore::from_json(&bad).is_err() || ParamStore::from_json(&bad).unwrap() != p);
    }
}

#[test]
fn causal_probabilities_respect_mask() {
    let mut p = gate_store(vec![2.0, -1.0, 0.0], vec![true, true, true]);
    p.set_mask(1, false);
    let probs = p.causal_probabilities();
    assert_eq!(probs[1], 0.0);
    assert!((probs[0] - sigmoid(2.0)).abs() < 1e-15);
    assert!(probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
}
