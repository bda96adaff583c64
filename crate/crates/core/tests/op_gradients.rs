use mtnlu_core::encoder::EncoderConfig;
use mtnlu_core::gradcheck::{gradient_check, worst, GradCheckConfig, GradCheckReport};
use mtnlu_core::model::Mode;
use mtnlu_core::param::ParamStore;
use mtnlu_core::model::ModelBundle;
use mtnlu_core::reference::{op_gradchecks, reference_gradcheck, reference_gradcheck_model, reference_spec};
use mtnlu_core::rng::Xoshiro256pp;
use mtnlu_core::tape::Tape;
use mtnlu_core::tensor::Tensor;

fn assert_passes(name: &str, r: GradCheckReport) {
    assert!(r.passed(), "{name}: {}\n{r}", worst(&r));
    assert!(r.checked() > 0, "{name}: nothing checked");
    assert_eq!(r.unresolved(), 0, "{name}: unresolved coordinates\n{r}");
}

#[test]
fn sum_of_product_matches_closed_form() {
    let mut rng = Xoshiro256pp::seed_from_u64(3);
    let mut params = ParamStore::<f64>::new();
    let a = params.normal("a", &[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let f = |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
        let av = p.on_tape(tape, a);
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv)?;
        Ok(tape.sum(c))
    };
    let r = gradient_check(f, &mut params, Mode::Eval, None, &GradCheckConfig::default()).unwrap();
    assert_passes("sum(A×B)", r);
}

#[test]
fn every_op_in_isolation() {
    let reports = op_gradchecks(&GradCheckConfig::default()).unwrap();
    let names: Vec<&str> = reports.iter().map(|(n, _)| n.as_str()).collect();
    for op in ["matmul", "softmax rows", "layer_norm", "gelu", "cross_entropy soft", "symmetric_kl", "lexicon", "lstm"] {
        assert!(names.contains(&op), "{op} missing from the suite");
    }
    for (name, r) in reports {
        if name == "relu" {
            // Coordinates near the kink may not resolve.
            assert!(r.passed(), "relu: {r}");
        } else {
            assert_passes(&name, r);
        }
    }
}

#[test]
fn single_layer_single_head_transformer() {
    let cfg = GradCheckConfig::default();
    for (task, r) in reference_gradcheck(EncoderConfig::transformer(1, 8, 1, 16), 4, &cfg).unwrap() {
        assert!(r.passed(), "{task}: {}", worst(&r));
    }
}

#[test]
fn lstm_reference_model() {
    let cfg = GradCheckConfig::default();
    // Unit-scale embeddings, so recurrent gradients are well above the
    // finite-difference noise floor.
    let mut model = ModelBundle::<f64>::new(reference_spec(EncoderConfig::lstm(1, 8)), 2).unwrap();
    for name in ["lexicon.word", "lexicon.position", "lexicon.segment"] {
        let id = model.params.find(name).unwrap();
        let t = model.params.get(id).map(|v| v * 10.0);
        model.params.set(id, t).unwrap();
    }
    for (task, r) in reference_gradcheck_model(&mut model, 2, &cfg).unwrap() {
        println!("{task}: checked {} unresolved {}", r.checked(), r.unresolved());
        assert!(r.passed(), "{task}: {}", worst(&r));
        assert!(r.unresolved() * 10 < r.checked(), "{task}");
    }
}
