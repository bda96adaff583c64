use mtnlu_core::encoder::EncoderConfig;
use mtnlu_core::gradcheck::GradCheckConfig;
use mtnlu_core::reference::reference_gradcheck;

#[test]
fn transformer_reference_model_every_head() {
    let cfg = GradCheckConfig::default();
    let reports = reference_gradcheck(EncoderConfig::transformer(2, 32, 2, 64), 1, &cfg).unwrap();
    for (task, r) in &reports {
        println!(
            "{task}: {:.3e} checked {} skipped {} unresolved {}",
            r.max_rel_err(),
            r.checked(),
            r.skipped(),
            r.unresolved()
        );
        if !r.passed() {
            println!("{r}");
        }
    }
    for (task, r) in &reports {
        assert!(r.passed(), "{task}: {}", mtnlu_core::gradcheck::worst(r));
        assert!(r.unresolved() * 10 < r.checked(), "{task}: too few coordinates resolved");
    }
}
