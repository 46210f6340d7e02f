use revelio_core::classifier::{evaluate_run, ClassifierConfig, DeviceMeta};
use revelio_core::probing::ProbeConfig;
use revelio_core::simulator::{generate_corpus, simulate_session, SimOptions};

#[test]
fn noiseless_corpus_matches_ground_truth() {
    let cfg = ProbeConfig::default();
    let ccfg = ClassifierConfig::default();
    let mut wrong = Vec::new();
    for (i, t) in generate_corpus(200, 7).iter().enumerate() {
        let rec = simulate_session(t, &cfg, i as u64, &SimOptions::noiseless()).unwrap();
        let meta = DeviceMeta { technology: t.technology, ..Default::default() };
        let (_, v) = evaluate_run(&rec, &meta, &ccfg);
        if v.kind != t.truth {
            wrong.push(format!("{}: truth {} got {} {:?}", t.name, t.truth, v.kind, v.evidence));
        }
    }
    assert!(wrong.is_empty(), "{}", wrong.join("\n"));
}
