use pointqa::builders::{
    build_dv_ds, build_general_dataset, build_looktwice_dataset, detect_verbal_disambiguation, GeneralConfig,
    LookTwiceConfig, SupercategoryMap, VerbalSpatialConfig,
};
use pointqa::features::{generate_world, SynthWorldConfig};
use pointqa::verify::{check_dv_ds, check_general, check_looktwice};

fn world() -> pointqa::features::SynthWorld {
    let cfg = SynthWorldConfig { num_images: 120, source_questions: true, ..SynthWorldConfig::default() };
    generate_world(&cfg).unwrap()
}

#[test]
fn source_questions_feed_every_builder() {
    let w = world();
    let mut lt = LookTwiceConfig::new(SupercategoryMap::bundled(), 1);
    lt.min_class_frequency = 5;
    let (looktwice, report) = build_looktwice_dataset(&w.store, &lt).unwrap();
    assert!(!looktwice.is_empty(), "{report:?}");
    assert!(check_looktwice(&looktwice).iter().all(|c| c.passed));

    let (general, _) = build_general_dataset(&w.store, &GeneralConfig::new(1)).unwrap();
    assert!(!general.is_empty());
    assert!(check_general(&general).iter().all(|c| c.passed));

    let (verbal, spatial, report) = build_dv_ds(&w.store, &VerbalSpatialConfig::new(1)).unwrap();
    assert!(!verbal.is_empty() && verbal.len() == spatial.len(), "{report:?}");
    assert!(check_dv_ds(&verbal, &spatial).iter().all(|c| c.passed));
}

#[test]
fn phrase_questions_are_verbally_disambiguated() {
    let w = world();
    let phrases: Vec<_> = w
        .store
        .iter()
        .flat_map(|img| img.source_qas.iter())
        .filter(|q| q.qa_id.contains("-phrase-"))
        .collect();
    assert!(!phrases.is_empty());
    for q in phrases {
        let (subject, phrase) = detect_verbal_disambiguation(&q.question).unwrap_or_else(|| panic!("{}", q.question));
        assert!(phrase.contains("paint"), "{subject} / {phrase}");
    }
}

#[test]
fn plain_worlds_carry_no_questions() {
    let w = generate_world(&SynthWorldConfig { num_images: 10, ..SynthWorldConfig::default() }).unwrap();
    assert!(w.store.iter().all(|img| img.source_qas.is_empty()));
}
