use satseg_web::{alignment_report, corruption_report, mask_report, rule_report};

#[test]
fn mask_splits_lookahead_across_layers() {
    let r = mask_report(10, 3, 7).unwrap();
    assert_eq!(r["per_layer"], 2);
    assert_eq!(r["remainder"], 1);
    assert_eq!(r["horizon"][0], 6);
    assert_eq!(r["horizon"][9], 9);
    let row0 = r["mask"][0].as_array().unwrap();
    let allowed: Vec<bool> = row0.iter().map(|v| v.as_bool().unwrap()).collect();
    assert_eq!(
        allowed,
        [true, true, true, false, false, false, false, false, false, false]
    );
    assert!(mask_report(0, 1, 1).is_err());
    assert!(mask_report(65, 1, 1).is_err());
}

#[test]
fn asr_preview_defeats_the_rule_baseline() {
    let text = "It rained.\nWe stayed in!\nThen what?";
    let clean = corruption_report(text, "clean", 1).unwrap();
    assert_eq!(clean["text"], "It rained. We stayed in! Then what?");
    assert_eq!(clean["rule_found"], 3);
    let asr = corruption_report(text, "asr", 1).unwrap();
    assert_eq!(asr["text"], "it rained we stayed in then what");
    assert_eq!(asr["boundaries"].as_array().unwrap().len(), 3);
    assert_eq!(asr["rule_found"], 0);
    assert!(corruption_report(text, "nope", 1).is_err());
    assert!(corruption_report("  \n", "asr", 1).is_err());
}

#[test]
fn rule_split_uses_abbreviations() {
    let r = rule_report("Dr. Who left. Ok.", ".", "Dr.").unwrap();
    assert_eq!(r["sentences"], serde_json::json!(["Dr. Who left. ", "Ok."]));
    assert!(rule_report("x", "", "").is_err());
}

#[test]
fn alignment_projects_onto_reference() {
    let r = alignment_report("Hi there well.\nYo.", "Hi there. Yo.").unwrap();
    assert_eq!(r["projected"], serde_json::json!([8, 12]));
    assert_eq!(r["sentences"], serde_json::json!(["Hi there.", " Yo."]));
    let row = r["output_row"].as_str().unwrap();
    assert_eq!(
        row.chars().count(),
        r["reference_row"].as_str().unwrap().chars().count()
    );
    let r = alignment_report("zzzzzzzzzzzz", "Hi there. Yo.").unwrap();
    assert!(r["projected"].is_null());
}
