#[path = "suites/oracles.rs"]
mod suite;

#[test]
fn mhsa_matches_double_loop() {
    suite::mhsa_matches_double_loop();
}

#[test]
fn attention_unit_matches_loop() {
    suite::attention_unit_matches_loop();
}

#[test]
fn conv2d_matches_direct_summation() {
    suite::conv2d_matches_direct_summation();
}

#[test]
fn separable_conv_matches_composed_dense() {
    suite::separable_conv_matches_composed_dense();
}

#[test]
fn pointwise_projection_is_linear_attention() {
    suite::pointwise_projection_is_linear_attention();
}

#[test]
fn nms_matches_brute_force() {
    suite::nms_matches_brute_force();
}

#[test]
fn matcher_matches_brute_force() {
    suite::matcher_matches_brute_force();
}

#[test]
fn encode_decode_roundtrip() {
    suite::encode_decode_roundtrip();
}

#[test]
fn decode_detections_matches_reference() {
    suite::decode_detections_matches_reference();
}

#[test]
fn class_ap_matches_exhaustive() {
    suite::class_ap_matches_exhaustive();
}

#[test]
fn synthetic_boxes_match_rendered_masks() {
    suite::synthetic_boxes_match_rendered_masks();
}

#[test]
fn anchor_count_formula_matches_generator() {
    suite::anchor_count_formula_matches_generator();
}
