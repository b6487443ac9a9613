#[path = "suites/gradients.rs"]
mod suite;

#[test]
fn elementwise() {
    suite::elementwise();
}

#[test]
fn shape_ops() {
    suite::shape_ops();
}

#[test]
fn products() {
    suite::products();
}

#[test]
fn normalizations() {
    suite::normalizations();
}

#[test]
fn losses() {
    suite::losses();
}

#[test]
fn convolutions() {
    suite::convolutions();
}

#[test]
fn composed_tiny_model() {
    suite::composed_tiny_model();
}
