// Finite-difference checks of every layer's backward pass, then of the whole network.
//
// `cargo run --release --example gradient_check`

use dualnorm::gradsuite::{check_end_to_end, layer_suite, END_TO_END_TOLERANCE};

pub fn run_example() {
    for report in layer_suite(0).expect("layer suite") {
        println!("{:<28} max rel err {:.2e}  ({} coords)", report.op, report.max_rel_err, report.checked);
        assert!(report.passed(), "{report:?}");
    }

    let e2e = check_end_to_end(0, 2).expect("end to end");
    println!(
        "whole model: max rel err {:.2e} over {} coords ({} skipped at relu6 kinks), tolerance {:.0e}",
        e2e.max_rel_err, e2e.checked, e2e.excluded, END_TO_END_TOLERANCE
    );
    assert!(e2e.passed());
}

#[allow(dead_code)]
fn main() {
    run_example();
}
