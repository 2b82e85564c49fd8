mod common;

#[test]
fn stochastic_rows_sum_to_one() {
    let detail = common::normalization_suite().unwrap();
    println!("{detail}");
}
