use paiconv_bench::{bench_permutation, PermutationBench};

#[test]
fn dot_product_beats_linear_correlation() {
    let reports = bench_permutation(&PermutationBench::new(10_000, 16, 16)).unwrap();
    for r in &reports {
        println!("{}", r.csv_row());
    }
    let time = |m: &str| reports.iter().find(|r| r.method == m).unwrap().median_ns;
    assert!(time("dot_product") < time("kpconv_linear"));
}
