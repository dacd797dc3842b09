use density_steer::bench::{run_benchmark, BenchOptions, BENCHMARKS};
use density_steer::diagnostics::{all_pass, format_table, write_reports_csv};
use density_steer::SolverError;

#[test]
fn american_put_benchmark_passes() {
    let r = run_benchmark("american_put", &BenchOptions::default()).unwrap();
    assert!(all_pass(&r), "\n{}", format_table(&r));
    // self-checks come before the solver comparisons
    assert!(r[0].name.starts_with("put_"));
    let names: Vec<&str> = r.iter().map(|c| c.name.as_str()).collect();
    assert!(names.contains(&"free_boundary_rel") && names.contains(&"value_sup"));
}

#[test]
fn tol_scale_tightens_every_check() {
    let r = run_benchmark("american_put", &BenchOptions { tol_scale: 0.0 }).unwrap();
    assert!(r.iter().all(|c| c.tolerance == 0.0));
    assert!(!all_pass(&r));
}

#[test]
fn report_csv_layout() {
    let r = run_benchmark("american_put", &BenchOptions::default()).unwrap();
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, "american_put", &r).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("benchmark,check,value,tolerance,pass"));
    assert_eq!(lines.count(), r.len());
}

#[test]
fn names() {
    assert_eq!(BENCHMARKS, &["american_put", "brownian_bridge", "lq_steer"]);
    assert!(matches!(
        run_benchmark("heston", &BenchOptions::default()),
        Err(SolverError::UnknownPreset(_))
    ));
}
