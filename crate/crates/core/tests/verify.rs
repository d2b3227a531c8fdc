use vidiff_core::verify::{run, SUITES};
use vidiff_core::Error;

#[test]
fn schedule_suite_passes_and_reports() {
    let r = run("schedule").unwrap();
    assert!(r.passed());
    let text = r.to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.iter().any(|l| l.starts_with("schedule.alpha_bar_product_rel = PASS measured=")));
    assert!(lines.iter().any(|l| l.starts_with("schedule.seconds = ")));
    assert_eq!(*lines.last().unwrap(), "result = PASS");
    assert_eq!(r.checks.len() + 2, lines.len());
}

#[test]
fn unknown_suite_is_an_error() {
    assert!(matches!(run("nope"), Err(Error::UnknownSuite(s)) if s == "nope"));
    assert!(SUITES.contains(&"shifted-init"));
}

#[test]
fn shifted_init_and_zero_init_pass() {
    for suite in ["shifted-init", "zeroinit"] {
        let r = run(suite).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert!(r.checks.iter().all(|c| c.suite == suite));
    }
}
