use rqpca_wasm::*;

#[test]
fn eigenvalues_ascending() {
    let ev = eigenvalues().unwrap();
    assert_eq!(ev.len(), 4);
    assert!((ev[3] - 0.454929).abs() < 1e-6);
    assert!(ev.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn spectrum_layout_and_peak() {
    let out = spectrum(0.01, 0.0, 0, 0.40, 0.50, 101).unwrap();
    assert_eq!(out.len(), 202);
    assert!((out[0] - 0.40).abs() < 1e-15 && (out[200] - 0.50).abs() < 1e-15);
    let (w, p) = out.chunks(2).map(|c| (c[0], c[1])).fold((0.0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    assert!((w - 0.454929).abs() < 2e-3 && p > 0.4, "{w} {p}");
}

#[test]
fn distillation_layout() {
    let out = distill_populations(0.454929, 6e-4, 0.0, 0).unwrap();
    assert_eq!(out.len(), 3 + 8);
    assert!(out[0] > 0.98 && out[1] > 0.99);
    let pi1_total: f64 = out[7..].iter().sum();
    assert!((pi1_total - out[2]).abs() < 1e-12);
}

#[test]
fn echo_restores_amplitude_under_dephasing() {
    let out = echo_comparison(6e-4, 1.07e-3, 2).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out[1] > out[0], "{out:?}");
}
