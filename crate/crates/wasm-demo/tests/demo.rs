use res_wasm_demo::{truncation, Session};

#[test]
fn truncation_reports_exact_and_ep_moments() {
    let v = truncation([0.0, 0.0], [1.0, 1.0], 0.5, [-1.0, -1.0], [1.0, 1.0]).unwrap();
    assert_eq!(v.len(), 11);
    assert!(v[0] > 0.0 && v[0] < 1.0);
    for k in 0..5 {
        assert!((v[1 + k] - v[6 + k]).abs() < 5e-3, "{k}: {} vs {}", v[1 + k], v[6 + k]);
    }
    assert!(truncation([0.0, 0.0], [1.0, 1.0], 0.0, [1.0, 0.0], [0.0, 1.0]).is_err());
}

#[test]
fn session_grids_and_step() {
    let mut s = Session::create(3, 4).unwrap();
    s.refresh(12).unwrap();
    let nt = s.thetas().len();
    assert_eq!(s.mean().len(), 12 * nt);
    assert!(s.acquisition().iter().all(|a| *a >= 0.0));
    assert_eq!(s.robust_truth().len(), 12);
    let z = s.res_step().unwrap();
    assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(s.observations().len(), 5 * 3);
    s.evaluate_at(0.3, 2).unwrap();
    assert!(s.evaluate_at(0.3, nt).is_err());
    s.refresh(5).unwrap();
    assert_eq!(s.reported().len(), 3);
}
