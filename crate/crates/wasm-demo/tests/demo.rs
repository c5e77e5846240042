use crn_demo::{counterfactual_branches_json, simulate_patient_json, treatment_probability_curve_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn patient_has_one_entry_per_day() {
    let v = parse(simulate_patient_json(4.0, 4.0, 30, 1, 3).unwrap());
    let n = v["volume"].as_array().unwrap().len();
    assert!(n > 0 && n <= 30);
    for key in ["diameter", "chemo_concentration", "chemo", "radio", "outcome"] {
        assert_eq!(v[key].as_array().unwrap().len(), n, "{key}");
    }
    assert_eq!(simulate_patient_json(4.0, 4.0, 30, 1, 3).unwrap(), simulate_patient_json(4.0, 4.0, 30, 1, 3).unwrap());
}

#[test]
fn policy_curve_is_half_at_threshold_and_monotone() {
    let v = parse(treatment_probability_curve_json(10.0, 10.0, 27).unwrap());
    let d: Vec<f64> = v["mean_diameter"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let p: Vec<f64> = v["p_chemo"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(d.len(), 27);
    let mid = d.iter().position(|&x| (x - 6.5).abs() < 1e-12).unwrap();
    assert!((p[mid] - 0.5).abs() < 1e-12);
    assert!(p.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn branches_cover_both_arms_and_mark_a_best() {
    let v = parse(counterfactual_branches_json(5.0, 5.0, 40, 0, 2, 10, 4).unwrap());
    let b = v["branches"].as_array().unwrap();
    assert_eq!(b.len(), 8);
    assert_eq!(b[0]["arm"], "chemo");
    assert_eq!(b[7]["arm"], "radio");
    assert_eq!(b[7]["day"], 3);
    assert!(b.iter().all(|x| x["volume"].as_array().unwrap().len() == 4));
    assert!(!v["best"].as_array().unwrap().is_empty());
}

#[test]
fn bad_inputs_are_errors() {
    assert!(simulate_patient_json(-1.0, 0.0, 30, 0, 0).is_err());
    assert!(simulate_patient_json(1.0, 0.0, 0, 0, 0).is_err());
    assert!(counterfactual_branches_json(1.0, 1.0, 20, 0, 0, 19, 3).is_err());
    assert!(counterfactual_branches_json(1.0, 1.0, 20, 0, 0, 5, 1).is_err());
}
