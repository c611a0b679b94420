use pyo3::prelude::*;
use pyo3::types::PyList;

fn with_module<T>(f: impl FnOnce(&Bound<'_, PyModule>) -> PyResult<T>) -> T {
    static INIT: std::sync::Once = std::sync::Once::new();
    INIT.call_once(|| {
        use beatx_py::beatx_py;
        pyo3::append_to_inittab!(beatx_py);
        Python::initialize();
    });
    Python::attach(|py| {
        let m = py.import("beatx_py").expect("module imports");
        f(&m).expect("python call succeeds")
    })
}

#[test]
fn scope_mask_example() {
    let w: Vec<f32> = with_module(|m| m.getattr("scope_mask")?.call1((vec![0u8, 1, 0], 0.9))?.extract());
    let side = (-1.0f32 / 1.62).exp();
    assert!((w[0] - side).abs() < 1e-6 && (w[1] - 1.0).abs() < 1e-6 && (w[2] - side).abs() < 1e-6);
}

#[test]
fn metrics_are_exposed() {
    let hits: usize = with_module(|m| m.getattr("match_hits")?.call1((vec![0u8, 1, 0, 0], vec![0u8, 0, 1, 0], 1))?.extract());
    assert_eq!(hits, 1);
    let f1: Vec<f64> = with_module(|m| {
        let r = m.getattr("evaluate")?.call1((vec![vec![0u8, 1, 0]], vec![vec![0.1f32, 0.9, 0.2]]))?;
        r.getattr("f1")?.extract()
    });
    assert_eq!(f1, vec![100.0, 100.0, 100.0]);
}

#[test]
fn model_predicts_one_probability_per_unit() {
    let (n, count): (usize, usize) = with_module(|m| {
        let model = m.getattr("Model")?.call1(("linear", 3))?;
        let probs = model.call_method1("predict", (vec![0.0f32; 16_000], 16_000u32))?;
        let n = probs.cast::<PyList>()?.len();
        Ok((n, model.call_method0("parameter_count")?.extract()?))
    });
    assert_eq!(n, 10);
    assert!(count > 0);
}

#[test]
fn errors_raise_module_exception() {
    let ok = with_module(|m| {
        let err = m.getattr("Model")?.call1(("nope",)).unwrap_err();
        Ok(err.is_instance(m.py(), &m.getattr("BeatxError")?))
    });
    assert!(ok);
}
