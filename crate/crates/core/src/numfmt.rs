/// Formats with 17 significant digits, enough to round-trip any f64.
pub(crate) fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Logistic sigmoid, evaluated on the side that avoids overflow.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
