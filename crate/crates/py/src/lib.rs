use pyo3::prelude::*;

#[pymodule]
fn diffvox_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
