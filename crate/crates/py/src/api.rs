use pyo3::prelude::*;

#[pymodule]
fn oommix(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
