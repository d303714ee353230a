use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use projtractor::bgg::{
    bgg_residual_k1, bgg_residual_k2, bgg_residual_skew, prolong_k1, prolong_k2, DensitySolution, WeightedOneForm,
};
use projtractor::cli;
use projtractor::geometry::{registry, ChartGeometry};
use projtractor::model::{census, g_type, ModelFamily, ModelTensor};
use projtractor::normal_frame::{build_normal_frame, standard_basis, NormalFrameData};
use projtractor::strat::{stratify, Grid, StratOptions};
use projtractor::tractor::TractorField;
use projtractor::Error;

fn to_py(e: Error) -> PyErr {
    if e.exit_code() == 1 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// A chart with a torsion-free connection.
#[pyclass(name = "Geometry", frozen)]
struct PyGeometry {
    inner: Arc<ChartGeometry>,
    config: Option<String>,
}

#[pymethods]
impl PyGeometry {
    /// Registry geometry: flat, klein, sphere-stereo, ppwave, s2xs2.
    #[staticmethod]
    fn registry(name: &str, n: usize) -> PyResult<Self> {
        Ok(PyGeometry { inner: Arc::new(registry(name, n).map_err(to_py)?), config: None })
    }

    /// Geometry from a JSON config (as accepted by the command line tool).
    #[staticmethod]
    fn from_config(text: &str) -> PyResult<Self> {
        let cfg = cli::load_geometry(text).map_err(to_py)?;
        let g = cli::build_geometry(&cfg).map_err(to_py)?;
        Ok(PyGeometry { inner: Arc::new(g), config: Some(text.to_string()) })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    fn contains(&self, x: Vec<f64>) -> bool {
        self.inner.domain.contains(&x)
    }

    /// Christoffel symbols, flat index `(c*n + a)*n + b`.
    fn gamma(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.gamma(&x).map_err(to_py)
    }

    fn schouten(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.schouten(&x).map_err(to_py)
    }

    /// Dict with keys `R`, `Ric`, `P`, `dP` (flat row-major arrays).
    fn curvature<'py>(&self, py: Python<'py>, x: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let cd = self.inner.curvature(&x).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("R", cd.r)?;
        d.set_item("Ric", cd.ric)?;
        d.set_item("P", cd.p)?;
        d.set_item("dP", cd.dp)?;
        Ok(d)
    }

    /// Affine geodesic samples `(t, x, v)`.
    #[pyo3(signature = (x0, v0, span, h = 1e-3))]
    fn geodesic(&self, x0: Vec<f64>, v0: Vec<f64>, span: f64, h: f64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let c = self.inner.geodesic(&x0, &v0, span, h);
        (c.t, c.x, c.v)
    }

    /// Largest BGG residual at `x`; `op` is `k1`, `k2` or `skew` (one-form components separated by ';').
    fn bgg_residual(&self, op: &str, sigma: &str, x: Vec<f64>) -> PyResult<f64> {
        let g = &self.inner;
        let n = g.n;
        let max = |v: Vec<f64>| v.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
        match op {
            "k1" => Ok(bgg_residual_k1(g, &DensitySolution::parse(sigma, n, 1.0).map_err(to_py)?, &x).map_err(to_py)?.max_abs()),
            "k2" => Ok(max(bgg_residual_k2(g, &DensitySolution::parse(sigma, n, 2.0).map_err(to_py)?, &x).map_err(to_py)?)),
            "skew" => {
                let parts: Vec<&str> = sigma.split(';').collect();
                let k = WeightedOneForm::parse(&parts, n).map_err(to_py)?;
                Ok(max(bgg_residual_skew(g, &k, &x).map_err(to_py)?))
            }
            other => Err(PyValueError::new_err(format!("unknown operator '{other}'"))),
        }
    }

    /// Tractor components of the prolongation of `sigma` at `x`.
    fn prolong(&self, op: &str, sigma: &str, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let n = self.inner.n;
        let field: Box<dyn TractorField> = match op {
            "k1" => Box::new(prolong_k1(&self.inner, DensitySolution::parse(sigma, n, 1.0).map_err(to_py)?).map_err(to_py)?),
            "k2" => Box::new(prolong_k2(&self.inner, DensitySolution::parse(sigma, n, 2.0).map_err(to_py)?).map_err(to_py)?),
            other => return Err(PyValueError::new_err(format!("unknown prolongation '{other}'"))),
        };
        Ok(field.eval(&x).map_err(to_py)?.comp)
    }

    /// Normal frame based at `base` (the domain centre by default).
    #[pyo3(signature = (base = None, rho0 = 1.0, h = 1e-3))]
    fn normal_frame(&self, base: Option<Vec<f64>>, rho0: f64, h: f64) -> PyResult<PyNormalFrame> {
        let q = base.unwrap_or_else(|| self.inner.domain.center());
        let nf = build_normal_frame(self.inner.clone(), &q, &standard_basis(self.inner.n), rho0, h).map_err(to_py)?;
        Ok(PyNormalFrame { inner: Arc::new(nf) })
    }

    /// Stratify the grid by a tractor from the config (first one by default).
    #[pyo3(signature = (tractor = None, count = 41, lo = None, hi = None, band = 1e-9, tol = 1e-6, h = 1e-3))]
    #[allow(clippy::too_many_arguments)]
    fn stratify<'py>(
        &self,
        py: Python<'py>,
        tractor: Option<String>,
        count: usize,
        lo: Option<f64>,
        hi: Option<f64>,
        band: f64,
        tol: f64,
        h: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let text = self.config.as_ref().ok_or_else(|| PyValueError::new_err("stratify needs a geometry built from a config"))?;
        let loaded = cli::load(text, h).map_err(to_py)?;
        let spec = match &tractor {
            Some(name) => loaded.tractors.iter().find(|t| &t.name == name),
            None => loaded.tractors.first(),
        }
        .ok_or_else(|| PyValueError::new_err("no such tractor in the config"))?;
        let n = self.inner.n;
        let c = self.inner.domain.center();
        let r = 0.5 * self.inner.domain.diameter();
        let grid = Grid {
            lo: (0..n).map(|i| lo.unwrap_or(c[i] - r)).collect(),
            hi: (0..n).map(|i| hi.unwrap_or(c[i] + r)).collect(),
            counts: vec![count; n],
        };
        let opts = StratOptions { band, normality_tol: tol, h, ..Default::default() };
        let rep = stratify(&self.inner, &spec.input, &grid, &opts).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("strata", rep.strata.clone())?;
        d.set_item("counts", rep.counts.clone())?;
        d.set_item("points", rep.points.clone())?;
        d.set_item("labels", rep.labels.clone())?;
        d.set_item("zero_points", rep.zero_points.iter().map(|z| z.x.clone()).collect::<Vec<_>>())?;
        d.set_item("singular_points", rep.singular_points().iter().map(|z| z.x.clone()).collect::<Vec<_>>())?;
        d.set_item("g_type", rep.g_type.to_string())?;
        d.set_item("normality", rep.normality)?;
        d.set_item("route_disagreements", rep.route_disagreements)?;
        d.set_item("side_signatures", rep.side_signatures.clone())?;
        Ok(d)
    }
}

#[pyclass(name = "NormalFrame", frozen)]
struct PyNormalFrame {
    inner: Arc<NormalFrameData>,
}

#[pymethods]
impl PyNormalFrame {
    /// Detected validity radius in normal coordinates.
    #[getter]
    fn validity_radius(&self) -> f64 {
        self.inner.w
    }

    fn hom_coords(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.hom_coords(&x).map_err(to_py)
    }
}

/// G-type and sampled P-type census of a constant model tensor.
#[pyfunction]
#[pyo3(signature = (family, components, samples = 10000, seed = 42))]
fn classify<'py>(py: Python<'py>, family: &str, components: Vec<f64>, samples: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let fam = ModelFamily::parse(family).map_err(to_py)?;
    let len1 = (1..16).find(|m| fam.len(*m) == components.len()).ok_or_else(|| PyValueError::new_err("component count does not fit the family"))?;
    let t = ModelTensor::new(fam, len1, components).map_err(to_py)?;
    let c = census(&t, samples, seed).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("g_type", g_type(&t).to_string())?;
    d.set_item("census", c.counts.clone())?;
    d.set_item("singular_rays", c.singular())?;
    Ok(d)
}

/// Runs the command line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::main_with_args(std::iter::once("projtractor".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "projtractor")]
fn projtractor_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGeometry>()?;
    m.add_class::<PyNormalFrame>()?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
