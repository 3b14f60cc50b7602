//! Python bindings: geometry, pillar encoding, attention scoring, policy
//! runs and metrics.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use coopdet::ndarray::Array2;
use coopdet::attention::{self, AttentionMatrix, KeyVector, QueryVector};
use coopdet::eval::{self, PrCurve};
use coopdet::experiment::ExperimentConfig;
use coopdet::geometry;
use coopdet::netsim::{self, LinkModel, Policy, RunOptions};
use coopdet::pillars::{PillarEncoder, PillarGrid as CoreGrid, SPointNetWeights};
use coopdet::scenegen::{self, SceneConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Box3D", module = "coopdet", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyBox(geometry::Box3D);

#[pymethods]
impl PyBox {
    #[new]
    #[pyo3(signature = (center, w, l, h, yaw=0.0))]
    fn new(center: [f64; 3], w: f64, l: f64, h: f64, yaw: f64) -> PyResult<Self> {
        geometry::Box3D::new(center, w, l, h, yaw).map(Self).map_err(value_err)
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center
    }

    #[getter]
    fn dims(&self) -> (f64, f64, f64) {
        (self.0.w, self.0.l, self.0.h)
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.0.yaw
    }

    fn bev_corners(&self) -> Vec<[f64; 2]> {
        self.0.bev_corners().to_vec()
    }

    fn bev_iou(&self, other: &PyBox) -> PyResult<f64> {
        geometry::bev_iou(&self.0, &other.0).map_err(value_err)
    }

    fn iou_3d(&self, other: &PyBox) -> PyResult<f64> {
        geometry::iou_3d(&self.0, &other.0).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        let b = &self.0;
        format!("Box3D(center={:?}, w={}, l={}, h={}, yaw={})", b.center, b.w, b.l, b.h, b.yaw)
    }
}

/// Maps a point from an infrastructure frame into the vehicle frame.
#[pyfunction]
fn transform_point_to_vehicle(point: [f64; 3], infra: ([f64; 3], f64), vehicle: ([f64; 3], f64)) -> [f64; 3] {
    let i = geometry::Pose::new(infra.0, infra.1);
    let v = geometry::Pose::new(vehicle.0, vehicle.1);
    geometry::transform_point_to_vehicle(point, &i, &v)
}

#[pyfunction]
fn transform_point_to_infra(point: [f64; 3], infra: ([f64; 3], f64), vehicle: ([f64; 3], f64)) -> [f64; 3] {
    let i = geometry::Pose::new(infra.0, infra.1);
    let v = geometry::Pose::new(vehicle.0, vehicle.1);
    geometry::transform_point_to_infra(point, &i, &v)
}

#[pyclass(name = "PillarGrid", module = "coopdet", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyGrid(CoreGrid);

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (x_range=(-40.32, 40.32), y_range=(-35.84, 35.84), z_range=(-3.0, 1.0), pillar=0.56))]
    fn new(x_range: (f64, f64), y_range: (f64, f64), z_range: (f64, f64), pillar: f64) -> PyResult<Self> {
        CoreGrid::new(x_range, y_range, z_range, pillar, pillar, z_range.1 - z_range.0).map(Self).map_err(value_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }
}

/// One generated frame.
#[pyclass(name = "SceneFrame", module = "coopdet", frozen, skip_from_py_object)]
pub struct PyFrame(scenegen::SceneFrame);

#[pymethods]
impl PyFrame {
    #[getter]
    fn id(&self) -> u32 {
        self.0.id
    }

    #[getter]
    fn n_infrastructures(&self) -> usize {
        self.0.n_infrastructures()
    }

    /// `(id, class, box, occlusion, range)` per car, truck and pedestrian,
    /// boxes in the vehicle frame.
    fn ground_truth(&self) -> Vec<(u32, String, PyBox, String, String)> {
        self.0
            .ground_truth()
            .into_iter()
            .map(|g| (g.id, g.class.name().to_string(), PyBox(g.bbox), format!("{:?}", g.tag.occlusion), format!("{:?}", g.tag.range)))
            .collect()
    }

    /// `(x, y, z, reflectance)` returns of a sensor (0 is the vehicle) in
    /// that sensor's own frame convention.
    fn cloud(&self, sensor: usize) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        Ok(self.sensor(sensor)?.cloud.points.iter().map(|p| (p.x, p.y, p.z, p.r)).collect())
    }

    /// Dimensions and entry sum of the sensor's pseudo-image under the
    /// default grid.
    #[pyo3(signature = (sensor, seed=0))]
    fn encode(&self, sensor: usize, seed: u64) -> PyResult<((usize, usize, usize), f64)> {
        let s = self.sensor(sensor)?;
        let cloud = if sensor == 0 { s.cloud.clone() } else { self.0.infrastructure_cloud_in_vehicle_frame(sensor - 1) };
        let img = default_encoder().encode(&cloud, seed).map_err(value_err)?;
        Ok((img.dims(), img.sum()))
    }

    /// Runs one communication policy and returns
    /// `(counted_bytes, participants, detections)`; detections are
    /// `(class, box, score)` from the visibility oracle.
    #[pyo3(signature = (policy, seed=0))]
    fn run_policy(&self, policy: &str, seed: u64) -> PyResult<(u64, Vec<usize>, Vec<(String, PyBox, f64)>)> {
        let config = ExperimentConfig::default();
        let p = match Policy::canonical_name(policy).map_err(value_err)? {
            "LocVehicle" => Policy::LocVehicle,
            "RandSelect" => Policy::RandSelect { seed },
            "CombAll" => Policy::CombAll,
            _ => Policy::Learn2com(Box::new(config.initial_attention())),
        };
        let links = vec![LinkModel::default(); self.0.n_infrastructures()];
        let out = netsim::run_frame(&self.0, &default_encoder(), &p, &links, RunOptions::default()).map_err(value_err)?;
        let dets = scenegen::oracle_detect(&self.0, &out.sensors(), &config.oracle(), seed)
            .into_iter()
            .map(|d| (d.class.name().to_string(), PyBox(d.bbox), d.score))
            .collect();
        Ok((out.ledger.counted_bytes(), out.participants, dets))
    }

    fn oracle_best_infrastructure(&self, tau: u32) -> Option<usize> {
        scenegen::oracle_best_infrastructure(&self.0, tau)
    }
}

impl PyFrame {
    fn sensor(&self, s: usize) -> PyResult<&scenegen::SensorCapture> {
        if s > self.0.n_infrastructures() {
            return Err(value_err(format!("no sensor {s}; frame has {} infrastructures", self.0.n_infrastructures())));
        }
        Ok(self.0.sensor(s))
    }
}

fn default_encoder() -> PillarEncoder {
    PillarEncoder::new(CoreGrid::default(), 100, SPointNetWeights::seeded(64, 0))
}

/// Generates `frames` frames of a preset scenario
/// (`roundabout`, `t_junction`, `occlusion_heavy`).
#[pyfunction]
fn generate_scene(scenario: &str, frames: usize, seed: u64) -> PyResult<Vec<PyFrame>> {
    let config = SceneConfig::preset(scenario).ok_or_else(|| value_err(format!("unknown scenario {scenario:?}")))?;
    let frames = scenegen::generate_scene(&config, frames, seed).map_err(value_err)?;
    Ok(frames.into_iter().map(PyFrame).collect())
}

/// Cosine matching score of a query against a key under `w`; returns
/// `(score, degenerate)`.
#[pyfunction]
fn matching_score(query: Vec<f64>, key: Vec<f64>, w: Vec<Vec<f64>>) -> PyResult<(f64, bool)> {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    if w.iter().any(|r| r.len() != cols) {
        return Err(value_err("ragged attention matrix"));
    }
    let flat: Vec<f64> = w.into_iter().flatten().collect();
    let m = Array2::from_shape_vec((rows, cols), flat).map_err(value_err)?;
    let s = attention::matching_score(&QueryVector(query.into()), &KeyVector(key.into()), &AttentionMatrix(m)).map_err(value_err)?;
    Ok((s.value, s.degenerate))
}

#[pyfunction]
fn softmax(raw: Vec<f64>) -> Vec<f64> {
    attention::softmax(&raw)
}

/// Interpolated AP of a ranked list of true/false positives against
/// `n_gt` ground truths.
#[pyfunction]
fn average_precision(ranked: Vec<bool>, n_gt: usize) -> f64 {
    eval::average_precision(&PrCurve::from_ranked(&ranked, n_gt))
}

/// Accuracy improvement per MB of bandwidth.
#[pyfunction]
fn aib(ap_with: f64, ap_without: f64, bytes_per_frame: f64) -> PyResult<f64> {
    eval::aib(ap_with, ap_without, bytes_per_frame).map_err(value_err)
}

#[pymodule(name = "coopdet")]
pub fn coopdet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyFrame>()?;
    m.add_function(wrap_pyfunction!(transform_point_to_vehicle, m)?)?;
    m.add_function(wrap_pyfunction!(transform_point_to_infra, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(matching_score, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(aib, m)?)?;
    m.add("KB", netsim::KB)?;
    m.add("MB", netsim::MB)?;
    Ok(())
}
