//! Python bindings: dataset, schedule, templates, span parsing, metrics,
//! checkpoints and the command line.

use mmgen::checkpoint::Checkpoint;
use mmgen::diffusion::{q_sample, NoiseSchedule};
use mmgen::llm::template::{render_caption, render_question};
use mmgen::llm::LlmVariant;
use mmgen::text::Vocab;
use mmgen::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::collections::BTreeMap;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Tensor::new(vec![h, w], rows.concat()).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn variant(name: &str) -> PyResult<LlmVariant> {
    name.parse().map_err(err)
}

/// The 120 (image, caption) pairs; images are lists of rows in [-1, 1].
#[pyfunction]
#[pyo3(signature = (image_size=16, seed=0))]
fn dataset(image_size: usize, seed: u64) -> PyResult<Vec<(Vec<Vec<f64>>, String)>> {
    let spec = mmgen::data::WorldSpec { image_size, seed };
    spec.validate().map_err(err)?;
    Ok(mmgen::data::gen_dataset(&spec).into_iter().map(|s| (rows(&s.image), s.caption)).collect())
}

#[pyclass(name = "NoiseSchedule")]
struct PySchedule(NoiseSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps=100, beta_start=1e-3, beta_end=0.09))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        NoiseSchedule::linear(steps, beta_start, beta_end).map(Self).map_err(err)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > self.0.steps() {
            return Err(PyValueError::new_err(format!("t={t} outside 0..={}", self.0.steps())));
        }
        Ok(self.0.alpha_bar(t))
    }

    fn q_sample(&self, x0: Vec<Vec<f64>>, t: usize, eps: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&q_sample(&matrix(x0)?, t, &matrix(eps)?, &self.0).map_err(err)?))
    }
}

#[pyfunction]
#[pyo3(signature = (query, variant="decoder-only"))]
fn caption_prompt(query: usize, variant: &str) -> PyResult<String> {
    render_caption(query, self::variant(variant)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (task, question, variant="decoder-only"))]
fn question_prompt(task: &str, question: &str, variant: &str) -> PyResult<String> {
    render_question(task, question, self::variant(variant)?).map_err(err)
}

/// `(visible_text, captions)` of a response with `<Img>…</Img>` spans.
#[pyfunction]
fn parse_img_spans(text: &str) -> PyResult<(String, Vec<String>)> {
    mmgen::llm::parse_img_spans(text).map_err(err)
}

#[pyfunction]
fn tokenize(text: &str) -> PyResult<Vec<usize>> {
    Vocab::standard().tokenize(text).map_err(err)
}

#[pyfunction]
fn detokenize(ids: Vec<usize>) -> PyResult<String> {
    Vocab::standard().detokenize(&ids).map_err(err)
}

/// Fréchet distance between projected features of two image sets.
#[pyfunction]
fn toy_fid(real: Vec<Vec<Vec<f64>>>, generated: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    let a = real.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let b = generated.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    mmgen::metrics::toy_fid(&a, &b).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (candidates, references, max_n=2))]
fn bleu(candidates: Vec<String>, references: Vec<String>, max_n: usize) -> PyResult<f64> {
    mmgen::metrics::bleu(&candidates, &references, max_n).map_err(err)
}

/// `(avg_cosine, avg_mse)` over paired rows.
#[pyfunction]
fn alignment_metrics(d_diff: Vec<Vec<f64>>, d_llm: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let m = mmgen::alignment::alignment_metrics(&matrix(d_diff)?, &matrix(d_llm)?).map_err(err)?;
    Ok((m.avg_cosine, m.avg_mse))
}

/// Worst relative error per loss from the finite-difference suite.
#[pyfunction]
fn gradcheck() -> PyResult<BTreeMap<String, f64>> {
    Ok(mmgen::gradsuite::run().map_err(err)?.into_iter().map(|c| (c.loss, c.max_rel_error)).collect())
}

type CheckpointInfo = (BTreeMap<String, String>, BTreeMap<String, Vec<usize>>);

/// Metadata and parameter shapes of a checkpoint file.
#[pyfunction]
fn checkpoint_info(path: &str) -> PyResult<CheckpointInfo> {
    let c = Checkpoint::load(path.as_ref()).map_err(err)?;
    let shapes = c.params.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    Ok((c.metadata, shapes))
}

/// Runs the command line with `args` (without the program name).
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    mmgen::cli::main_with_args(std::iter::once("mmgen".to_string()).chain(args))
}

#[pymodule]
fn mmgen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(dataset, m)?)?;
    m.add_function(wrap_pyfunction!(caption_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(question_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_img_spans, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(toy_fid, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
