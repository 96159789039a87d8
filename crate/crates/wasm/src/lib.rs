//! Browser bindings: synthesize an RIR, degrade it, and restore it with the
//! guided sampler. Signals cross the boundary as `Float64Array`s at 8 kHz.

use rirsolve::eval::{edc_db as edc_curve, st_nmse};
use rirsolve::flow_engine::{run, FlowConfig};
use rirsolve::scenario::{simulate, CorpusEntry, CorpusSpec, MeasurementSetup};
use rirsolve::task::{MeasurementTask, TaskKind};
use rirsolve::SignalBuffer;
use wasm_bindgen::prelude::*;

pub const SAMPLE_RATE: u32 = 8000;

fn buffer(x: &[f64]) -> Result<SignalBuffer, String> {
    SignalBuffer::new(x.to_vec(), SAMPLE_RATE).map_err(|e| e.to_string())
}

fn task_kind(name: &str) -> Result<TaskKind, String> {
    match name.parse().map_err(|e: rirsolve::RirError| e.to_string())? {
        k @ (TaskKind::Denoise | TaskKind::Inpaint) => Ok(k),
        k => Err(format!("the demo does not simulate {k}")),
    }
}

fn demo_entry(rt_s: f64, duration_s: f64, seed: u64) -> Result<CorpusEntry, String> {
    let spec = CorpusSpec {
        count: 1,
        duration_s,
        rt_min: rt_s,
        rt_max: rt_s,
        seed,
        ..Default::default()
    };
    let entries = rirsolve::scenario::corpus_entries(&spec).map_err(|e| e.to_string())?;
    Ok(entries.into_iter().next().expect("count is 1"))
}

pub fn synth_impl(rt_s: f64, duration_s: f64, seed: u64) -> Result<Vec<f64>, String> {
    let x = demo_entry(rt_s, duration_s, seed)?.generate().map_err(|e| e.to_string())?;
    Ok(x.into_samples())
}

/// Observation and the noise level it was simulated with.
pub fn degrade_impl(x: &[f64], task: &str, snr_db: f64, seed: u64) -> Result<(Vec<f64>, f64), String> {
    let kind = task_kind(task)?;
    let setup = MeasurementSetup {
        snr_db,
        ..MeasurementSetup::for_task(kind)
    };
    let m = simulate(kind, &buffer(x)?, &setup, "demo", seed).map_err(|e| e.to_string())?;
    Ok((m.y.into_samples(), m.task.sigma_n()))
}

pub fn restore_impl(
    y: &[f64],
    task: &str,
    sigma_n: f64,
    steps: usize,
    gamma: f64,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let y = buffer(y)?;
    let task = match task_kind(task)? {
        TaskKind::Denoise => MeasurementTask::Denoise { sigma_n },
        _ => {
            let gaps = MeasurementSetup::for_task(TaskKind::Inpaint).gaps_s;
            let mask = rirsolve::forward_ops::MaskOperator::with_gaps(y.len(), SAMPLE_RATE, &gaps)
                .map_err(|e| e.to_string())?;
            MeasurementTask::Inpaint { mask, sigma_n }
        }
    };
    let cfg = FlowConfig {
        steps_t: steps,
        gamma,
        seed,
        ..FlowConfig::default()
    };
    let (x, _) = run(&task, &y, &cfg).map_err(|e| e.to_string())?;
    Ok(x.into_samples())
}

pub fn st_nmse_db_impl(x: &[f64], est: &[f64]) -> Result<f64, String> {
    Ok(st_nmse(&buffer(x)?, &buffer(est)?).map_err(|e| e.to_string())?.avg_db())
}

pub fn edc_db_impl(x: &[f64]) -> Result<Vec<f64>, String> {
    edc_curve(&buffer(x)?, -120.0).map_err(|e| e.to_string())
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Synthetic RIR with the given reverberation time, 8 kHz.
#[wasm_bindgen]
pub fn synth(rt_s: f64, duration_s: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    js(synth_impl(rt_s, duration_s, seed.into()))
}

/// Noisy (`"denoise"`) or gapped (`"inpaint"`) observation of `x`. The noise
/// standard deviation is appended as the last element.
#[wasm_bindgen]
pub fn degrade(x: &[f64], task: &str, snr_db: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    js(degrade_impl(x, task, snr_db, seed.into()).map(|(mut y, s)| {
        y.push(s);
        y
    }))
}

/// Runs the guided sampler on an observation from `degrade`.
#[wasm_bindgen]
pub fn restore(y: &[f64], task: &str, sigma_n: f64, steps: u32, gamma: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    js(restore_impl(y, task, sigma_n, steps as usize, gamma, seed.into()))
}

#[wasm_bindgen]
pub fn st_nmse_db(x: &[f64], est: &[f64]) -> Result<f64, JsError> {
    st_nmse_db_impl(x, est).map_err(|e| JsError::new(&e))
}

/// Normalized energy decay curve in dB, floored at −120 dB.
#[wasm_bindgen]
pub fn edc_db(x: &[f64]) -> Result<Vec<f64>, JsError> {
    js(edc_db_impl(x))
}
