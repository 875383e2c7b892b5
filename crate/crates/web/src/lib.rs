//! WebAssembly bindings for the static demo page in `www/`.

pub mod demo;

use wasm_bindgen::prelude::*;

use fedmitr::federation::PartitionKind;

use demo::{CurveInputs, InversionDemo};

fn js<E: std::fmt::Display>(e: E) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major `[n_clients, classes]` sample counts.
#[wasm_bindgen(js_name = partitionCounts)]
pub fn partition_counts(
    kind: &str,
    param: f64,
    n_clients: u32,
    classes: u32,
    per_class: u32,
    seed: u32,
) -> Result<Vec<u32>, JsError> {
    let kind = match kind {
        "dirichlet" => PartitionKind::Dirichlet { alpha: param },
        "pathological" => PartitionKind::Pathological {
            classes_per_client: param as usize,
        },
        other => return Err(JsError::new(&format!("unknown partition kind {other}"))),
    };
    demo::partition_counts(kind, n_clients as usize, classes as usize, per_class as usize, seed.into()).map_err(js)
}

/// Flattened `[L, β, bound]` triples.
#[wasm_bindgen(js_name = boundCurves)]
#[allow(clippy::too_many_arguments)]
pub fn bound_curves(
    l_max: f64,
    points: u32,
    mu: f64,
    c: f64,
    t: f64,
    n: f64,
    m: f64,
    delta: f64,
    r_emp: f64,
) -> Result<Vec<f64>, JsError> {
    let k = CurveInputs {
        mu,
        c,
        t,
        n,
        m,
        delta,
        r_emp,
    };
    demo::bound_curves(l_max, points as usize, &k)
        .map(|v| v.into_iter().flatten().collect())
        .map_err(js)
}

#[wasm_bindgen]
pub struct Inverter {
    inner: InversionDemo,
}

#[wasm_bindgen]
pub struct InversionResult {
    size: usize,
    grid: usize,
    pixels: Vec<f64>,
    active: Vec<u8>,
    attention: Vec<f64>,
    real: Vec<f64>,
    pub confidence: f64,
    #[wasm_bindgen(js_name = ceFirst)]
    pub ce_first: f64,
    #[wasm_bindgen(js_name = ceLast)]
    pub ce_last: f64,
}

#[wasm_bindgen]
impl InversionResult {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }
    #[wasm_bindgen(getter)]
    pub fn grid(&self) -> usize {
        self.grid
    }
    #[wasm_bindgen(getter)]
    pub fn pixels(&self) -> Vec<f64> {
        self.pixels.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn active(&self) -> Vec<u8> {
        self.active.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn attention(&self) -> Vec<f64> {
        self.attention.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn real(&self) -> Vec<f64> {
        self.real.clone()
    }
}

#[wasm_bindgen]
impl Inverter {
    /// Trains the demo client; takes a second or two.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Inverter, JsError> {
        InversionDemo::new(seed.into()).map(|inner| Inverter { inner }).map_err(js)
    }

    pub fn invert(&self, label: u32, mask_ratio: f64, iterations: u32, lr: f64, seed: u32) -> Result<InversionResult, JsError> {
        let label = label as usize % InversionDemo::CLASSES;
        let v = self
            .inner
            .invert(label, mask_ratio, iterations as usize, lr, seed.into())
            .map_err(js)?;
        Ok(InversionResult {
            size: v.size,
            grid: v.grid,
            pixels: v.pixels,
            active: v.active.into_iter().map(u8::from).collect(),
            attention: v.cls_attention,
            real: self.inner.real_sample(label),
            confidence: v.confidence,
            ce_first: v.ce_first,
            ce_last: v.ce_last,
        })
    }
}
