//! Browser bindings for three interactive operations: quantizing a weight
//! vector, solving a small bit allocation, and rendering a synthetic scene.
//!
//! Every binding takes plain values and returns a JSON string, so the page
//! needs no serialization glue. The same functions run natively in tests.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use critquant::allocator::{allocate, SensitivityTable, TableRow, BIT_CHOICES};
use critquant::model::{gen_dataset, DatasetSpec};
use critquant::quantizer::{quant_error, quantize, step_size};

#[derive(Serialize)]
struct QuantizeOut {
    quantized: Vec<f64>,
    error: Vec<f64>,
    step: f64,
    levels: usize,
}

#[derive(Serialize)]
struct ErrorOut {
    error: String,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn fail(msg: impl Into<String>) -> String {
    to_json(&ErrorOut { error: msg.into() })
}

/// Symmetric quantization of `values` at `bits`.
#[wasm_bindgen]
pub fn quantize_values(values: &[f64], bits: u32) -> String {
    if !(2..=16).contains(&bits) {
        return fail("bits must lie in 2..=16");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return fail("values must be finite");
    }
    let q = quantize(values, bits);
    let mut distinct = q.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    to_json(&QuantizeOut {
        error: quant_error(values, bits),
        step: step_size(values, bits),
        levels: distinct.len(),
        quantized: q,
    })
}

#[derive(Serialize)]
struct AllocateOut {
    bits: Vec<u32>,
    objective: f64,
    average_bits: f64,
}

/// Optimal bit-widths for layers with `elements[i]` weights and a
/// sensitivity that scales as `sensitivity[i] * 4^(3 - bits)`.
#[wasm_bindgen]
pub fn allocate_bits(elements: &[u32], sensitivity: &[f64], average_bits: f64) -> String {
    if elements.len() != sensitivity.len() || elements.is_empty() {
        return fail("need one sensitivity per layer");
    }
    if elements.contains(&0) || sensitivity.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return fail("elements must be positive and sensitivities non-negative");
    }
    let rows = elements
        .iter()
        .zip(sensitivity)
        .enumerate()
        .map(|(i, (&n, &s))| {
            let mut omega = [0.0; 6];
            for (k, &b) in BIT_CHOICES.iter().enumerate() {
                omega[k] = s * 4f64.powi(3 - b as i32);
            }
            TableRow {
                name: format!("layer{i}"),
                elements: n as u64,
                omega,
                fisher_trace: s,
            }
        })
        .collect();
    let table = SensitivityTable {
        objective: "demo".into(),
        rows,
    };
    match allocate(&table, table.budget_for_average(average_bits)) {
        Ok(a) => to_json(&AllocateOut {
            bits: a.bits.iter().map(|(_, b)| *b).collect(),
            objective: a.objective,
            average_bits: a.average_bits,
        }),
        Err(e) => fail(e.to_string()),
    }
}

#[derive(Serialize)]
struct SceneOut {
    size: usize,
    /// Row-major RGBA bytes.
    rgba: Vec<u8>,
    objects: Vec<SceneObject>,
}

#[derive(Serialize)]
struct SceneObject {
    class: usize,
    super_category: String,
    /// cx, cy, w, h in [0, 1].
    bbox: [f64; 4],
}

/// One synthetic training image for `seed`.
#[wasm_bindgen]
pub fn render_scene(seed: u32) -> String {
    let spec = DatasetSpec {
        train_images: 1,
        val_images: 0,
        seed: seed as u64,
        ..Default::default()
    };
    let (train, _) = match gen_dataset(&spec) {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let s = &train[0];
    let rgba = s
        .image
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [c(p[0]), c(p[1]), c(p[2]), 255]
        })
        .collect();
    let objects = s
        .objects
        .iter()
        .map(|o| SceneObject {
            class: o.class,
            super_category: spec
                .super_categories
                .iter()
                .find(|g| g.classes.contains(&o.class))
                .map(|g| g.name.clone())
                .unwrap_or_default(),
            bbox: o.bbox,
        })
        .collect();
    to_json(&SceneOut {
        size: spec.image_size,
        rgba,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn quantize_matches_worked_example() {
        let v: Value = serde_json::from_str(&quantize_values(&[-1.0, 0.5], 4)).unwrap();
        assert_eq!(v["quantized"][0], -1.0);
        assert!((v["quantized"][1].as_f64().unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(v["levels"], 2);
        assert!(serde_json::from_str::<Value>(&quantize_values(&[1.0], 40)).unwrap()["error"].is_string());
    }

    #[test]
    fn allocation_respects_budget() {
        let v: Value = serde_json::from_str(&allocate_bits(&[100, 100, 50], &[1.0, 0.01, 5.0], 5.0)).unwrap();
        assert!(v["average_bits"].as_f64().unwrap() <= 5.0);
        let bits: Vec<u64> = v["bits"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).collect();
        assert!(bits[2] >= bits[1]);
        let bad: Value = serde_json::from_str(&allocate_bits(&[10], &[1.0], 2.0)).unwrap();
        assert!(bad["error"].as_str().unwrap().contains("infeasible"));
    }

    #[test]
    fn scene_is_rgba_and_deterministic() {
        let a = render_scene(3);
        assert_eq!(a, render_scene(3));
        let v: Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["rgba"].as_array().unwrap().len(), 32 * 32 * 4);
        assert!(!v["objects"].as_array().unwrap().is_empty());
    }
}
