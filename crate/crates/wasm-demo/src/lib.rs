//! Browser playground for the segmentation engine: generate a small
//! synthetic study, train a compact network on it, and inspect the
//! predictions slice by slice. Everything also runs natively so the
//! demo logic is testable without a wasm toolchain.

use sliceseg::checkpoint::Model;
use sliceseg::data::{self, synth_case, CaseData, SynthCase, SynthConfig};
use sliceseg::metrics;
use sliceseg::network::{SegNet, SegNetConfig};
use sliceseg::trainer::{self, model_select, TrainConfig};
use wasm_bindgen::prelude::wasm_bindgen;

const TRUTH_GREEN: [u8; 3] = [60, 220, 90];
const PREDICTION_RED: [u8; 3] = [235, 80, 60];

fn demo_synth_config(seed: u32) -> SynthConfig {
    SynthConfig {
        cases: 6,
        depth: 6,
        height: 24,
        width: 24,
        target_fg: 0.1,
        noise: 0.05,
        drift: 1.0,
        corrupt_cases: 0.5,
        seed: u64::from(seed),
    }
}

/// Interactive state: one synthetic study plus an optional trained
/// network.
#[wasm_bindgen]
pub struct Demo {
    raw: Vec<SynthCase>,
    cases: Vec<CaseData>,
    model: Option<SegNet>,
}

#[wasm_bindgen]
impl Demo {
    /// Generates the study for `seed`. The same seed always produces
    /// the same volumes, labels, and degraded-slice layout.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, String> {
        let cfg = demo_synth_config(seed);
        let mut raw = Vec::new();
        let mut cases = Vec::new();
        for index in 0..cfg.cases {
            let case = synth_case(&cfg, index).map_err(|e| e.to_string())?;
            raw.push(case.clone());
            cases.push(case.into_case().map_err(|e| e.to_string())?);
        }
        Ok(Demo {
            raw,
            cases,
            model: None,
        })
    }

    pub fn case_count(&self) -> usize {
        self.raw.len()
    }

    pub fn depth(&self) -> usize {
        self.raw[0].image.depth
    }

    pub fn height(&self) -> usize {
        self.raw[0].image.height
    }

    pub fn width(&self) -> usize {
        self.raw[0].image.width
    }

    pub fn is_trained(&self) -> bool {
        self.model.is_some()
    }

    pub fn is_corrupted(&self, case: usize, slice: usize) -> bool {
        self.raw
            .get(case)
            .map(|c| c.corrupted.get(slice) == Some(&true))
            .unwrap_or(false)
    }

    /// RGBA pixels of one slice: grayscale intensity with the ground
    /// truth outlined in green.
    pub fn render_slice(&self, case: usize, slice: usize) -> Result<Vec<u8>, String> {
        let (raw, _) = self.pick(case, slice)?;
        let mut pixels = grayscale(raw, slice);
        let boundary = label_boundary(raw, slice);
        let w = raw.image.width;
        for (y, x) in boundary {
            paint(&mut pixels, w, y, x, TRUTH_GREEN, 255);
        }
        Ok(pixels)
    }

    /// Trains a compact two-block network on the study with the
    /// two-phase selection protocol and reports the per-epoch log.
    pub fn train(&mut self, epochs: u32) -> Result<String, String> {
        if epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 8,
            max_epochs: epochs as usize,
            patience: epochs as usize,
            seed: 7,
            ..TrainConfig::default()
        };
        let outcome =
            model_select(SegNetConfig::uniform(2, 1, 6), &self.cases, &cfg).map_err(|e| e.to_string())?;
        let mut text = String::new();
        for row in &outcome.log.rows {
            text.push_str(&format!(
                "phase {} epoch {:>2}  loss {:.4}  monitor DSC {:.4}\n",
                row.phase, row.epoch, row.train_loss, row.monitor_dsc
            ));
        }
        text.push_str(&format!(
            "selection target {:.4}, reached: {}\n",
            outcome.acc_t, outcome.reached_target
        ));
        self.model = Some(outcome.net);
        Ok(text)
    }

    /// RGBA pixels of one slice with the model's prediction filled in
    /// red on top of the green ground-truth outline.
    pub fn predict_overlay(
        &self,
        case: usize,
        slice: usize,
        threshold: f64,
    ) -> Result<Vec<u8>, String> {
        let model = self.model.as_ref().ok_or("train a model first")?;
        let (raw, prepared) = self.pick(case, slice)?;
        let prob = model
            .infer(&prepared.images[slice])
            .map_err(|e| e.to_string())?
            .fused_prob;

        let mut pixels = grayscale(raw, slice);
        let w = raw.image.width;
        for y in 0..raw.image.height {
            for x in 0..w {
                if prob.data()[y * w + x] > threshold {
                    paint(&mut pixels, w, y, x, PREDICTION_RED, 150);
                }
            }
        }
        for (y, x) in label_boundary(raw, slice) {
            paint(&mut pixels, w, y, x, TRUTH_GREEN, 255);
        }
        Ok(pixels)
    }

    /// Pooled DSC of the trained model on the whole study at each
    /// decision threshold, as `threshold,dsc` CSV lines.
    pub fn sweep_csv(&self) -> Result<String, String> {
        let model = self.model.as_ref().ok_or("train a model first")?;
        let pooled = Model::Cnn(model.clone());
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for case in &self.cases {
            probs.extend(trainer::predict_case(&pooled, &case.images).map_err(|e| e.to_string())?);
            labels.extend(case.labels.iter().cloned());
        }
        let prob = data::stack_batch(&probs).map_err(|e| e.to_string())?;
        let truth = data::stack_batch(&labels).map_err(|e| e.to_string())?;
        let mut csv = String::from("threshold,dsc\n");
        for threshold in metrics::sweep_thresholds() {
            let hard = metrics::binarize(&prob, threshold);
            let dsc = metrics::dsc(&hard, &truth).map_err(|e| e.to_string())?;
            csv.push_str(&format!("{threshold:.2},{dsc:.6}\n"));
        }
        Ok(csv)
    }
}

impl Demo {
    fn pick(&self, case: usize, slice: usize) -> Result<(&SynthCase, &CaseData), String> {
        let raw = self.raw.get(case).ok_or("case out of range")?;
        if slice >= raw.image.depth {
            return Err("slice out of range".into());
        }
        Ok((raw, &self.cases[case]))
    }
}

/// Min-max grayscale of one raw slice as opaque RGBA.
fn grayscale(case: &SynthCase, slice: usize) -> Vec<u8> {
    let (h, w) = (case.image.height, case.image.width);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            let v = case.image.get(slice, y, x);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(1e-12);
    let mut pixels = vec![0u8; h * w * 4];
    for y in 0..h {
        for x in 0..w {
            let g = (255.0 * (case.image.get(slice, y, x) - lo) / span).round() as u8;
            let at = 4 * (y * w + x);
            pixels[at] = g;
            pixels[at + 1] = g;
            pixels[at + 2] = g;
            pixels[at + 3] = 255;
        }
    }
    pixels
}

/// Pixels on the ground-truth boundary: labeled, with a 4-neighbour
/// outside the label.
fn label_boundary(case: &SynthCase, slice: usize) -> Vec<(usize, usize)> {
    let (h, w) = (case.image.height, case.image.width);
    let inside = |y: i64, x: i64| -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < h
            && (x as usize) < w
            && case.labels.get(slice, y as usize, x as usize) == 1
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if case.labels.get(slice, y, x) != 1 {
                continue;
            }
            let (yi, xi) = (y as i64, x as i64);
            if !inside(yi - 1, xi) || !inside(yi + 1, xi) || !inside(yi, xi - 1) || !inside(yi, xi + 1)
            {
                out.push((y, x));
            }
        }
    }
    out
}

fn paint(pixels: &mut [u8], width: usize, y: usize, x: usize, color: [u8; 3], alpha: u8) {
    let at = 4 * (y * width + x);
    let a = f64::from(alpha) / 255.0;
    for c in 0..3 {
        let base = f64::from(pixels[at + c]);
        pixels[at + c] = (base + (f64::from(color[c]) - base) * a).round() as u8;
    }
}
