//! Slice-level box predictors: a ground-truth-driven stub with controlled
//! corruption and an HTTP client for an external model.

use std::time::Duration;

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::mix_seed;
use crate::volume::{MaskSlice, Slice2D};

/// Radiological cues embedded in [`default_prompt`].
pub const PROMPT_CUES: [&str; 4] = [
    "abnormal signal intensities",
    "irregular boundaries",
    "edema-associated gradients",
    "midline asymmetry",
];

/// Fixed prompt asking for tumor bounding boxes on an axial slice.
pub fn default_prompt() -> String {
    format!(
        "Brain MRI tumor annotation. You are shown one axial slice of a \
         contrast-enhanced T1-weighted brain MRI. Assess whether a tumor is \
         present, considering {}, {}, {} and {}. For every suspected tumor \
         region return a bounding box in pixel coordinates (x0, y0, x1, y1) \
         with x along the image width and a confidence in [0, 1]. Return an \
         empty list when the slice shows no tumor.",
        PROMPT_CUES[0], PROMPT_CUES[1], PROMPT_CUES[2], PROMPT_CUES[3]
    )
}

/// Axis-aligned half-open box on one slice, `x` along the width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub slice_index: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
}

impl BoxPrediction {
    /// Clamps into `[0, width] × [0, height]`; `None` if the result is degenerate.
    pub fn clamped(mut self, height: usize, width: usize) -> Option<Self> {
        let (w, h) = (width as f64, height as f64);
        self.x0 = self.x0.clamp(0.0, w);
        self.x1 = self.x1.clamp(0.0, w);
        self.y0 = self.y0.clamp(0.0, h);
        self.y1 = self.y1.clamp(0.0, h);
        (self.x0 < self.x1 && self.y0 < self.y1).then_some(self)
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        0.0 <= self.x0
            && self.x0 < self.x1
            && self.x1 <= width as f64
            && 0.0 <= self.y0
            && self.y0 < self.y1
            && self.y1 <= height as f64
            && (0.0..=1.0).contains(&self.confidence)
    }
}

/// Everything a predictor may look at for one slice.
#[derive(Clone, Copy, Debug)]
pub struct SliceQuery<'a> {
    pub slice_index: usize,
    pub slice: &'a Slice2D,
    /// Intensity range of the whole volume, used to rescale to 8 bits.
    pub intensity_range: (f32, f32),
    /// Ground truth; only the stub reads it.
    pub gt: Option<&'a MaskSlice>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlicePrediction {
    pub boxes: Vec<BoxPrediction>,
    pub warnings: Vec<String>,
}

pub trait BoxPredictor: Sync {
    fn predict(&self, query: &SliceQuery<'_>) -> Result<SlicePrediction>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubNoiseConfig {
    pub jitter_std: f64,
    pub miss_prob: f64,
    pub false_pos_prob: f64,
    pub seed: u64,
}

impl Default for StubNoiseConfig {
    fn default() -> Self {
        Self {
            jitter_std: 1.0,
            miss_prob: 0.2,
            false_pos_prob: 0.0,
            seed: 0,
        }
    }
}

impl StubNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [("miss_prob", self.miss_prob), ("false_pos_prob", self.false_pos_prob)];
        for (key, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config {
                    section: "oracle",
                    key,
                    detail: format!("{p} is outside [0, 1]"),
                });
            }
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::Config {
                section: "oracle",
                key: "jitter_std",
                detail: format!("{} must be finite and non-negative", self.jitter_std),
            });
        }
        Ok(())
    }
}

/// Emits the tight ground-truth box, corrupted by jitter, misses and false
/// positives drawn from a per-slice stream.
#[derive(Clone, Debug)]
pub struct StubOracle {
    pub cfg: StubNoiseConfig,
}

impl StubOracle {
    pub fn new(cfg: StubNoiseConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

pub fn stub_predict(slice_index: usize, gt: &MaskSlice, cfg: &StubNoiseConfig) -> Vec<BoxPrediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, slice_index as u64));
    let (h, w) = (gt.height, gt.width);
    let mut out = Vec::new();

    let missed = rng.random::<f64>() < cfg.miss_prob;
    if let Some(tight) = gt.tight_box() {
        let jitter = Normal::new(0.0, cfg.jitter_std).expect("validated std");
        let delta: [f64; 4] = [0, 1, 2, 3].map(|_| jitter.sample(&mut rng));
        if !missed {
            let t = tight.map(|c| c as f64);
            let mut b = [t[0] + delta[0], t[1] + delta[1], t[2] + delta[2], t[3] + delta[3]];
            if b[0] > b[2] {
                b.swap(0, 2);
            }
            if b[1] > b[3] {
                b.swap(1, 3);
            }
            let half = ((t[2] - t[0]) + (t[3] - t[1])) / 4.0;
            let mean_abs = delta.iter().map(|d| d.abs()).sum::<f64>() / 4.0;
            let pred = BoxPrediction {
                slice_index,
                x0: b[0],
                y0: b[1],
                x1: b[2],
                y1: b[3],
                confidence: 1.0 - (mean_abs / half.max(1.0)).min(1.0),
            };
            let fallback = BoxPrediction {
                slice_index,
                x0: t[0],
                y0: t[1],
                x1: t[2],
                y1: t[3],
                confidence: 0.0,
            };
            // a jittered box that collapses after clamping keeps the tight box
            out.push(pred.clamped(h, w).unwrap_or(fallback));
        }
    }

    if rng.random::<f64>() < cfg.false_pos_prob {
        let bw = rng.random_range(1..=(w / 4).max(1));
        let bh = rng.random_range(1..=(h / 4).max(1));
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        out.push(BoxPrediction {
            slice_index,
            x0: x0 as f64,
            y0: y0 as f64,
            x1: (x0 + bw) as f64,
            y1: (y0 + bh) as f64,
            confidence: rng.random_range(0.0..=0.3),
        });
    }
    out
}

impl BoxPredictor for StubOracle {
    fn predict(&self, q: &SliceQuery<'_>) -> Result<SlicePrediction> {
        let gt = q.gt.ok_or_else(|| Error::Oracle {
            slice_index: q.slice_index,
            detail: "the stub oracle needs the ground-truth mask slice".into(),
        })?;
        Ok(SlicePrediction {
            boxes: stub_predict(q.slice_index, gt, &self.cfg),
            warnings: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Extra attempts after the first failure.
    pub retries: u32,
    pub timeout_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/predict".into(),
            retries: 2,
            timeout_ms: 30_000,
        }
    }
}

/// Request body of the wire protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub slice_b64: String,
    pub width: usize,
    pub height: usize,
    pub prompt: String,
    pub slice_index: usize,
}

impl OracleRequest {
    /// Rescales `slice` linearly from `range` to `[0, 255]` and encodes it.
    pub fn new(slice: &Slice2D, range: (f32, f32), prompt: String, slice_index: usize) -> Self {
        let (lo, hi) = range;
        let span = if hi > lo { hi - lo } else { 1.0 };
        let bytes: Vec<u8> = slice
            .pixels
            .iter()
            .map(|&v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        Self {
            slice_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
            width: slice.width,
            height: slice.height,
            prompt,
            slice_index,
        }
    }
}

#[derive(Debug, Deserialize)]
struct WireBox {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    confidence: f64,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    boxes: Vec<WireBox>,
}

/// Parses a response body into in-bounds predictions; degenerate boxes are
/// dropped with a warning, out-of-range confidences fail the slice.
pub fn parse_response(body: &str, slice_index: usize, height: usize, width: usize) -> Result<SlicePrediction> {
    let fail = |detail: String| Error::Oracle { slice_index, detail };
    let resp: WireResponse = serde_json::from_str(body).map_err(|e| fail(format!("malformed response: {e}")))?;
    let mut out = SlicePrediction::default();
    for (k, b) in resp.boxes.into_iter().enumerate() {
        if !(0.0..=1.0).contains(&b.confidence) {
            return Err(fail(format!("box {k} has confidence {} outside [0, 1]", b.confidence)));
        }
        let raw = BoxPrediction {
            slice_index,
            x0: b.x0 as f64,
            y0: b.y0 as f64,
            x1: b.x1 as f64,
            y1: b.y1 as f64,
            confidence: b.confidence,
        };
        match raw.clamped(height, width) {
            Some(p) => out.boxes.push(p),
            None => {
                let msg = format!(
                    "slice {slice_index}: dropped degenerate box {k} ({}, {}, {}, {})",
                    b.x0, b.y0, b.x1, b.y1
                );
                log::warn!("{msg}");
                out.warnings.push(msg);
            }
        }
    }
    Ok(out)
}

/// Client for an external box predictor speaking the JSON wire protocol.
pub struct RemoteOracle {
    cfg: RemoteConfig,
    prompt: String,
    agent: ureq::Agent,
}

impl RemoteOracle {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build();
        Self {
            cfg,
            prompt: default_prompt(),
            agent,
        }
    }

    pub fn remote_predict(&self, request: &OracleRequest) -> Result<SlicePrediction> {
        let attempts = 1 + self.cfg.retries;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.agent.post(&self.cfg.endpoint).send_json(request) {
                Ok(resp) => {
                    let body = resp.into_string().map_err(|e| Error::Oracle {
                        slice_index: request.slice_index,
                        detail: format!("reading response: {e}"),
                    })?;
                    return parse_response(&body, request.slice_index, request.height, request.width);
                }
                Err(e) => {
                    last = e.to_string();
                    log::debug!(
                        "slice {}: attempt {attempt}/{attempts} failed: {last}",
                        request.slice_index
                    );
                }
            }
        }
        Err(Error::Oracle {
            slice_index: request.slice_index,
            detail: format!("{attempts} attempts failed; last error: {last}"),
        })
    }
}

impl BoxPredictor for RemoteOracle {
    fn predict(&self, q: &SliceQuery<'_>) -> Result<SlicePrediction> {
        let req = OracleRequest::new(q.slice, q.intensity_range, self.prompt.clone(), q.slice_index);
        self.remote_predict(&req)
    }
}
