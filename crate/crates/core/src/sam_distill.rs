//! Pixel-level distillation: box prompts drive a promptable segmenter whose
//! masks supervise a small encoder-decoder segmentation model; the model's
//! own predictions are re-boxed and fed back until the masks stop changing.
//!
//! The promptable segmenter is an interface: tests and synthetic runs use a
//! ground-truth-backed oracle (optionally perturbed morphologically), while
//! a real large vision model runs out of process behind a length-prefixed
//! pipe protocol.

use std::io::{Read, Write};

use indexmap::IndexMap;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{self, derive_seed, AdamW, Bound, Params, TrainLog};
use crate::records::ImageSample;
use crate::tensor::{Arr, Tape, Var};
use crate::wsss::BoxPrompt;

/// Anything that can cut a mask out of an image given a box prompt.
pub trait PromptableSegmenter {
    fn segment(&self, image: &ImageSample, prompt: &BoxPrompt) -> Result<BinaryMask>;

    /// Whether repeated calls with identical inputs return identical masks.
    fn deterministic(&self) -> bool {
        true
    }
}

/// Morphological perturbation applied by the oracle segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OracleNoise {
    Exact,
    Dilate(usize),
    Erode(usize),
    /// Per-image direction (dilate or erode) chosen deterministically from
    /// the seed and the image id.
    Mixed { radius: usize, seed: u64 },
}

/// Test double for the large vision model: returns the (optionally
/// perturbed) ground-truth mask clipped to the prompt box.
pub struct OracleSegmenter {
    truth: IndexMap<String, BinaryMask>,
    noise: OracleNoise,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl OracleSegmenter {
    pub fn new(truth: IndexMap<String, BinaryMask>, noise: OracleNoise) -> Self {
        OracleSegmenter { truth, noise }
    }

    fn perturb(&self, mask: &BinaryMask) -> BinaryMask {
        match self.noise {
            OracleNoise::Exact => mask.clone(),
            OracleNoise::Dilate(r) => mask.dilate(r),
            OracleNoise::Erode(r) => mask.erode(r),
            OracleNoise::Mixed { radius, seed } => {
                let h = fnv1a(mask.image_id.as_bytes()) ^ derive_seed(seed, &[radius as u64]);
                if h & 1 == 0 {
                    mask.dilate(radius)
                } else {
                    mask.erode(radius)
                }
            }
        }
    }
}

impl PromptableSegmenter for OracleSegmenter {
    fn segment(&self, image: &ImageSample, prompt: &BoxPrompt) -> Result<BinaryMask> {
        let truth = self.truth.get(&image.image_id).ok_or_else(|| {
            Error::Data(format!("oracle has no ground truth for {}", image.image_id))
        })?;
        let (h, w) = (truth.height(), truth.width());
        prompt.check_bounds(h, w)?;
        let perturbed = self.perturb(truth);
        let mut data = Array2::<u8>::zeros((h, w));
        for r in prompt.row_min..=prompt.row_max {
            for c in prompt.col_min..=prompt.col_max {
                data[[r, c]] = perturbed.data[[r, c]];
            }
        }
        Ok(BinaryMask::new(image.image_id.clone(), data))
    }
}

/// An image the segmenter could not process, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image_id: String,
    pub reason: String,
}

/// Prompt the segmenter with every box of every image and union the masks
/// per image. Images whose segmentation fails are skipped and reported.
pub fn generate_pseudo_masks(
    segmenter: &dyn PromptableSegmenter,
    images: &[ImageSample],
    boxes: &IndexMap<String, Vec<BoxPrompt>>,
) -> Result<(IndexMap<String, BinaryMask>, Vec<SkippedImage>)> {
    let mut out = IndexMap::new();
    let mut skipped = Vec::new();
    for img in images {
        let bs = boxes.get(&img.image_id).filter(|b| !b.is_empty()).ok_or_else(|| {
            Error::Data(format!("no box prompts for image {}", img.image_id))
        })?;
        let (h, w, _) = img.pixels.dim();
        let mut union = Array2::<u8>::zeros((h, w));
        let mut failed = None;
        for b in bs {
            match segmenter.segment(img, b) {
                Ok(m) => {
                    if m.data.dim() != (h, w) {
                        failed = Some(format!(
                            "mask shape {:?} does not match image {h}x{w}",
                            m.data.dim()
                        ));
                        break;
                    }
                    ndarray::Zip::from(&mut union).and(&m.data).for_each(|u, &v| {
                        *u = (*u | v) & 1;
                    });
                }
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            }
        }
        match failed {
            Some(reason) => skipped.push(SkippedImage { image_id: img.image_id.clone(), reason }),
            None => {
                out.insert(img.image_id.clone(), BinaryMask::new(img.image_id.clone(), union));
            }
        }
    }
    Ok((out, skipped))
}

/// Tight box around a mask's foreground.
pub fn mask_to_box(mask: &BinaryMask) -> Result<BoxPrompt> {
    let (r0, c0, r1, c1) = mask.bbox().ok_or(Error::NoForeground)?;
    Ok(BoxPrompt::new(r0, c0, r1, c1, 1.0))
}

/// U-shaped encoder-decoder: three stride levels, nearest-neighbor
/// upsampling with skip concatenation, per-pixel foreground logit out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegArch {
    /// Channel widths at the three encoder levels.
    pub channels: [usize; 3],
}

impl Default for SegArch {
    fn default() -> Self {
        SegArch::desk()
    }
}

impl SegArch {
    pub fn desk() -> Self {
        SegArch { channels: [8, 16, 32] }
    }
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub arch: SegArch,
    pub params: Params,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig { steps: 300, lr: 1e-3, weight_decay: 0.01, seed: 0 }
    }
}

const DICE_SMOOTH: f64 = 1.0;

impl SegModel {
    pub fn new(arch: SegArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let [c0, c1, c2] = arch.channels;
        nn::conv_init(&mut params, &mut rng, "enc0", c0, 3, 3);
        nn::conv_init(&mut params, &mut rng, "down1", c1, c0, 3);
        nn::conv_init(&mut params, &mut rng, "down2", c2, c1, 3);
        nn::conv_init(&mut params, &mut rng, "mid", c2, c2, 3);
        nn::conv_init(&mut params, &mut rng, "up1", c1, c2 + c1, 3);
        nn::conv_init(&mut params, &mut rng, "up2", c0, c1 + c0, 3);
        nn::conv_init(&mut params, &mut rng, "out", 1, c0, 3);
        SegModel { arch, params }
    }

    fn check_image(&self, image: &ImageSample) -> Result<Arr> {
        let (h, w, ch) = image.pixels.dim();
        if ch != 3 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Data(format!(
                "image {} is {h}x{w}x{ch}; the segmentation model needs RGB with sides divisible by 4",
                image.image_id
            )));
        }
        Ok(nn::stack_batch(&[nn::image_to_chw(&image.pixels)]).into_dyn())
    }

    /// Graph: (1, 3, H, W) -> per-pixel logits (1, 1, H, W).
    fn forward_graph(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let e0 = nn::conv_fwd(tape, bound, "enc0", x, 1, 1);
        let e0 = tape.relu(e0);
        let e1 = nn::conv_fwd(tape, bound, "down1", e0, 2, 1);
        let e1 = tape.relu(e1);
        let e2 = nn::conv_fwd(tape, bound, "down2", e1, 2, 1);
        let e2 = tape.relu(e2);
        let m = nn::conv_fwd(tape, bound, "mid", e2, 1, 1);
        let m = tape.relu(m);
        let u1 = tape.upsample_nearest2(m);
        let cat1 = tape.concat_chan(u1, e1);
        let d1 = nn::conv_fwd(tape, bound, "up1", cat1, 1, 1);
        let d1 = tape.relu(d1);
        let u2 = tape.upsample_nearest2(d1);
        let cat2 = tape.concat_chan(u2, e0);
        let d2 = nn::conv_fwd(tape, bound, "up2", cat2, 1, 1);
        let d2 = tape.relu(d2);
        nn::conv_fwd(tape, bound, "out", d2, 1, 1)
    }

    /// Per-pixel foreground probabilities.
    pub fn predict_probs(&self, image: &ImageSample) -> Result<Array2<f64>> {
        let x = self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let xv = tape.leaf(x);
        let logits = self.forward_graph(&mut tape, &bound, xv);
        let v = tape.value(logits);
        let (h, w, _) = image.pixels.dim();
        Ok(Array2::from_shape_fn((h, w), |(r, c)| sigmoid(v[[0, 0, r, c]])))
    }

    /// Binary prediction at probability 0.5.
    pub fn predict_mask(&self, image: &ImageSample) -> Result<BinaryMask> {
        let probs = self.predict_probs(image)?;
        Ok(BinaryMask::new(
            image.image_id.clone(),
            probs.mapv(|p| u8::from(p >= 0.5)),
        ))
    }

    /// Combined loss (pixel-wise cross-entropy + soft Dice, equal weights)
    /// and its gradients on one image/mask pair.
    pub fn loss_grads(
        &self,
        image: &ImageSample,
        mask: &BinaryMask,
    ) -> Result<(f64, IndexMap<String, Arr>)> {
        let (h, w, _) = image.pixels.dim();
        if mask.data.dim() != (h, w) {
            return Err(Error::Data(format!(
                "mask for {} is {:?}, image is {h}x{w}",
                image.image_id,
                mask.data.dim()
            )));
        }
        let x = self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let xv = tape.leaf(x);
        let logits = self.forward_graph(&mut tape, &bound, xv);
        let t = Arr::from_shape_fn(ndarray::IxDyn(&[1, 1, h, w]), |ix| {
            mask.data[[ix[2], ix[3]]] as f64
        });
        let tsum: f64 = t.sum();
        let ce = tape.bce_with_logits(logits, t.clone());
        let bce = tape.mean_all(ce);
        let p = tape.sigmoid_op(logits);
        let pt = tape.mul_const(p, t);
        let inter = tape.sum_all(pt);
        let psum = tape.sum_all(p);
        let num = tape.scale(inter, 2.0);
        let num = tape.add_scalar(num, DICE_SMOOTH);
        let den = tape.add_scalar(psum, tsum + DICE_SMOOTH);
        let frac = tape.div(num, den);
        let neg = tape.scale(frac, -1.0);
        let dice_loss = tape.add_scalar(neg, 1.0);
        let total = tape.add(bce, dice_loss);
        let value = tape.scalar(total);
        Ok((value, bound.grads(&self.params, tape.backward(total))))
    }

    pub fn save(&self, path: &std::path::Path, train: &SegTrainConfig, seed: u64) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "seg",
            "arch": self.arch,
            "train": train,
            "seed": seed,
        });
        crate::checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<(SegModel, serde_json::Value)> {
        let (meta, params) = crate::checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("seg") {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                msg: "not a segmentation-model checkpoint".into(),
            });
        }
        let arch: SegArch = serde_json::from_value(meta["arch"].clone()).map_err(|e| {
            Error::Checkpoint { path: path.display().to_string(), msg: format!("arch: {e}") }
        })?;
        let fresh = SegModel::new(arch.clone(), 0);
        for name in fresh.params.names() {
            if !params.contains(name) || params.get(name).shape() != fresh.params.get(name).shape()
            {
                return Err(Error::Checkpoint {
                    path: path.display().to_string(),
                    msg: format!("parameter {name} missing or mis-shaped"),
                });
            }
        }
        Ok((SegModel { arch, params }, meta))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fit the model to pseudo masks, one image per optimizer step.
/// `steps = 0` leaves the parameters untouched.
pub fn train_seg_model(
    model: &mut SegModel,
    images: &[ImageSample],
    masks: &IndexMap<String, BinaryMask>,
    cfg: &SegTrainConfig,
) -> Result<TrainLog> {
    let usable: Vec<&ImageSample> =
        images.iter().filter(|i| masks.contains_key(&i.image_id)).collect();
    if usable.is_empty() && cfg.steps > 0 {
        return Err(Error::Data("train_seg_model: no image has a mask".into()));
    }
    let mut log = TrainLog::default();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    for step in 0..cfg.steps {
        if cursor >= order.len() {
            order = (0..usable.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[11, epoch])));
            cursor = 0;
            epoch += 1;
        }
        let img = usable[order[cursor]];
        cursor += 1;
        let (loss, grads) = model.loss_grads(img, &masks[&img.image_id])?;
        nn::check_finite(loss, "train_seg_model")?;
        opt.step(&mut model.params, &grads, cfg.lr);
        log.push(step, "seg", loss);
    }
    Ok(log)
}

/// One refinement iteration's outputs.
#[derive(Debug, Clone)]
pub struct RefinementState {
    pub iteration: usize,
    pub masks: IndexMap<String, BinaryMask>,
    /// Mean per-image fraction of flipped pixels vs the previous iteration
    /// (defined as 1.0 on the first iteration).
    pub mean_mask_change: f64,
    pub skipped: Vec<SkippedImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub max_iters: usize,
    /// Stop once the mean flipped-pixel fraction drops below this.
    pub epsilon: f64,
    /// Pixels added around a predicted box before re-prompting, so a snug
    /// prediction does not progressively starve the prompt.
    pub box_pad: usize,
    pub train: SegTrainConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { max_iters: 3, epsilon: 0.005, box_pad: 2, train: SegTrainConfig::default() }
    }
}

/// Iteratively distil pixel labels: segment from the current boxes, train
/// the model on those masks, predict, and re-prompt from the predictions'
/// tight boxes. Stops early (from the second iteration) once masks change
/// less than `epsilon`; returns the last masks and per-iteration history.
pub fn refine_loop(
    segmenter: &dyn PromptableSegmenter,
    model: &mut SegModel,
    images: &[ImageSample],
    initial_boxes: &IndexMap<String, Vec<BoxPrompt>>,
    cfg: &RefineConfig,
) -> Result<(IndexMap<String, BinaryMask>, Vec<RefinementState>)> {
    if cfg.max_iters < 1 {
        return Err(Error::Config("refine_loop: max_iters must be >= 1".into()));
    }
    let prompted: Vec<ImageSample> = images
        .iter()
        .filter(|i| initial_boxes.get(&i.image_id).is_some_and(|b| !b.is_empty()))
        .cloned()
        .collect();
    if prompted.is_empty() {
        return Err(Error::Data("refine_loop: no image has an initial box".into()));
    }
    let mut boxes = initial_boxes.clone();
    let mut history: Vec<RefinementState> = Vec::new();
    for iteration in 1..=cfg.max_iters {
        let (masks, skipped) = generate_pseudo_masks(segmenter, &prompted, &boxes)?;
        if masks.values().all(|m| m.area() == 0) {
            return Err(Error::Data(format!(
                "refine_loop: every mask empty at iteration {iteration}; prompts do not hit any foreground"
            )));
        }
        let mean_mask_change = match history.last() {
            None => 1.0,
            Some(prev) => {
                let mut sum = 0.0;
                let mut n = 0usize;
                for (id, m) in &masks {
                    sum += match prev.masks.get(id) {
                        Some(pm) if pm.data.dim() == m.data.dim() => pm.change_fraction(m),
                        _ => 1.0,
                    };
                    n += 1;
                }
                if n == 0 {
                    1.0
                } else {
                    sum / n as f64
                }
            }
        };
        history.push(RefinementState {
            iteration,
            masks: masks.clone(),
            mean_mask_change,
            skipped,
        });
        if iteration >= 2 && mean_mask_change < cfg.epsilon {
            break;
        }
        let train_cfg = SegTrainConfig {
            seed: derive_seed(cfg.train.seed, &[iteration as u64]),
            ..cfg.train.clone()
        };
        train_seg_model(model, &prompted, &masks, &train_cfg)?;
        if iteration == cfg.max_iters {
            break;
        }
        for img in &prompted {
            let pred = model.predict_mask(img)?;
            if let Ok(b) = mask_to_box(&pred) {
                let (h, w) = (pred.height(), pred.width());
                let padded = BoxPrompt::new(
                    b.row_min.saturating_sub(cfg.box_pad),
                    b.col_min.saturating_sub(cfg.box_pad),
                    (b.row_max + cfg.box_pad).min(h - 1),
                    (b.col_max + cfg.box_pad).min(w - 1),
                    b.score,
                );
                boxes.insert(img.image_id.clone(), vec![padded]);
            }
            // empty prediction: keep the previous prompt for this image
        }
    }
    let final_masks = history.last().expect("at least one iteration").masks.clone();
    Ok((final_masks, history))
}

// ---- out-of-process segmenter protocol ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RequestHeader {
    image_id: String,
    #[serde(rename = "box")]
    prompt: BoxPrompt,
    height: usize,
    width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplyBody {
    image_id: String,
    height: usize,
    width: usize,
    rle: Vec<u32>,
}

fn write_frame(w: &mut dyn Write, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len())
        .map_err(|_| Error::Protocol("frame exceeds u32 length".into()))?;
    w.write_all(&len.to_le_bytes())
        .and_then(|_| w.write_all(bytes))
        .map_err(|e| Error::Protocol(format!("write frame: {e}")))
}

fn read_frame(r: &mut dyn Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| Error::Protocol(format!("read frame length: {e}")))?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf).map_err(|e| Error::Protocol(format!("read frame body: {e}")))?;
    Ok(buf)
}

/// Send one segmentation request: length-prefixed JSON header, then the raw
/// HWC RGB bytes.
pub fn write_mask_request(
    w: &mut dyn Write,
    image: &ImageSample,
    prompt: &BoxPrompt,
) -> Result<()> {
    let (h, wd, c) = image.pixels.dim();
    if c != 3 {
        return Err(Error::Protocol(format!("request image must be RGB, got {c} channels")));
    }
    let header = RequestHeader {
        image_id: image.image_id.clone(),
        prompt: *prompt,
        height: h,
        width: wd,
    };
    let hb = serde_json::to_vec(&header)
        .map_err(|e| Error::Protocol(format!("encode header: {e}")))?;
    write_frame(w, &hb)?;
    let pixels = image
        .pixels
        .as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .to_vec();
    w.write_all(&pixels).map_err(|e| Error::Protocol(format!("write pixels: {e}")))
}

/// Read one segmentation request (server side of the protocol).
pub fn read_mask_request(r: &mut dyn Read) -> Result<(ImageSample, BoxPrompt)> {
    let hb = read_frame(r)?;
    let header: RequestHeader =
        serde_json::from_slice(&hb).map_err(|e| Error::Protocol(format!("decode header: {e}")))?;
    let mut pixels = vec![0u8; header.height * header.width * 3];
    r.read_exact(&mut pixels).map_err(|e| Error::Protocol(format!("read pixels: {e}")))?;
    let arr = Array3::from_shape_vec((header.height, header.width, 3), pixels)
        .map_err(|e| Error::Protocol(format!("pixel buffer: {e}")))?;
    Ok((
        ImageSample { image_id: header.image_id, pixels: arr, record_id: String::new() },
        header.prompt,
    ))
}

/// Send a mask reply as run-length-encoded JSON.
pub fn write_mask_reply(w: &mut dyn Write, mask: &BinaryMask) -> Result<()> {
    let body = ReplyBody {
        image_id: mask.image_id.clone(),
        height: mask.height(),
        width: mask.width(),
        rle: mask.to_rle(),
    };
    let bb = serde_json::to_vec(&body).map_err(|e| Error::Protocol(format!("encode reply: {e}")))?;
    write_frame(w, &bb)
}

/// Read a mask reply (client side of the protocol).
pub fn read_mask_reply(r: &mut dyn Read) -> Result<BinaryMask> {
    let bb = read_frame(r)?;
    let body: ReplyBody =
        serde_json::from_slice(&bb).map_err(|e| Error::Protocol(format!("decode reply: {e}")))?;
    BinaryMask::from_rle(body.image_id, body.height, body.width, &body.rle)
}

/// Out-of-process segmenter speaking the pipe protocol over a child
/// process's stdin/stdout.
pub struct SubprocessSegmenter {
    child: std::sync::Mutex<std::process::Child>,
    deterministic: bool,
}

impl SubprocessSegmenter {
    /// Spawn the server command; its stdin/stdout carry the protocol.
    pub fn spawn(cmd: &mut std::process::Command, deterministic: bool) -> Result<Self> {
        let child = cmd
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .spawn()
            .map_err(|e| Error::Protocol(format!("spawn segmenter: {e}")))?;
        Ok(SubprocessSegmenter { child: std::sync::Mutex::new(child), deterministic })
    }
}

impl PromptableSegmenter for SubprocessSegmenter {
    fn segment(&self, image: &ImageSample, prompt: &BoxPrompt) -> Result<BinaryMask> {
        let mut child = self.child.lock().expect("segmenter mutex poisoned");
        {
            let stdin = child.stdin.as_mut().ok_or_else(|| {
                Error::Protocol("segmenter child has no stdin".into())
            })?;
            write_mask_request(stdin, image, prompt)?;
            stdin.flush().map_err(|e| Error::Protocol(format!("flush request: {e}")))?;
        }
        let stdout = child
            .stdout
            .as_mut()
            .ok_or_else(|| Error::Protocol("segmenter child has no stdout".into()))?;
        read_mask_reply(stdout)
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }
}

impl Drop for SubprocessSegmenter {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dice;
    use rand::Rng;

    fn disc_mask(id: &str, side: usize, cr: usize, cc: usize, rad: usize) -> BinaryMask {
        let data = Array2::from_shape_fn((side, side), |(r, c)| {
            u8::from(
                (r as i64 - cr as i64).pow(2) + (c as i64 - cc as i64).pow(2)
                    <= (rad * rad) as i64,
            )
        });
        BinaryMask::new(id, data)
    }

    fn disc_image(id: &str, side: usize, mask: &BinaryMask, seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn((side, side, 3), |(r, c, _)| {
            let noise = (rng.random::<f64>() * 25.0) as u8;
            if mask.data[[r, c]] == 1 {
                190 + noise
            } else {
                45 + noise
            }
        });
        ImageSample { image_id: id.into(), pixels, record_id: format!("rec-{id}") }
    }

    fn full_box(side: usize) -> BoxPrompt {
        BoxPrompt::new(0, 0, side - 1, side - 1, 1.0)
    }

    #[test]
    fn oracle_returns_truth_clipped_to_box() {
        let truth = disc_mask("a", 32, 16, 16, 6);
        let img = disc_image("a", 32, &truth, 1);
        let mut map = IndexMap::new();
        map.insert("a".to_string(), truth.clone());
        let oracle = OracleSegmenter::new(map, OracleNoise::Exact);

        // box covering the blob -> exact truth
        let m = oracle.segment(&img, &full_box(32)).unwrap();
        assert_eq!(m.data, truth.data);
        assert!(oracle.deterministic());

        // box missing the blob -> empty
        let m = oracle.segment(&img, &BoxPrompt::new(0, 0, 3, 3, 1.0)).unwrap();
        assert_eq!(m.area(), 0);

        // half-covering box -> truth restricted to the box
        let m = oracle.segment(&img, &BoxPrompt::new(0, 0, 15, 31, 1.0)).unwrap();
        assert!(m.area() > 0 && m.area() < truth.area());
        for ((r, c), &v) in m.data.indexed_iter() {
            let want = if r <= 15 { truth.data[[r, c]] } else { 0 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn oracle_noise_shapes_and_monotone_dsc() {
        let truth = disc_mask("a", 32, 16, 16, 7);
        let img = disc_image("a", 32, &truth, 2);
        let as_map = |m: &BinaryMask| {
            let mut map = IndexMap::new();
            map.insert(m.image_id.clone(), m.clone());
            map
        };
        // dilation superset
        let o = OracleSegmenter::new(as_map(&truth), OracleNoise::Dilate(1));
        let m = o.segment(&img, &full_box(32)).unwrap();
        assert!(ndarray::Zip::from(&m.data).and(&truth.data).all(|&a, &b| a >= b));
        assert!(m.area() > truth.area());

        // DSC decreases as the radius grows
        let mut prev = 1.0;
        for r in 0..4 {
            let o = OracleSegmenter::new(as_map(&truth), OracleNoise::Dilate(r));
            let m = o.segment(&img, &full_box(32)).unwrap();
            let d = dice(&m, &truth).unwrap();
            assert!(d <= prev + 1e-12, "DSC rose from {prev} to {d} at radius {r}");
            prev = d;
        }

        // mixed noise is deterministic given the seed
        let o1 = OracleSegmenter::new(as_map(&truth), OracleNoise::Mixed { radius: 2, seed: 9 });
        let o2 = OracleSegmenter::new(as_map(&truth), OracleNoise::Mixed { radius: 2, seed: 9 });
        assert_eq!(
            o1.segment(&img, &full_box(32)).unwrap().data,
            o2.segment(&img, &full_box(32)).unwrap().data
        );
    }

    #[test]
    fn pseudo_masks_union_boxes_and_report_failures() {
        let side = 32;
        let mut truth = BinaryMask::zeros("a", side, side);
        for r in 4..8 {
            for c in 4..8 {
                truth.data[[r, c]] = 1;
            }
        }
        for r in 20..26 {
            for c in 20..26 {
                truth.data[[r, c]] = 1;
            }
        }
        let img = disc_image("a", side, &truth, 3);
        let mut map = IndexMap::new();
        map.insert("a".to_string(), truth.clone());
        let oracle = OracleSegmenter::new(map, OracleNoise::Exact);

        let mut boxes = IndexMap::new();
        boxes.insert(
            "a".to_string(),
            vec![BoxPrompt::new(4, 4, 7, 7, 1.0), BoxPrompt::new(20, 20, 25, 25, 0.9)],
        );
        let (masks, skipped) = generate_pseudo_masks(&oracle, &[img.clone()], &boxes).unwrap();
        assert!(skipped.is_empty());
        // disjoint boxes: union area = sum of the two block areas
        assert_eq!(masks["a"].area(), 16 + 36);

        // image without ground truth gets skipped and reported
        let stranger = disc_image("b", side, &BinaryMask::zeros("b", side, side), 4);
        let mut boxes2 = boxes.clone();
        boxes2.insert("b".to_string(), vec![full_box(side)]);
        let (masks, skipped) =
            generate_pseudo_masks(&oracle, &[img.clone(), stranger], &boxes2).unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].image_id, "b");

        // a prompted image with no boxes is a caller error
        let mut boxes3 = IndexMap::new();
        boxes3.insert("a".to_string(), Vec::<BoxPrompt>::new());
        assert!(generate_pseudo_masks(&oracle, &[img], &boxes3).is_err());
    }

    #[test]
    fn mask_to_box_scans_extremes() {
        let mut m = BinaryMask::zeros("x", 10, 10);
        m.data[[3, 5]] = 1;
        let b = mask_to_box(&m).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (3, 5, 3, 5));

        m.data[[2, 3]] = 1;
        m.data[[4, 7]] = 1;
        m.data[[3, 5]] = 0;
        let b = mask_to_box(&m).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (2, 3, 4, 7));
        // minimal: edges touch foreground, nothing outside
        for (r, c) in [(2usize, 3usize), (4, 7)] {
            assert_eq!(m.data[[r, c]], 1);
        }

        let full = BinaryMask::new("f", Array2::ones((6, 4)));
        let b = mask_to_box(&full).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (0, 0, 5, 3));

        assert!(matches!(mask_to_box(&BinaryMask::zeros("e", 5, 5)), Err(Error::NoForeground)));
    }

    fn tiny_seg() -> SegModel {
        SegModel::new(SegArch { channels: [2, 3, 4] }, 5)
    }

    #[test]
    fn seg_gradients_match_finite_differences() {
        let truth = disc_mask("a", 8, 4, 4, 2);
        let img = disc_image("a", 8, &truth, 6);
        let mut m = tiny_seg();
        let (_, grads) = m.loss_grads(&img, &truth).unwrap();
        let names: Vec<String> = m.params.names().cloned().collect();
        for name in names {
            let n = m.params.get(&name).len();
            let stride = (n / 4).max(1);
            for flat in (0..n).step_by(stride) {
                let orig = m.params.get(&name).iter().nth(flat).cloned().unwrap();
                let h = 1e-5 * orig.abs().max(1.0);
                *m.params.get_mut(&name).iter_mut().nth(flat).unwrap() = orig + h;
                let up = m.loss_grads(&img, &truth).unwrap().0;
                *m.params.get_mut(&name).iter_mut().nth(flat).unwrap() = orig - h;
                let down = m.loss_grads(&img, &truth).unwrap().0;
                *m.params.get_mut(&name).iter_mut().nth(flat).unwrap() = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[&name].iter().nth(flat).cloned().unwrap();
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{name}[{flat}]: fd={fd} autodiff={an}"
                );
            }
        }
    }

    #[test]
    fn zero_steps_keeps_parameters() {
        let truth = disc_mask("a", 8, 4, 4, 2);
        let img = disc_image("a", 8, &truth, 7);
        let mut masks = IndexMap::new();
        masks.insert("a".to_string(), truth);
        let mut m = tiny_seg();
        let before = m.params.clone();
        let log = train_seg_model(
            &mut m,
            &[img],
            &masks,
            &SegTrainConfig { steps: 0, ..Default::default() },
        )
        .unwrap();
        assert!(log.rows.is_empty());
        for (name, arr) in before.iter() {
            assert_eq!(m.params.get(name), arr);
        }
    }

    #[test]
    fn memorizes_four_images() {
        let side = 32;
        let mut images = Vec::new();
        let mut masks = IndexMap::new();
        for (i, (cr, cc, rad)) in [(10, 10, 5), (20, 22, 7), (16, 8, 4), (24, 14, 6)]
            .into_iter()
            .enumerate()
        {
            let id = format!("m{i}");
            let t = disc_mask(&id, side, cr, cc, rad);
            images.push(disc_image(&id, side, &t, 100 + i as u64));
            masks.insert(id, t);
        }
        let mut model = SegModel::new(SegArch::desk(), 1);
        train_seg_model(
            &mut model,
            &images,
            &masks,
            &SegTrainConfig { steps: 2000, lr: 1e-3, weight_decay: 0.0, seed: 2 },
        )
        .unwrap();
        let mut total = 0.0;
        for img in &images {
            let pred = model.predict_mask(img).unwrap();
            total += dice(&pred, &masks[&img.image_id]).unwrap();
        }
        let mean = total / images.len() as f64;
        assert!(mean >= 0.95, "training DSC {mean} < 0.95");
    }

    #[test]
    fn refine_fixed_point_with_perfect_oracle_and_tight_boxes() {
        let side = 32;
        let mut images = Vec::new();
        let mut truth = IndexMap::new();
        let mut boxes = IndexMap::new();
        for i in 0..3 {
            let id = format!("f{i}");
            let t = disc_mask(&id, side, 14 + i, 14, 6);
            boxes.insert(id.clone(), vec![mask_to_box(&t).unwrap()]);
            images.push(disc_image(&id, side, &t, 200 + i as u64));
            truth.insert(id, t);
        }
        let oracle = OracleSegmenter::new(truth.clone(), OracleNoise::Exact);
        let mut model = SegModel::new(SegArch { channels: [4, 6, 8] }, 3);
        let cfg = RefineConfig {
            max_iters: 4,
            epsilon: 0.005,
            box_pad: 2,
            train: SegTrainConfig { steps: 60, ..Default::default() },
        };
        let (final_masks, history) =
            refine_loop(&oracle, &mut model, &images, &boxes, &cfg).unwrap();
        // converges at iteration 1: the second pass reproduces the masks
        assert_eq!(history.len(), 2);
        assert_eq!(history[0].mean_mask_change, 1.0);
        assert_eq!(history[1].mean_mask_change, 0.0);
        for (id, t) in &truth {
            assert_eq!(final_masks[id].data, t.data);
        }
    }

    #[test]
    fn refine_single_iteration_runs_one_pass() {
        let side = 16;
        let t = disc_mask("a", side, 8, 8, 4);
        let img = disc_image("a", side, &t, 5);
        let mut truth = IndexMap::new();
        truth.insert("a".to_string(), t.clone());
        let mut boxes = IndexMap::new();
        boxes.insert("a".to_string(), vec![full_box(side)]);
        let oracle = OracleSegmenter::new(truth, OracleNoise::Exact);
        let mut model = tiny_seg();
        let before = model.params.clone();
        let cfg = RefineConfig {
            max_iters: 1,
            train: SegTrainConfig { steps: 3, ..Default::default() },
            ..Default::default()
        };
        let (masks, history) = refine_loop(&oracle, &mut model, &[img], &boxes, &cfg).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(masks["a"].data, t.data);
        // the one training phase ran
        assert!(before.iter().any(|(n, a)| model.params.get(n) != a));
    }

    #[test]
    fn refine_improves_or_holds_dsc_with_noisy_oracle() {
        let side = 32;
        let mut images = Vec::new();
        let mut truth = IndexMap::new();
        let mut boxes = IndexMap::new();
        for i in 0..4usize {
            let id = format!("n{i}");
            let t = disc_mask(&id, side, 12 + 2 * i, 16, 6);
            // loose boxes: whole frame
            boxes.insert(id.clone(), vec![full_box(side)]);
            images.push(disc_image(&id, side, &t, 300 + i as u64));
            truth.insert(id, t);
        }
        let oracle = OracleSegmenter::new(truth.clone(), OracleNoise::Mixed { radius: 2, seed: 4 });
        let mut model = SegModel::new(SegArch { channels: [4, 6, 8] }, 6);
        let cfg = RefineConfig {
            max_iters: 3,
            epsilon: 1e-9, // force all iterations
            box_pad: 2,
            train: SegTrainConfig { steps: 120, ..Default::default() },
        };
        let (_, history) = refine_loop(&oracle, &mut model, &images, &boxes, &cfg).unwrap();
        assert_eq!(history.len(), 3);
        let mean_dsc = |st: &RefinementState| {
            let mut s = 0.0;
            for (id, m) in &st.masks {
                s += dice(m, &truth[id]).unwrap();
            }
            s / st.masks.len() as f64
        };
        let mut prev = mean_dsc(&history[0]);
        for st in &history[1..] {
            let d = mean_dsc(st);
            assert!(d >= prev - 0.01, "DSC fell from {prev} to {d} at iteration {}", st.iteration);
            prev = d;
        }
        for st in &history {
            assert!((0.0..=1.0).contains(&st.mean_mask_change));
        }
    }

    #[test]
    fn refine_aborts_when_prompts_hit_nothing() {
        let side = 16;
        let t = disc_mask("a", side, 12, 12, 2);
        let img = disc_image("a", side, &t, 8);
        let mut truth = IndexMap::new();
        truth.insert("a".to_string(), t);
        let mut boxes = IndexMap::new();
        boxes.insert("a".to_string(), vec![BoxPrompt::new(0, 0, 3, 3, 1.0)]);
        let oracle = OracleSegmenter::new(truth, OracleNoise::Exact);
        let mut model = tiny_seg();
        let err = refine_loop(&oracle, &mut model, &[img], &boxes, &RefineConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn protocol_round_trips_request_and_reply() {
        let t = disc_mask("proto", 8, 4, 4, 2);
        let img = disc_image("proto", 8, &t, 9);
        let b = BoxPrompt::new(1, 2, 6, 7, 0.8);

        let mut wire = Vec::new();
        write_mask_request(&mut wire, &img, &b).unwrap();
        let mut cursor = std::io::Cursor::new(wire);
        let (img2, b2) = read_mask_request(&mut cursor).unwrap();
        assert_eq!(img2.image_id, "proto");
        assert_eq!(img2.pixels, img.pixels);
        assert_eq!(b2, b);

        let mut wire = Vec::new();
        write_mask_reply(&mut wire, &t).unwrap();
        let mut cursor = std::io::Cursor::new(wire);
        let t2 = read_mask_reply(&mut cursor).unwrap();
        assert_eq!(t2.image_id, t.image_id);
        assert_eq!(t2.data, t.data);

        // truncated frame is a protocol error
        let mut short = std::io::Cursor::new(vec![9u8, 0, 0, 0, 1, 2]);
        assert!(matches!(read_mask_reply(&mut short), Err(Error::Protocol(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::TempDir::new().unwrap();
        let p = dir.path().join("seg.ckpt");
        let m = tiny_seg();
        m.save(&p, &SegTrainConfig::default(), 5).unwrap();
        let (m2, meta) = SegModel::load(&p).unwrap();
        assert_eq!(m2.arch, m.arch);
        assert_eq!(meta["kind"], "seg");
        for (name, arr) in m.params.iter() {
            assert_eq!(m2.params.get(name), arr);
        }
    }
}
