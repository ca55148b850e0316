//! HTTP client for a prior service speaking the tensor wire format.
//!
//! Endpoints used:
//!
//! - `POST /encode`: image → latent
//! - `POST /decode`: latent → image
//! - `POST /encode_vjp`: image ‖ latent gradient → image gradient
//! - `POST /denoise`: z_t ‖ condition ‖ `{t, guidance, prompt_tag}` → ε̂
//! - `POST /inpaint`: z_t ‖ condition ‖ `{t_start, steps, guidance, prompt_tag}` → image
//! - `POST /monodepth`: image → `1×H×W` relative depth
//! - `POST /personalize`: multipart `image`, `mask`, `config` → `{"job_id"}`
//! - `GET /status/{id}`: job state as JSON
//!
//! The condition tensor has the latent's spatial size; channel 0 is the mask
//! (1 where content is synthesized) and the remaining channels are the masked
//! latent.

use std::io::Read;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::wire::{decode_body, encode_body, Tensor};
use super::{Condition, DenoisePrior, DepthOracle, LatentImage, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Environment variable that overrides any configured service address.
pub const PRIOR_URL_ENV: &str = "REFSPLAT_PRIOR_URL";

/// The service address to use: the environment override if set and
/// non-empty, else `configured`.
pub fn resolve_url(configured: Option<&str>) -> Option<String> {
    match std::env::var(PRIOR_URL_ENV) {
        Ok(v) if !v.trim().is_empty() => Some(v.trim().to_string()),
        _ => configured.map(str::to_string),
    }
}

const CODEC_ID: &str = "remote";

#[derive(Clone, Debug)]
struct Client {
    agent: ureq::Agent,
    base: String,
}

impl Client {
    fn new(base: &str, timeout: Duration) -> Result<Self> {
        let base = base.trim_end_matches('/').to_string();
        if !base.starts_with("http://") && !base.starts_with("https://") {
            return Err(Error::InvalidConfig(format!("prior URL {base:?} must start with http:// or https://")));
        }
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Ok(Self { agent, base })
    }

    fn read(resp: ureq::Response) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        resp.into_reader()
            .read_to_end(&mut buf)
            .map_err(|e| Error::Prior(format!("reading response: {e}")))?;
        Ok(buf)
    }

    fn check(path: &str, r: std::result::Result<ureq::Response, ureq::Error>) -> Result<Vec<u8>> {
        match r {
            Ok(resp) => Self::read(resp),
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                Err(Error::Prior(format!("{path}: HTTP {code}: {}", body.trim())))
            }
            Err(e) => Err(Error::Prior(format!("{path}: {e}"))),
        }
    }

    fn post(&self, path: &str, content_type: &str, body: &[u8]) -> Result<Vec<u8>> {
        let url = format!("{}{path}", self.base);
        let r = self.agent.post(&url).set("Content-Type", content_type).send_bytes(body);
        Self::check(path, r)
    }

    fn get(&self, path: &str) -> Result<Vec<u8>> {
        let url = format!("{}{path}", self.base);
        Self::check(path, self.agent.get(&url).call())
    }

    /// Posts tensors (and a trailer) and expects a single tensor back.
    fn tensor_call(&self, path: &str, tensors: &[&Tensor], trailer: Option<&Value>) -> Result<Tensor> {
        let body = encode_body(tensors, trailer);
        let start = std::time::Instant::now();
        let resp = self.post(path, "application/octet-stream", &body)?;
        let (mut out, _) = decode_body(&resp, 1).map_err(|e| Error::Prior(format!("{path}: {e}")))?;
        log::debug!("{path}: {} request bytes, response dims {:?}, {:?}", body.len(), out[0].dims, start.elapsed());
        Ok(out.remove(0))
    }

    fn image_call(&self, path: &str, tensors: &[&Tensor], trailer: Option<&Value>) -> Result<Image> {
        self.tensor_call(path, tensors, trailer)?
            .to_image()
            .map_err(|e| Error::Prior(format!("{path}: {e}")))
    }
}

/// `(1 + C) × h × w` condition tensor: mask channel, then masked latent.
pub fn condition_tensor(cond: &Condition) -> Result<Tensor> {
    let z = &cond.masked_latent.data;
    if cond.mask.width != z.width || cond.mask.height != z.height {
        return Err(Error::shape(
            format!("{}x{} mask", z.width, z.height),
            format!("{}x{}", cond.mask.width, cond.mask.height),
        ));
    }
    let mut data = Vec::with_capacity((z.channels + 1) * z.width * z.height);
    data.extend(cond.mask.data.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
    data.extend(Tensor::from_image(z).data);
    Tensor::new(vec![z.channels + 1, z.height, z.width], data)
}

/// Denoising prior hosted by a remote service.
#[derive(Clone, Debug)]
pub struct RemotePrior {
    client: Client,
    schedule: NoiseSchedule,
    native: (usize, usize),
    latent: (usize, usize, usize),
}

impl RemotePrior {
    /// Connects and learns the latent shape by encoding a blank image at
    /// native resolution.
    pub fn connect(url: &str, schedule: NoiseSchedule, native: (usize, usize), timeout: Duration) -> Result<Self> {
        schedule.validate()?;
        let client = Client::new(url, timeout)?;
        let probe = Tensor::from_image(&Image::new(native.0, native.1, 3));
        let z = client.image_call("/encode", &[&probe], None)?;
        log::info!("remote prior at {}: {}x{} native, latent {}x{}x{}", client.base, native.0, native.1, z.width, z.height, z.channels);
        Ok(Self {
            client,
            schedule,
            native,
            latent: (z.width, z.height, z.channels),
        })
    }

    fn check_latent(&self, z: &LatentImage) -> Result<()> {
        if z.codec_id != CODEC_ID {
            return Err(Error::InvalidInput(format!("latent from codec {} given to the remote prior", z.codec_id)));
        }
        let (w, h, c) = self.latent;
        if z.data.shape() != (w, h, c) {
            return Err(Error::shape(format!("{w}x{h}x{c} latent"), format!("{:?}", z.data.shape())));
        }
        Ok(())
    }

    fn trailer(cond: &Condition, extra: Value) -> Value {
        let mut v = json!({
            "guidance": cond.guidance,
            "prompt_tag": cond.prompt.as_str(),
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
            m.extend(e);
        }
        v
    }
}

impl DenoisePrior for RemotePrior {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn native_resolution(&self) -> (usize, usize) {
        self.native
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent
    }

    fn encode(&self, img: &Image) -> Result<LatentImage> {
        let z = self.client.image_call("/encode", &[&Tensor::from_image(img)], None)?;
        Ok(LatentImage::new(z, CODEC_ID))
    }

    fn decode(&self, z: &LatentImage) -> Result<Image> {
        self.check_latent(z)?;
        self.client.image_call("/decode", &[&Tensor::from_image(&z.data)], None)
    }

    fn encode_adjoint(&self, image: &Image, grad: &Image) -> Result<Image> {
        let g = self
            .client
            .image_call("/encode_vjp", &[&Tensor::from_image(image), &Tensor::from_image(grad)], None)?;
        image.ensure_shape(&g).map_err(|e| Error::Prior(format!("/encode_vjp: {e}")))?;
        Ok(g)
    }

    fn denoise(&self, z_t: &LatentImage, t: f64, cond: &Condition) -> Result<Image> {
        self.check_latent(z_t)?;
        let trailer = Self::trailer(cond, json!({ "t": t }));
        let eps = self
            .client
            .image_call("/denoise", &[&Tensor::from_image(&z_t.data), &condition_tensor(cond)?], Some(&trailer))?;
        z_t.data.ensure_shape(&eps).map_err(|e| Error::Prior(format!("/denoise: {e}")))?;
        Ok(eps)
    }

    fn inpaint(&self, z_t: &LatentImage, t_start: f64, steps: usize, cond: &Condition) -> Result<Image> {
        self.check_latent(z_t)?;
        let trailer = Self::trailer(cond, json!({ "t_start": t_start, "steps": steps }));
        self.client
            .image_call("/inpaint", &[&Tensor::from_image(&z_t.data), &condition_tensor(cond)?], Some(&trailer))
    }
}

/// Monocular depth estimator hosted by the prior service.
#[derive(Clone, Debug)]
pub struct RemoteDepth {
    client: Client,
}

impl RemoteDepth {
    pub fn new(url: &str, timeout: Duration) -> Result<Self> {
        Ok(Self {
            client: Client::new(url, timeout)?,
        })
    }
}

impl DepthOracle for RemoteDepth {
    fn estimate(&self, image: &Image, _view: usize) -> Result<Image> {
        let d = self.client.image_call("/monodepth", &[&Tensor::from_image(image)], None)?;
        if d.channels != 1 || d.width != image.width || d.height != image.height {
            return Err(Error::DepthOracle(format!(
                "/monodepth returned {}x{}x{} for a {}x{} image",
                d.width, d.height, d.channels, image.width, image.height
            )));
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub state: String,
    #[serde(default)]
    pub progress: Option<f64>,
    #[serde(default)]
    pub message: Option<String>,
}

/// Submission and polling of reference personalization jobs.
#[derive(Clone, Debug)]
pub struct PersonalizeClient {
    client: Client,
}

const BOUNDARY: &str = "refsplat-part-boundary-7d1c";

/// `multipart/form-data` body with the given named parts.
pub fn multipart_body(parts: &[(&str, &str, &[u8])]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, content_type, data) in parts {
        out.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        out.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n").as_bytes());
        out.extend_from_slice(format!("Content-Type: {content_type}\r\n\r\n").as_bytes());
        out.extend_from_slice(data);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    out
}

impl PersonalizeClient {
    pub fn new(url: &str, timeout: Duration) -> Result<Self> {
        Ok(Self {
            client: Client::new(url, timeout)?,
        })
    }

    /// Starts a job; `image` is `3×H×W`, `mask` is `1×H×W` with 1 on the
    /// region to inpaint.
    pub fn submit(&self, image: &Image, mask: &Mask, config: &Value) -> Result<String> {
        if (mask.width, mask.height) != (image.width, image.height) {
            return Err(Error::shape(
                format!("{}x{} mask", image.width, image.height),
                format!("{}x{}", mask.width, mask.height),
            ));
        }
        let img = Tensor::from_image(image).to_bytes();
        let m = Tensor::new(
            vec![1, mask.height, mask.width],
            mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?
        .to_bytes();
        let cfg = config.to_string();
        let body = multipart_body(&[
            ("image", "application/octet-stream", &img),
            ("mask", "application/octet-stream", &m),
            ("config", "application/json", cfg.as_bytes()),
        ]);
        let resp = self
            .client
            .post("/personalize", &format!("multipart/form-data; boundary={BOUNDARY}"), &body)?;
        let v: Value = serde_json::from_slice(&resp).map_err(|e| Error::Prior(format!("/personalize: {e}")))?;
        v.get("job_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Prior(format!("/personalize: response lacks job_id: {v}")))
    }

    pub fn status(&self, job_id: &str) -> Result<JobStatus> {
        if job_id.is_empty() || !job_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::InvalidInput(format!("invalid job id {job_id:?}")));
        }
        let path = format!("/status/{job_id}");
        let resp = self.client.get(&path)?;
        serde_json::from_slice(&resp).map_err(|e| Error::Prior(format!("{path}: {e}")))
    }
}
