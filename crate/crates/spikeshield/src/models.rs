//! The three networks of the defense: a convolutional noise-level estimator,
//! a residual U-Net reconstructor, and a small spiking classifier.
//!
//! All spiking layers are MLF neurons; final layers are non-spiking and read
//! out through the time-averaged unroll. Checkpoints store a flat text
//! header describing the architecture followed by named NDT1 tensors in
//! declaration order.

use crate::error::{Error, Result};
use crate::snn::{mlf_step, unroll, MLFConfig, SpikeState, SpikingNet};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 4] = b"SSCP";
const CKPT_VERSION: u32 = 1;

fn kaiming_conv(f: usize, c: usize, kh: usize, kw: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = (6.0 / (c * kh * kw) as f32).sqrt();
    let t = Tensor::rand_uniform([f, c, kh, kw], -bound, bound, rng)?;
    Ok(t.detach_var())
}

/// Convolution plus channel bias.
#[derive(Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    fn new(f: usize, c: usize, k: usize, padding: usize, rng: &mut impl Rng) -> Result<Conv> {
        Ok(Conv {
            weight: kaiming_conv(f, c, k, k, rng)?,
            bias: Tensor::zeros([f]).detach_var(),
            stride: 1,
            padding,
        })
    }

    /// Zero weights and bias: the layer starts as the constant-zero map.
    fn zeroed(f: usize, c: usize, k: usize, padding: usize) -> Conv {
        Conv {
            weight: Tensor::zeros([f, c, k, k]).detach_var(),
            bias: Tensor::zeros([f]).detach_var(),
            stride: 1,
            padding,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.stride, self.padding)?
            .add_channel_bias(&self.bias)
    }
}

/// Transposed convolution (upsampling) plus channel bias.
#[derive(Clone)]
pub struct ConvT {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvT {
    fn new(f: usize, c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Result<ConvT> {
        let bound = (6.0 / (f * k * k) as f32).sqrt();
        Ok(ConvT {
            weight: Tensor::rand_uniform([f, c, k, k], -bound, bound, rng)?.detach_var(),
            bias: Tensor::zeros([c]).detach_var(),
            stride,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv_transpose2d(&self.weight, self.stride, 0)?
            .add_channel_bias(&self.bias)
    }
}

/// Fully connected readout.
#[derive(Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn new(d: usize, k: usize, rng: &mut impl Rng) -> Result<Dense> {
        let bound = (6.0 / d as f32).sqrt();
        Ok(Dense {
            weight: Tensor::rand_uniform([d, k], -bound, bound, rng)?.detach_var(),
            bias: Tensor::zeros([k]).detach_var(),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

fn check_unit_range(x: &Tensor, what: &str) -> Result<()> {
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain(format!(
            "{what}: pixels must lie in [0,1]"
        )));
    }
    Ok(())
}

/// Noise-level estimator: five 3x3 convolutions C->32->32->32->32->C with
/// MLF activations between them; the zero-initialized final layer makes the
/// untrained estimate the constant softplus(0).
#[derive(Clone)]
pub struct NeSNN {
    pub convs: Vec<Conv>,
    pub mlf: MLFConfig,
    pub t_steps: usize,
    pub channels: usize,
    pub hidden: usize,
}

impl NeSNN {
    pub fn new(
        channels: usize,
        hidden: usize,
        mlf: MLFConfig,
        t_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<NeSNN> {
        if channels == 0 || hidden == 0 || t_steps == 0 {
            return Err(Error::Config(
                "NeSNN needs positive channels, hidden width and t_steps".into(),
            ));
        }
        let convs = vec![
            Conv::new(hidden, channels, 3, 1, rng)?,
            Conv::new(hidden, hidden, 3, 1, rng)?,
            Conv::new(hidden, hidden, 3, 1, rng)?,
            Conv::new(hidden, hidden, 3, 1, rng)?,
            Conv::zeroed(channels, hidden, 3, 1),
        ];
        Ok(NeSNN {
            convs,
            mlf,
            t_steps,
            channels,
            hidden,
        })
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    /// Replace parameters by untracked copies; inference stops building
    /// parameter gradients (input gradients still flow).
    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            *p = p.detach();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = vec![
            ("model".to_string(), "nesnn".to_string()),
            ("channels".to_string(), self.channels.to_string()),
            ("hidden".to_string(), self.hidden.to_string()),
            ("levels".to_string(), self.mlf.levels.to_string()),
            ("theta".to_string(), self.mlf.lif.theta.to_string()),
            ("lambda_mem".to_string(), self.mlf.lif.lambda_mem.to_string()),
            (
                "surrogate_width".to_string(),
                self.mlf.lif.surrogate_width.to_string(),
            ),
            ("t_steps".to_string(), self.t_steps.to_string()),
        ];
        write_checkpoint(path, &header, &self.param_entries())
    }

    pub fn load(path: &Path) -> Result<NeSNN> {
        let (header, params) = read_checkpoint(path)?;
        expect_model(&header, "nesnn")?;
        let mlf = mlf_from_header(&header)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = NeSNN::new(
            header_usize(&header, "channels")?,
            header_usize(&header, "hidden")?,
            mlf,
            header_usize(&header, "t_steps")?,
            &mut rng,
        )?;
        let names = model_names(&model.param_entries());
        assign_params(model.params_mut(), &names, params)?;
        Ok(model)
    }
}

impl SpikingNet for NeSNN {
    type State = Vec<SpikeState>;

    fn init_state(&self, input: &Tensor) -> Result<Self::State> {
        let (n, c, h, w) = input.shape().dims4()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "NeSNN expects {} channels, got {c}",
                self.channels
            )));
        }
        Ok((0..4)
            .map(|_| SpikeState::zeros([n, self.hidden, h, w]))
            .collect())
    }

    fn step(&self, state: Self::State, input: &Tensor) -> Result<(Self::State, Tensor)> {
        let mut next = Vec::with_capacity(4);
        let mut h = input.clone();
        for (i, st) in state.into_iter().enumerate() {
            let drive = self.convs[i].forward(&h)?;
            let (ns, spikes) = mlf_step(&st, &drive, &self.mlf)?;
            next.push(ns);
            h = spikes;
        }
        let out = self.convs[4].forward(&h)?;
        Ok((next, out))
    }
}

/// Per-pixel noise-level map: softplus of the time-averaged readout, so the
/// result is non-negative and matches the input shape.
pub fn estimate_noise(model: &NeSNN, x_noisy: &Tensor) -> Result<Tensor> {
    check_unit_range(x_noisy, "estimate_noise")?;
    unroll(model, x_noisy, model.t_steps)?.softplus()
}

/// Residual U-Net reconstructor, depth 2 (32 and 64 channels), avg-pool
/// down, transposed-conv up, skip concatenations, no normalization layers.
/// Consumes concat(x', sigma_hat) and emits a residual to subtract.
#[derive(Clone)]
pub struct RecSNN {
    pub enc1: Conv,
    pub enc2: Conv,
    pub mid: Conv,
    pub up1: ConvT,
    pub dec1: Conv,
    pub up2: ConvT,
    pub dec2: Conv,
    pub out: Conv,
    pub mlf: MLFConfig,
    pub t_steps: usize,
    pub channels: usize,
}

impl RecSNN {
    pub fn new(channels: usize, mlf: MLFConfig, t_steps: usize, rng: &mut impl Rng) -> Result<RecSNN> {
        if channels == 0 || t_steps == 0 {
            return Err(Error::Config("RecSNN needs positive channels and t_steps".into()));
        }
        Ok(RecSNN {
            enc1: Conv::new(32, 2 * channels, 3, 1, rng)?,
            enc2: Conv::new(64, 32, 3, 1, rng)?,
            mid: Conv::new(64, 64, 3, 1, rng)?,
            up1: ConvT::new(64, 64, 2, 2, rng)?,
            dec1: Conv::new(32, 128, 3, 1, rng)?,
            up2: ConvT::new(32, 32, 2, 2, rng)?,
            dec2: Conv::new(32, 64, 3, 1, rng)?,
            out: Conv::zeroed(channels, 32, 3, 1),
            mlf,
            t_steps,
            channels,
        })
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("enc1.weight".into(), &self.enc1.weight),
            ("enc1.bias".into(), &self.enc1.bias),
            ("enc2.weight".into(), &self.enc2.weight),
            ("enc2.bias".into(), &self.enc2.bias),
            ("mid.weight".into(), &self.mid.weight),
            ("mid.bias".into(), &self.mid.bias),
            ("up1.weight".into(), &self.up1.weight),
            ("up1.bias".into(), &self.up1.bias),
            ("dec1.weight".into(), &self.dec1.weight),
            ("dec1.bias".into(), &self.dec1.bias),
            ("up2.weight".into(), &self.up2.weight),
            ("up2.bias".into(), &self.up2.bias),
            ("dec2.weight".into(), &self.dec2.weight),
            ("dec2.bias".into(), &self.dec2.bias),
            ("out.weight".into(), &self.out.weight),
            ("out.bias".into(), &self.out.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc1.weight,
            &mut self.enc1.bias,
            &mut self.enc2.weight,
            &mut self.enc2.bias,
            &mut self.mid.weight,
            &mut self.mid.bias,
            &mut self.up1.weight,
            &mut self.up1.bias,
            &mut self.dec1.weight,
            &mut self.dec1.bias,
            &mut self.up2.weight,
            &mut self.up2.bias,
            &mut self.dec2.weight,
            &mut self.dec2.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            *p = p.detach();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = vec![
            ("model".to_string(), "recsnn".to_string()),
            ("channels".to_string(), self.channels.to_string()),
            ("levels".to_string(), self.mlf.levels.to_string()),
            ("theta".to_string(), self.mlf.lif.theta.to_string()),
            ("lambda_mem".to_string(), self.mlf.lif.lambda_mem.to_string()),
            (
                "surrogate_width".to_string(),
                self.mlf.lif.surrogate_width.to_string(),
            ),
            ("t_steps".to_string(), self.t_steps.to_string()),
        ];
        write_checkpoint(path, &header, &self.param_entries())
    }

    pub fn load(path: &Path) -> Result<RecSNN> {
        let (header, params) = read_checkpoint(path)?;
        expect_model(&header, "recsnn")?;
        let mlf = mlf_from_header(&header)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = RecSNN::new(
            header_usize(&header, "channels")?,
            mlf,
            header_usize(&header, "t_steps")?,
            &mut rng,
        )?;
        let names = model_names(&model.param_entries());
        assign_params(model.params_mut(), &names, params)?;
        Ok(model)
    }
}

pub struct RecState {
    states: Vec<SpikeState>,
}

impl SpikingNet for RecSNN {
    type State = RecState;

    fn init_state(&self, input: &Tensor) -> Result<Self::State> {
        let (n, c, h, w) = input.shape().dims4()?;
        if c != 2 * self.channels {
            return Err(Error::ShapeMismatch(format!(
                "RecSNN expects {} stacked channels, got {c}",
                2 * self.channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::Config(format!(
                "RecSNN needs spatial dims divisible by 4, got {h}x{w}"
            )));
        }
        Ok(RecState {
            states: vec![
                SpikeState::zeros([n, 32, h, w]),
                SpikeState::zeros([n, 64, h / 2, w / 2]),
                SpikeState::zeros([n, 64, h / 4, w / 4]),
                SpikeState::zeros([n, 32, h / 2, w / 2]),
                SpikeState::zeros([n, 32, h, w]),
            ],
        })
    }

    fn step(&self, state: Self::State, input: &Tensor) -> Result<(Self::State, Tensor)> {
        let [s1, s2, s3, s4, s5]: [SpikeState; 5] = state
            .states
            .try_into()
            .map_err(|_| Error::Usage("RecSNN state arity".into()))?;
        let (n1, f1) = mlf_step(&s1, &self.enc1.forward(input)?, &self.mlf)?;
        let p1 = f1.avg_pool2d(2, 2)?;
        let (n2, f2) = mlf_step(&s2, &self.enc2.forward(&p1)?, &self.mlf)?;
        let p2 = f2.avg_pool2d(2, 2)?;
        let (n3, f3) = mlf_step(&s3, &self.mid.forward(&p2)?, &self.mlf)?;
        let u1 = self.up1.forward(&f3)?.concat_channels(&f2)?;
        let (n4, f4) = mlf_step(&s4, &self.dec1.forward(&u1)?, &self.mlf)?;
        let u2 = self.up2.forward(&f4)?.concat_channels(&f1)?;
        let (n5, f5) = mlf_step(&s5, &self.dec2.forward(&u2)?, &self.mlf)?;
        let residual = self.out.forward(&f5)?;
        Ok((
            RecState {
                states: vec![n1, n2, n3, n4, n5],
            },
            residual,
        ))
    }
}

/// Joint purifier output: the reconstruction and the noise-level map.
pub struct PurifierOutput {
    pub x_hat: Tensor,
    pub sigma_hat: Tensor,
}

/// Full purification pass: estimate the noise level, reconstruct a residual
/// from the stacked input, and clamp the corrected image back to [0,1].
pub fn purify(ne: &NeSNN, rec: &RecSNN, x_noisy: &Tensor) -> Result<PurifierOutput> {
    check_unit_range(x_noisy, "purify")?;
    let sigma_hat = estimate_noise(ne, x_noisy)?;
    let stacked = x_noisy.concat_channels(&sigma_hat)?;
    let residual = unroll(rec, &stacked, rec.t_steps)?;
    let x_hat = x_noisy.sub(&residual)?.clamp(0.0, 1.0)?;
    Ok(PurifierOutput { x_hat, sigma_hat })
}

/// Small MLF spiking classifier: conv(32)-pool-conv(64)-pool-dense with
/// time-averaged logits.
#[derive(Clone)]
pub struct ClassifierSNN {
    pub conv1: Conv,
    pub conv2: Conv,
    pub dense: Dense,
    pub mlf: MLFConfig,
    pub t_steps: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl ClassifierSNN {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        mlf: MLFConfig,
        t_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<ClassifierSNN> {
        if height % 4 != 0 || width % 4 != 0 || height < 4 || width < 4 {
            return Err(Error::Config(format!(
                "ClassifierSNN needs spatial dims divisible by 4, got {height}x{width}"
            )));
        }
        if classes < 2 || channels == 0 || t_steps == 0 {
            return Err(Error::Config(
                "ClassifierSNN needs >= 2 classes, positive channels and t_steps".into(),
            ));
        }
        let feat = 64 * (height / 4) * (width / 4);
        Ok(ClassifierSNN {
            conv1: Conv::new(32, channels, 3, 1, rng)?,
            conv2: Conv::new(64, 32, 3, 1, rng)?,
            dense: Dense::new(feat, classes, rng)?,
            mlf,
            t_steps,
            channels,
            height,
            width,
            classes,
        })
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("conv1.weight".into(), &self.conv1.weight),
            ("conv1.bias".into(), &self.conv1.bias),
            ("conv2.weight".into(), &self.conv2.weight),
            ("conv2.bias".into(), &self.conv2.bias),
            ("dense.weight".into(), &self.dense.weight),
            ("dense.bias".into(), &self.dense.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.dense.weight,
            &mut self.dense.bias,
        ]
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            *p = p.detach();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = vec![
            ("model".to_string(), "classifiersnn".to_string()),
            ("channels".to_string(), self.channels.to_string()),
            ("height".to_string(), self.height.to_string()),
            ("width".to_string(), self.width.to_string()),
            ("classes".to_string(), self.classes.to_string()),
            ("levels".to_string(), self.mlf.levels.to_string()),
            ("theta".to_string(), self.mlf.lif.theta.to_string()),
            ("lambda_mem".to_string(), self.mlf.lif.lambda_mem.to_string()),
            (
                "surrogate_width".to_string(),
                self.mlf.lif.surrogate_width.to_string(),
            ),
            ("t_steps".to_string(), self.t_steps.to_string()),
        ];
        write_checkpoint(path, &header, &self.param_entries())
    }

    pub fn load(path: &Path) -> Result<ClassifierSNN> {
        let (header, params) = read_checkpoint(path)?;
        expect_model(&header, "classifiersnn")?;
        let mlf = mlf_from_header(&header)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = ClassifierSNN::new(
            header_usize(&header, "channels")?,
            header_usize(&header, "height")?,
            header_usize(&header, "width")?,
            header_usize(&header, "classes")?,
            mlf,
            header_usize(&header, "t_steps")?,
            &mut rng,
        )?;
        let names = model_names(&model.param_entries());
        assign_params(model.params_mut(), &names, params)?;
        Ok(model)
    }
}

impl SpikingNet for ClassifierSNN {
    type State = Vec<SpikeState>;

    fn init_state(&self, input: &Tensor) -> Result<Self::State> {
        let (n, c, h, w) = input.shape().dims4()?;
        if c != self.channels || h != self.height || w != self.width {
            return Err(Error::ShapeMismatch(format!(
                "ClassifierSNN expects [N,{},{},{}], got {}",
                self.channels,
                self.height,
                self.width,
                input.shape()
            )));
        }
        Ok(vec![
            SpikeState::zeros([n, 32, h, w]),
            SpikeState::zeros([n, 64, h / 2, w / 2]),
        ])
    }

    fn step(&self, state: Self::State, input: &Tensor) -> Result<(Self::State, Tensor)> {
        let [s1, s2]: [SpikeState; 2] = state
            .try_into()
            .map_err(|_| Error::Usage("ClassifierSNN state arity".into()))?;
        let (n1, f1) = mlf_step(&s1, &self.conv1.forward(input)?, &self.mlf)?;
        let p1 = f1.avg_pool2d(2, 2)?;
        let (n2, f2) = mlf_step(&s2, &self.conv2.forward(&p1)?, &self.mlf)?;
        let p2 = f2.avg_pool2d(2, 2)?;
        let n = p2.shape().dims()[0];
        let flat = p2.reshape([n, p2.numel() / n])?;
        let logits = self.dense.forward(&flat)?;
        Ok((vec![n1, n2], logits))
    }
}

/// Time-averaged logits from a T-step unroll.
pub fn classify(model: &ClassifierSNN, x: &Tensor, t_steps: usize) -> Result<Tensor> {
    unroll(model, x, t_steps)
}

/// Argmax per row of a logits tensor.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, k) = logits.shape().dims2()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
        let _ = best;
    }
    Ok(out)
}

fn write_checkpoint(
    path: &Path,
    header: &[(String, String)],
    params: &[(String, &Tensor)],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&CKPT_VERSION.to_le_bytes())?;
    let header_text: String = header
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    file.write_all(&(header_text.len() as u32).to_le_bytes())?;
    file.write_all(header_text.as_bytes())?;
    file.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        file.write_all(&(name.len() as u32).to_le_bytes())?;
        file.write_all(name.as_bytes())?;
        tensor.write_ndt1(&mut file)?;
    }
    Ok(())
}

type Header = BTreeMap<String, String>;

fn read_checkpoint(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad checkpoint magic {magic:02x?}",
            path.display()
        )));
    }
    let version = read_u32(&mut file)?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let header_len = read_u32(&mut file)? as usize;
    if header_len > 1 << 20 {
        return Err(Error::Checkpoint("implausible checkpoint header size".into()));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header_text = String::from_utf8(header_bytes)
        .map_err(|_| Error::Checkpoint("checkpoint header is not UTF-8".into()))?;
    let mut header = Header::new();
    for line in header_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    }
    let count = read_u32(&mut file)? as usize;
    if count > 4096 {
        return Err(Error::Checkpoint("implausible checkpoint parameter count".into()));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut file)? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint("implausible parameter name length".into()));
        }
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let tensor = Tensor::read_ndt1(&mut file)?;
        params.push((name, tensor));
    }
    Ok((header, params))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn expect_model(header: &Header, kind: &str) -> Result<()> {
    match header.get("model") {
        Some(m) if m == kind => Ok(()),
        Some(m) => Err(Error::Checkpoint(format!(
            "checkpoint holds a {m:?} model, expected {kind:?}"
        ))),
        None => Err(Error::Checkpoint("checkpoint header lacks a model kind".into())),
    }
}

fn header_usize(header: &Header, key: &str) -> Result<usize> {
    header
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint header lacks {key}")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("checkpoint header {key} is not an integer")))
}

fn header_f32(header: &Header, key: &str) -> Result<f32> {
    header
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint header lacks {key}")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("checkpoint header {key} is not a number")))
}

fn mlf_from_header(header: &Header) -> Result<MLFConfig> {
    MLFConfig::new(
        header_usize(header, "levels")?,
        crate::snn::LIFConfig::new(
            header_f32(header, "lambda_mem")?,
            header_f32(header, "theta")?,
            header_f32(header, "surrogate_width")?,
        )?,
    )
}

fn model_names(entries: &[(String, &Tensor)]) -> Vec<String> {
    entries.iter().map(|(n, _)| n.clone()).collect()
}

fn assign_params(
    mut slots: Vec<&mut Tensor>,
    expected_names: &[String],
    loaded: Vec<(String, Tensor)>,
) -> Result<()> {
    if loaded.len() != slots.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model declares {}",
            loaded.len(),
            slots.len()
        )));
    }
    for ((slot, expected), (name, tensor)) in
        slots.iter_mut().zip(expected_names).zip(loaded.into_iter())
    {
        if &name != expected {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: found {name:?}, expected {expected:?}"
            )));
        }
        if tensor.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {} vs model shape {}",
                tensor.shape(),
                slot.shape()
            )));
        }
        **slot = tensor.detach_var();
    }
    Ok(())
}

use rand::SeedableRng;
