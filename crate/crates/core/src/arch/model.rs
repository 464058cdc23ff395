use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::spec::{ArchKind, ArchitectureSpec, Ladder};
use crate::error::{Error, Result};
use crate::nn::init::he_uniform;
use crate::nn::{Mode, ParamId, ParamStore, Shape, Tape, Tensor, Var};

/// Dropout rate used between the two convolutions of every block.
pub const DEFAULT_DROPOUT: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv { kernel: usize },
    ConvTranspose,
    MaxPool,
    Concat,
}

/// One node of a model's layer graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    /// Position in the graph, e.g. `mini2.dec1.conv1`.
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    first: Conv,
    second: Conv,
}

#[derive(Debug, Clone, Copy)]
struct UpBlock {
    up: Conv,
    block: DoubleConv,
}

/// One encoder-decoder: the base network or a refinery module.
#[derive(Debug, Clone)]
struct EncoderDecoder {
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    decoder: Vec<UpBlock>,
    tap: Option<Conv>,
    head: Conv,
}

/// Values a forward pass exposes.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One probability map per module; the last one is the model prediction.
    pub probs: Vec<Var>,
    /// Second-last-layer feature map of each module.
    pub features: Vec<Var>,
    /// First-level encoder features of the base module.
    pub low: Var,
}

/// A built network: its spec, parameters and wiring.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchitectureSpec,
    params: ParamStore,
    base: EncoderDecoder,
    minis: Vec<EncoderDecoder>,
    layers: Vec<LayerInfo>,
    dropout: f32,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    layers: &'a mut Vec<LayerInfo>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: String, c_in: usize, c_out: usize, k: usize) -> Conv {
        let w = he_uniform(Shape::new(c_out, c_in, k, k), c_in * k * k, self.rng);
        let weight = self.params.add(format!("{name}.weight"), w);
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
        self.layers.push(LayerInfo { name, kind: LayerKind::Conv { kernel: k }, in_channels: c_in, out_channels: c_out });
        Conv { weight, bias }
    }

    fn up(&mut self, name: String, c_in: usize, c_out: usize) -> Conv {
        // Each output pixel of a 2x2 stride-2 transposed conv sees exactly c_in inputs.
        let w = he_uniform(Shape::new(c_in, c_out, 2, 2), c_in, self.rng);
        let weight = self.params.add(format!("{name}.weight"), w);
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
        self.layers.push(LayerInfo { name, kind: LayerKind::ConvTranspose, in_channels: c_in, out_channels: c_out });
        Conv { weight, bias }
    }

    fn marker(&mut self, name: String, kind: LayerKind, c_in: usize, c_out: usize) {
        self.layers.push(LayerInfo { name, kind, in_channels: c_in, out_channels: c_out });
    }

    fn double(&mut self, name: &str, c_in: usize, c_out: usize) -> DoubleConv {
        DoubleConv {
            first: self.conv(format!("{name}.conv1"), c_in, c_out, 3),
            second: self.conv(format!("{name}.conv2"), c_out, c_out, 3),
        }
    }

    fn encoder_decoder(&mut self, prefix: &str, c_in: usize, ladder: &Ladder, tap: Option<usize>) -> EncoderDecoder {
        let mut encoder = Vec::new();
        let mut c = c_in;
        for (i, &f) in ladder.encoder.iter().enumerate() {
            encoder.push(self.double(&format!("{prefix}.enc{i}"), c, f));
            self.marker(format!("{prefix}.enc{i}.pool"), LayerKind::MaxPool, f, f);
            c = f;
        }
        let bottleneck = self.double(&format!("{prefix}.bottleneck"), c, ladder.bottleneck);
        c = ladder.bottleneck;
        let mut decoder = Vec::new();
        for (i, &f) in ladder.encoder.iter().enumerate().rev() {
            let up = self.up(format!("{prefix}.dec{i}.up"), c, f);
            self.marker(format!("{prefix}.dec{i}.concat"), LayerKind::Concat, 2 * f, 2 * f);
            let block = self.double(&format!("{prefix}.dec{i}"), 2 * f, f);
            decoder.push(UpBlock { up, block });
            c = f;
        }
        let tap = tap.map(|t| {
            let conv = self.conv(format!("{prefix}.tap"), c, t, 1);
            c = t;
            conv
        });
        let head = self.conv(format!("{prefix}.head"), c, 1, 1);
        EncoderDecoder { encoder, bottleneck, decoder, tap, head }
    }
}

impl Model {
    /// Build and He-initialize a model from `spec`, using `seed` for weights.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: &mut params, layers: &mut layers, rng: &mut rng };
        let base = b.encoder_decoder("base", spec.in_channels, &spec.base, None);
        let mut minis = Vec::new();
        if let Some(mini) = &spec.mini {
            let low = spec.base.top_width();
            let mut feat = spec.base.top_width();
            for j in 1..spec.iterations {
                b.marker(format!("mini{j}.input"), LayerKind::Concat, low + feat, low + feat);
                minis.push(b.encoder_decoder(&format!("mini{j}"), low + feat, &mini.ladder, Some(mini.feature_tap)));
                feat = mini.feature_tap;
            }
        }
        Ok(Model { spec: spec.clone(), params, base, minis, layers, dropout: DEFAULT_DROPOUT })
    }

    pub fn build_unet(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::build_kind(ArchKind::Unet, spec, seed)
    }

    pub fn build_miunet(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::build_kind(ArchKind::MiUnet, spec, seed)
    }

    pub fn build_iternet(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::build_kind(ArchKind::IterNet, spec, seed)
    }

    pub fn build_itermiunet(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::build_kind(ArchKind::IterMiUnet, spec, seed)
    }

    fn build_kind(kind: ArchKind, spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        if spec.kind != kind {
            return Err(Error::Config(format!("expected a {kind} spec, got {}", spec.kind)));
        }
        Self::build(spec, seed)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn dropout(&self) -> f32 {
        self.dropout
    }

    pub fn set_dropout(&mut self, p: f32) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        self.dropout = p;
        Ok(())
    }

    /// Exact number of trainable scalars (weights and biases).
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Layer graph with channel widths erased.
    pub fn structure(&self) -> Vec<(String, LayerKind)> {
        self.layers.iter().map(|l| (l.name.clone(), l.kind)).collect()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let m = self.spec.spatial_multiple();
        if shape.c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "{} expects {} input channel(s), got batch {shape}",
                self.spec.kind, self.spec.in_channels
            )));
        }
        if !shape.h.is_multiple_of(m) || !shape.w.is_multiple_of(m) || shape.h == 0 || shape.w == 0 {
            return Err(Error::Shape(format!(
                "input {shape}: height and width must be multiples of {m}; pad the image to the next multiple"
            )));
        }
        Ok(())
    }

    /// Record a forward pass on `tape`. In [`Mode::Train`] dropout draws from `rng`.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut R) -> Result<ForwardOutput> {
        self.check_input(tape.shape(x))?;
        let mut ctx = Ctx { tape, params: &self.params, mode, dropout: self.dropout, rng };
        let (low, feat, prob) = ctx.encoder_decoder(&self.base, x)?;
        let mut probs = vec![prob];
        let mut features = vec![feat];
        let mut prev = feat;
        for mini in &self.minis {
            let input = ctx.tape.concat_channels(low, prev)?;
            let (_, feat, prob) = ctx.encoder_decoder(mini, input)?;
            probs.push(prob);
            features.push(feat);
            prev = feat;
        }
        Ok(ForwardOutput { probs, features, low })
    }

    /// Eval-mode probability maps for a batch, one tensor per output.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone(), false);
        // Eval mode never draws.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        Ok(out.probs.iter().map(|&p| tape.value(p).clone()).collect())
    }

    /// Final (last-output) probability map for a batch.
    pub fn predict_final(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.predict(batch)?.pop().expect("at least one output"))
    }
}

struct Ctx<'a, R: ?Sized> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    mode: Mode,
    dropout: f32,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Ctx<'_, R> {
    fn conv(&mut self, c: Conv, x: Var) -> Result<Var> {
        let w = self.tape.param(self.params, c.weight);
        let b = self.tape.param(self.params, c.bias);
        self.tape.conv2d(x, w, b)
    }

    fn up(&mut self, c: Conv, x: Var) -> Result<Var> {
        let w = self.tape.param(self.params, c.weight);
        let b = self.tape.param(self.params, c.bias);
        let y = self.tape.conv_transpose2d(x, w, b)?;
        Ok(self.tape.relu(y))
    }

    fn double(&mut self, d: DoubleConv, x: Var) -> Result<Var> {
        let h = self.conv(d.first, x)?;
        let h = self.tape.relu(h);
        let h = self.tape.dropout(h, self.dropout, self.mode, self.rng)?;
        let h = self.conv(d.second, h)?;
        Ok(self.tape.relu(h))
    }

    /// Returns (first-level features, second-last features, probability map).
    fn encoder_decoder(&mut self, net: &EncoderDecoder, x: Var) -> Result<(Var, Var, Var)> {
        let mut skips = Vec::with_capacity(net.encoder.len());
        let mut h = x;
        for block in &net.encoder {
            let f = self.double(*block, h)?;
            skips.push(f);
            h = self.tape.max_pool2d(f)?;
        }
        h = self.double(net.bottleneck, h)?;
        for (up, skip) in net.decoder.iter().zip(skips.iter().rev()) {
            let u = self.up(up.up, h)?;
            let merged = self.tape.concat_channels(u, *skip)?;
            h = self.double(up.block, merged)?;
        }
        if let Some(tap) = net.tap {
            let t = self.conv(tap, h)?;
            h = self.tape.relu(t);
        }
        let logits = self.conv(net.head, h)?;
        let prob = self.tape.sigmoid(logits);
        Ok((skips[0], h, prob))
    }
}
