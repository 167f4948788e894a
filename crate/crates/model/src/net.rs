//! Fully convolutional dense-block encoder-decoder.
//!
//! Layout: a 3×3 stem, `L` down levels (dense block, then batch norm, ReLU,
//! 1×1 conv and 2×2 max pooling), a bottleneck dense block, and `L` up levels
//! (learned 2× upsampling, concatenation with the matching skip, dense block),
//! then a 1×1 head and a softmax over classes. Dense layers are batch norm,
//! ReLU, 3×3 conv producing `growth` maps. Up-path blocks pass on only their
//! new maps, except the last, which keeps its input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use longiseg_core::{INPUT_CHANNELS, NUM_CLASSES};

use crate::element::Element;
use crate::error::{ModelError, Result};
use crate::graph::{BatchStats, Graph, NodeId, ParamId};
use crate::tensor::Tensor;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub name: String,
    pub in_channels: usize,
    pub out_classes: usize,
    /// Maps produced by the stem convolution.
    pub first_conv: usize,
    /// Maps added by each dense layer.
    pub growth: usize,
    /// Dense layers per down level, shallowest first.
    pub down_layers: Vec<usize>,
    pub bottleneck_layers: usize,
    /// Dense layers per up level, deepest first.
    pub up_layers: Vec<usize>,
    pub seed: u64,
    /// Start the head at zero so the first outputs are uniform.
    #[serde(default)]
    pub zero_head: bool,
    /// Independent sets of running batch-norm statistics sharing the weights.
    #[serde(default = "one_bank")]
    pub stat_banks: usize,
}

fn one_bank() -> usize {
    1
}

impl BackboneConfig {
    /// The 56-layer reference network: 5 levels of 4-layer blocks, growth 12.
    pub fn fc_densenet56(seed: u64) -> Self {
        Self {
            name: "fc-densenet56".into(),
            in_channels: INPUT_CHANNELS,
            out_classes: NUM_CLASSES,
            first_conv: 48,
            growth: 12,
            down_layers: vec![4; 5],
            bottleneck_layers: 4,
            up_layers: vec![4; 5],
            seed,
            zero_head: false,
            stat_banks: 1,
        }
    }

    /// A narrow three-level variant that trains on one CPU core.
    pub fn desk(seed: u64) -> Self {
        Self {
            name: "desk".into(),
            in_channels: INPUT_CHANNELS,
            out_classes: NUM_CLASSES,
            first_conv: 16,
            growth: 8,
            down_layers: vec![2; 3],
            bottleneck_layers: 2,
            up_layers: vec![2; 3],
            seed,
            zero_head: false,
            stat_banks: 1,
        }
    }

    /// One level with two dense layers per block; for gradient checks.
    pub fn tiny(seed: u64) -> Self {
        Self {
            name: "tiny".into(),
            in_channels: INPUT_CHANNELS,
            out_classes: NUM_CLASSES,
            first_conv: 4,
            growth: 3,
            down_layers: vec![2],
            bottleneck_layers: 2,
            up_layers: vec![2],
            seed,
            zero_head: false,
            stat_banks: 1,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "fc-densenet56" => Ok(Self::fc_densenet56(seed)),
            "desk" => Ok(Self::desk(seed)),
            "tiny" => Ok(Self::tiny(seed)),
            other => Err(ModelError::Config(format!(
                "unknown backbone preset `{other}` (fc-densenet56, desk, tiny)"
            ))),
        }
    }

    pub fn levels(&self) -> usize {
        self.down_layers.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn stride_multiple(&self) -> usize {
        1 << self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.in_channels != INPUT_CHANNELS {
            return bad(format!("in_channels must be {INPUT_CHANNELS}, got {}", self.in_channels));
        }
        if self.out_classes != NUM_CLASSES {
            return bad(format!("out_classes must be {NUM_CLASSES}, got {}", self.out_classes));
        }
        if self.first_conv == 0 || self.growth == 0 {
            return bad("first_conv and growth must be positive".into());
        }
        if self.down_layers.len() != self.up_layers.len() {
            return bad("down and up paths need the same number of levels".into());
        }
        if self.bottleneck_layers == 0 || self.up_layers.contains(&0) {
            return bad("bottleneck and up blocks need at least one layer".into());
        }
        if self.stat_banks == 0 {
            return bad("stat_banks must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics of bank 0 in batch norm.
    Eval,
    /// Running statistics of the given bank.
    EvalBank(usize),
}

#[derive(Clone, Debug)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct BnP {
    gamma: ParamId,
    beta: ParamId,
    slot: usize,
}

#[derive(Clone, Debug)]
struct LayerP {
    bn: BnP,
    conv: ConvP,
}

#[derive(Clone, Debug)]
struct Plan {
    stem: ConvP,
    down: Vec<(Vec<LayerP>, LayerP)>,
    bottleneck: Vec<LayerP>,
    up: Vec<(ConvP, Vec<LayerP>)>,
    head: ConvP,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct Network<S> {
    config: BackboneConfig,
    params: Vec<Tensor<S>>,
    names: Vec<String>,
    /// Bank-major: bank `b`, slot `i` lives at `b * slots + i`.
    running: Vec<RunningStats<S>>,
    slots: usize,
    plan: Plan,
}

struct Builder<S> {
    rng: ChaCha8Rng,
    params: Vec<Tensor<S>>,
    names: Vec<String>,
    running: Vec<RunningStats<S>>,
}

impl<S: Element> Builder<S> {
    fn push(&mut self, name: String, t: Tensor<S>) -> ParamId {
        self.params.push(t);
        self.names.push(name);
        ParamId(self.params.len() - 1)
    }

    fn uniform(&mut self, shape: [usize; 4], fan_in: f64) -> Tensor<S> {
        let bound = (6.0 / fan_in).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::lit(self.rng.random_range(-bound..bound))).collect();
        Tensor::from_vec(shape, data).expect("sized")
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> ConvP {
        let w = if zero {
            Tensor::zeros([cout, cin, k, k])
        } else {
            self.uniform([cout, cin, k, k], (cin * k * k) as f64)
        };
        ConvP {
            w: self.push(format!("{name}.weight"), w),
            b: self.push(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])),
        }
    }

    fn up(&mut self, name: &str, c: usize) -> ConvP {
        // each output pixel of the stride-2 transpose sees about a quarter of the taps
        let w = self.uniform([c, c, 3, 3], (c * 9) as f64 / 4.0);
        ConvP {
            w: self.push(format!("{name}.weight"), w),
            b: self.push(format!("{name}.bias"), Tensor::zeros([1, c, 1, 1])),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnP {
        let gamma = self.push(format!("{name}.gamma"), Tensor::from_vec([1, c, 1, 1], vec![S::one(); c]).unwrap());
        let beta = self.push(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]));
        self.running.push(RunningStats {
            mean: vec![S::zero(); c],
            var: vec![S::one(); c],
        });
        BnP {
            gamma,
            beta,
            slot: self.running.len() - 1,
        }
    }

    fn layer(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> LayerP {
        LayerP {
            bn: self.bn(&format!("{name}.norm"), cin),
            conv: self.conv(&format!("{name}.conv"), cin, cout, k, false),
        }
    }

    fn block(&mut self, name: &str, cin: usize, n: usize, growth: usize) -> Vec<LayerP> {
        (0..n)
            .map(|i| self.layer(&format!("{name}.layer{i}"), cin + i * growth, growth, 3))
            .collect()
    }
}

impl<S: Element> Network<S> {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: Vec::new(),
            names: Vec::new(),
            running: Vec::new(),
        };
        let k = config.growth;
        let stem = b.conv("stem", config.in_channels, config.first_conv, 3, false);
        let mut m = config.first_conv;
        let mut skips = Vec::new();
        let mut down = Vec::new();
        for (l, &n) in config.down_layers.iter().enumerate() {
            let block = b.block(&format!("down{l}"), m, n, k);
            m += n * k;
            skips.push(m);
            let td = b.layer(&format!("down{l}.transition"), m, m, 1);
            down.push((block, td));
        }
        let bottleneck = b.block("bottleneck", m, config.bottleneck_layers, k);
        let mut prev = config.bottleneck_layers * k;
        let mut up = Vec::new();
        let levels = config.levels();
        let mut out = prev;
        for (j, &n) in config.up_layers.iter().enumerate() {
            let l = levels - 1 - j;
            let tu = b.up(&format!("up{l}.transition"), prev);
            let cin = prev + skips[l];
            let block = b.block(&format!("up{l}"), cin, n, k);
            out = if j + 1 == levels { cin + n * k } else { n * k };
            prev = n * k;
            up.push((tu, block));
        }
        let head = b.conv("head", out, config.out_classes, 1, config.zero_head);
        let slots = b.running.len();
        let running = b.running.iter().cycle().take(slots * config.stat_banks).cloned().collect();
        Ok(Self {
            config,
            params: b.params,
            names: b.names,
            running,
            slots,
            plan: Plan {
                stem,
                down,
                bottleneck,
                up,
                head,
            },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Every bank's statistics, bank-major.
    pub fn running_stats(&self) -> &[RunningStats<S>] {
        &self.running
    }

    pub fn bank_stats(&self, bank: usize) -> &[RunningStats<S>] {
        &self.running[bank * self.slots..(bank + 1) * self.slots]
    }

    pub fn stat_banks(&self) -> usize {
        self.config.stat_banks
    }

    /// Resizes to `banks` statistic banks; new banks start as copies of bank 0.
    pub fn with_stat_banks(mut self, banks: usize) -> Result<Self> {
        if banks == 0 {
            return Err(ModelError::Config("stat_banks must be positive".into()));
        }
        let first = self.bank_stats(0).to_vec();
        self.running.truncate(self.slots * banks.min(self.config.stat_banks));
        for _ in self.config.stat_banks..banks {
            self.running.extend(first.iter().cloned());
        }
        self.config.stat_banks = banks;
        Ok(self)
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<S>] {
        &mut self.running
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Folds training-mode batch statistics into bank 0.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<S>]) {
        self.update_bank_stats(0, stats)
    }

    pub fn update_bank_stats(&mut self, bank: usize, stats: &[BatchStats<S>]) {
        assert!(bank < self.config.stat_banks, "bank {bank} out of range");
        let mom = S::lit(BN_MOMENTUM);
        for st in stats {
            let r = &mut self.running[bank * self.slots + st.slot];
            for (rm, &m) in r.mean.iter_mut().zip(&st.mean) {
                *rm = (S::one() - mom) * *rm + mom * m;
            }
            for (rv, &v) in r.var.iter_mut().zip(&st.var) {
                *rv = (S::one() - mom) * *rv + mom * v;
            }
        }
    }

    fn bn(&self, g: &mut Graph<'_, S>, x: NodeId, p: &BnP, mode: Mode) -> Result<NodeId> {
        let bank = match mode {
            Mode::Train => None,
            Mode::Eval => Some(0),
            Mode::EvalBank(b) => Some(b),
        };
        let running = bank.map(|b| {
            let r = &self.running[b * self.slots + p.slot];
            (r.mean.as_slice(), r.var.as_slice())
        });
        g.batch_norm(x, p.gamma, p.beta, p.slot, running)
    }

    /// Batch norm, ReLU, convolution (3×3 padded, or 1×1).
    fn layer(&self, g: &mut Graph<'_, S>, x: NodeId, p: &LayerP, mode: Mode) -> Result<NodeId> {
        let y = self.bn(g, x, &p.bn, mode)?;
        let r = g.relu(y);
        g.release(y);
        let k = self.params[p.conv.w.0].shape()[2];
        let z = g.conv2d(r, p.conv.w, Some(p.conv.b), 1, k / 2)?;
        g.release(r);
        Ok(z)
    }

    /// Runs a dense block; returns the input concatenated with all new maps,
    /// or only the new maps.
    fn block(&self, g: &mut Graph<'_, S>, x: NodeId, layers: &[LayerP], keep_input: bool, mode: Mode) -> Result<NodeId> {
        let mut feats = vec![x];
        let mut cur = x;
        for p in layers {
            let y = self.layer(g, cur, p, mode)?;
            feats.push(y);
            let next = g.concat(&feats)?;
            if cur != x {
                g.release(cur);
            }
            cur = next;
        }
        if keep_input {
            return Ok(cur);
        }
        if cur != x {
            g.release(cur);
        }
        let out = g.concat(&feats[1..])?;
        for &f in &feats[1..] {
            g.release(f);
        }
        Ok(out)
    }

    /// Builds the graph for a batch and returns it with the probability node.
    /// The input is zero-padded to the stride multiple and the output cropped back.
    pub fn forward<'a>(&'a self, input: &Tensor<S>, mode: Mode, record: bool) -> Result<(Graph<'a, S>, NodeId)> {
        let [n, c, h, w] = input.shape();
        if let Mode::EvalBank(b) = mode {
            if b >= self.config.stat_banks {
                return Err(ModelError::Config(format!(
                    "statistic bank {b} requested, network has {}",
                    self.config.stat_banks
                )));
            }
        }
        if c != self.config.in_channels {
            return Err(ModelError::Shape(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if n == 0 || h == 0 || w == 0 {
            return Err(ModelError::Shape(format!("empty input {:?}", input.shape())));
        }
        let mult = self.config.stride_multiple();
        let (ph, pw) = (h.div_ceil(mult) * mult, w.div_ceil(mult) * mult);
        let before = [(ph - h) / 2, (pw - w) / 2];
        let mut g = Graph::new(&self.params, record);
        let x = if (ph, pw) == (h, w) {
            g.input(input.clone())
        } else {
            g.input(input.pad_to([ph, pw], before))
        };

        let stem = g.conv2d(x, self.plan.stem.w, Some(self.plan.stem.b), 1, 1)?;
        g.release(x);
        let mut cur = stem;
        let mut skips = Vec::new();
        for (block, td) in &self.plan.down {
            let out = self.block(&mut g, cur, block, true, mode)?;
            if out != cur {
                g.release(cur);
            }
            skips.push(out);
            let t = self.layer(&mut g, out, td, mode)?;
            cur = g.max_pool2(t)?;
            g.release(t);
        }
        let mut up_in = self.block(&mut g, cur, &self.plan.bottleneck, false, mode)?;
        g.release(cur);
        let levels = self.plan.up.len();
        for (j, (tu, block)) in self.plan.up.iter().enumerate() {
            let u = g.conv_transpose2x(up_in, tu.w, Some(tu.b))?;
            g.release(up_in);
            let skip = skips.pop().expect("one skip per level");
            let joined = g.concat(&[u, skip])?;
            g.release(u);
            g.release(skip);
            up_in = self.block(&mut g, joined, block, j + 1 == levels, mode)?;
            if up_in != joined {
                g.release(joined);
            }
        }
        let logits = g.conv2d(up_in, self.plan.head.w, Some(self.plan.head.b), 1, 0)?;
        g.release(up_in);
        let probs = g.softmax(logits);
        g.release(logits);
        let out = if (ph, pw) == (h, w) {
            probs
        } else {
            let o = g.crop(probs, before, [h, w]);
            g.release(probs);
            o
        };
        Ok((g, out))
    }

    /// Evaluation-mode class probabilities, `[n, classes, h, w]`.
    pub fn predict(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        self.predict_bank(input, 0)
    }

    pub fn predict_bank(&self, input: &Tensor<S>, bank: usize) -> Result<Tensor<S>> {
        let (mut g, out) = self.forward(input, Mode::EvalBank(bank), false)?;
        Ok(g.take_value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["fc-densenet56", "desk", "tiny"] {
            BackboneConfig::preset(name, 0).unwrap().validate().unwrap();
        }
        assert!(BackboneConfig::preset("unet", 0).is_err());
        let mut c = BackboneConfig::tiny(0);
        c.in_channels = 7;
        assert!(Network::<f32>::new(c).is_err());
    }

    #[test]
    fn reference_network_size() {
        let net = Network::<f32>::new(BackboneConfig::fc_densenet56(0)).unwrap();
        // dense layers: 5·4 down + 4 bottleneck + 5·4 up, plus 5 transitions down
        let norms = net.param_names().iter().filter(|n| n.ends_with(".gamma")).count();
        assert_eq!(norms, 44 + 5);
        assert!(net.parameter_count() > 1_000_000, "{}", net.parameter_count());
    }

    #[test]
    fn output_is_a_distribution_of_input_size() {
        let net = Network::<f64>::new(BackboneConfig::tiny(3)).unwrap();
        let input = Tensor::from_vec([2, 8, 7, 5], (0..560).map(|v| (v as f64 * 0.13).sin()).collect()).unwrap();
        let out = net.predict(&input).unwrap();
        assert_eq!(out.shape(), [2, 3, 7, 5]);
        for s in 0..2 {
            for i in 0..35 {
                let sum: f64 = (0..3).map(|c| out.plane(s, c)[i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_an_error() {
        let net = Network::<f32>::new(BackboneConfig::tiny(0)).unwrap();
        assert!(net.predict(&Tensor::zeros([1, 7, 8, 8])).is_err());
    }

    #[test]
    fn banks_share_weights_but_not_statistics() {
        let net = Network::<f64>::new(BackboneConfig::tiny(2)).unwrap().with_stat_banks(2).unwrap();
        assert_eq!(net.running_stats().len(), 2 * net.bank_stats(0).len());
        let input = Tensor::from_vec([1, 8, 8, 8], (0..512).map(|v| (v as f64 * 0.3).cos()).collect()).unwrap();
        assert_eq!(net.predict_bank(&input, 0).unwrap(), net.predict_bank(&input, 1).unwrap());
        let (g, _) = net.forward(&input, Mode::Train, true).unwrap();
        let stats = g.into_batch_stats();
        let mut moved = net.clone();
        moved.update_bank_stats(1, &stats);
        assert_eq!(moved.bank_stats(0), net.bank_stats(0));
        assert_ne!(moved.bank_stats(1), net.bank_stats(1));
        assert_ne!(moved.predict_bank(&input, 1).unwrap(), moved.predict(&input).unwrap());
        assert!(moved.predict_bank(&input, 2).is_err());
        assert_eq!(moved.clone().with_stat_banks(1).unwrap().running_stats(), moved.bank_stats(0));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut cfg = BackboneConfig::tiny(1);
        cfg.zero_head = true;
        let net = Network::<f32>::new(cfg).unwrap();
        let input = Tensor::from_vec([1, 8, 8, 8], (0..512).map(|v| (v % 7) as f32 * 0.1).collect()).unwrap();
        let out = net.predict(&input).unwrap();
        assert!(out.as_slice().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-6));
    }
}
