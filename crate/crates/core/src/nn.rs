//! Recurrent feature extractor and the pure-neural baseline head.
//!
//! Minibatches are laid out time-major: an `[T × D]` episode `b` of a batch of
//! `B` contributes row `t·B + b` of a `[T·B × D]` matrix, so each time step of
//! the whole batch is one contiguous row block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{leaf_params, ParamTree};
use crate::tensor::{Tape, Tensor, Var};

/// Affine layer `y = x Wᵀ + b` with `W` `[out × in]` and `b` `[out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}
leaf_params!(Linear { weight, bias });

pub type LinearParams = Linear<Tensor>;

/// LSTM weights with the four gates stacked in the order input, forget,
/// cell candidate, output: `w_ih` `[4H × D]`, `w_hh` `[4H × H]`, `bias` `[4H]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm<T> {
    pub w_ih: T,
    pub w_hh: T,
    pub bias: T,
}
leaf_params!(Lstm { w_ih, w_hh, bias });

pub type LstmParams = Lstm<Tensor>;

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl LinearParams {
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform(rng, &[output, input], input),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

impl LstmParams {
    /// Forget-gate bias starts at 1, all other biases at 0.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w_ih: uniform(rng, &[4 * hidden, input], input),
            w_hh: uniform(rng, &[4 * hidden, hidden], hidden),
            bias,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub encoder_size: usize,
    pub hidden_size: usize,
    pub bidirectional: bool,
    pub dropout_rate: f64,
    pub feature_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            input_dim: 76,
            encoder_size: 16,
            hidden_size: 16,
            bidirectional: true,
            dropout_rate: 0.3,
            feature_dim: 16,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder_size == 0 || self.hidden_size == 0 || self.feature_dim == 0 {
            return Err(Error::Config("extractor widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Extractor weights ω: input projection, (Bi)LSTM and the relu combine layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extractor<T> {
    pub input_linear: Linear<T>,
    pub forward_lstm: Lstm<T>,
    pub backward_lstm: Option<Lstm<T>>,
    pub combine_linear: Linear<T>,
}

pub type ExtractorParams = Extractor<Tensor>;

impl<T> Extractor<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Extractor<U> {
        Extractor {
            input_linear: self.input_linear.map(f),
            forward_lstm: self.forward_lstm.map(f),
            backward_lstm: self.backward_lstm.as_ref().map(|l| l.map(f)),
            combine_linear: self.combine_linear.map(f),
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.backward_lstm.is_some()
    }
}

impl<T> ParamTree<T> for Extractor<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.input_linear.visit(f);
        self.forward_lstm.visit(f);
        if let Some(b) = &self.backward_lstm {
            b.visit(f);
        }
        self.combine_linear.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.input_linear.visit_mut(f);
        self.forward_lstm.visit_mut(f);
        if let Some(b) = &mut self.backward_lstm {
            b.visit_mut(f);
        }
        self.combine_linear.visit_mut(f);
    }
}

impl ExtractorParams {
    pub fn init<R: Rng + ?Sized>(config: &ExtractorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let input_linear = LinearParams::init(config.input_dim, config.encoder_size, rng);
        let forward_lstm = LstmParams::init(config.encoder_size, h, rng);
        let backward_lstm = config
            .bidirectional
            .then(|| LstmParams::init(config.encoder_size, h, rng));
        let width = if config.bidirectional { 2 * h } else { h };
        let combine_linear = LinearParams::init(width, config.feature_dim, rng);
        Ok(Self {
            input_linear,
            forward_lstm,
            backward_lstm,
            combine_linear,
        })
    }

    pub fn zeros(config: &ExtractorConfig) -> Self {
        let h = config.hidden_size;
        let width = if config.bidirectional { 2 * h } else { h };
        Self {
            input_linear: LinearParams::zeros(config.input_dim, config.encoder_size),
            forward_lstm: LstmParams::zeros(config.encoder_size, h),
            backward_lstm: config.bidirectional.then(|| LstmParams::zeros(config.encoder_size, h)),
            combine_linear: LinearParams::zeros(width, config.feature_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_linear.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.combine_linear.output_dim()
    }

    /// Checks that the layer widths chain together.
    pub fn validate(&self) -> Result<()> {
        let enc = self.input_linear.output_dim();
        let h = self.forward_lstm.hidden_dim();
        let mut ok = self.input_linear.bias.len() == enc
            && self.forward_lstm.input_dim() == enc
            && self.forward_lstm.w_ih.rows() == 4 * h
            && self.forward_lstm.bias.len() == 4 * h
            && self.combine_linear.bias.len() == self.combine_linear.output_dim();
        if let Some(b) = &self.backward_lstm {
            ok &= b.input_dim() == enc && b.hidden_dim() == h && b.bias.len() == 4 * h;
        }
        let width = if self.is_bidirectional() { 2 * h } else { h };
        ok &= self.combine_linear.input_dim() == width;
        if !ok {
            return Err(Error::State("extractor layer widths do not chain".into()));
        }
        let mut finite = true;
        self.visit(&mut |t| finite &= t.is_finite());
        if !finite {
            return Err(Error::State("non-finite extractor parameters".into()));
        }
        Ok(())
    }
}

/// `x Wᵀ + b` for `x` `[n × in]`.
pub fn linear<'t>(params: &Linear<Var<'t>>, x: Var<'t>) -> Result<Var<'t>> {
    Ok(x.matmul_nt(params.weight)?.add_row(params.bias)?)
}

/// Runs an LSTM over a time-major batch `seq` `[T·B × D]` from zero initial
/// states. Row block `t` of the `[T·B × H]` output holds the hidden state after
/// consuming step `t`; with `reverse` the sequence is consumed from the last
/// step and the output is still indexed by original time.
pub fn lstm_forward<'t>(params: &Lstm<Var<'t>>, seq: Var<'t>, batch: usize, reverse: bool) -> Result<Var<'t>> {
    let shape = seq.shape();
    let (rows, d) = (shape[0], shape[1]);
    let h = params.w_hh.shape()[1];
    if params.w_ih.shape() != [4 * h, d] {
        return Err(Error::Tensor(crate::tensor::dim_err(
            "lstm_forward",
            format!("input width {d} vs w_ih {:?}", params.w_ih.shape()),
        )));
    }
    if batch == 0 || rows == 0 || rows % batch != 0 {
        return Err(Error::Tensor(crate::tensor::dim_err(
            "lstm_forward",
            format!("{rows} rows is not a positive multiple of batch {batch}"),
        )));
    }
    let steps = rows / batch;
    let projected = seq.matmul_nt(params.w_ih)?.add_row(params.bias)?;
    let mut outputs: Vec<Option<Var<'t>>> = vec![None; steps];
    let mut state: Option<(Var<'t>, Var<'t>)> = None;
    for k in 0..steps {
        let t = if reverse { steps - 1 - k } else { k };
        let mut gates = projected.slice_rows(t * batch, (t + 1) * batch)?;
        if let Some((h_prev, _)) = state {
            gates = gates.add(h_prev.matmul_nt(params.w_hh)?)?;
        }
        let i = gates.slice_cols(0, h)?.sigmoid()?;
        let f = gates.slice_cols(h, 2 * h)?.sigmoid()?;
        let g = gates.slice_cols(2 * h, 3 * h)?.tanh()?;
        let o = gates.slice_cols(3 * h, 4 * h)?.sigmoid()?;
        let mut c = i.mul(g)?;
        if let Some((_, c_prev)) = state {
            c = c.add(f.mul(c_prev)?)?;
        }
        let h_new = o.mul(c.tanh()?)?;
        outputs[t] = Some(h_new);
        state = Some((h_new, c));
    }
    let outputs: Vec<Var<'t>> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    Ok(seq.tape().concat_rows(&outputs)?)
}

/// Inverted-dropout mask: entries are `0` with probability `rate` and
/// `1/(1 − rate)` otherwise.
pub fn dropout_mask<R: Rng + ?Sized>(rate: f64, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let n = shape.iter().product();
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let data = if rate == 0.0 {
        vec![1.0; n]
    } else {
        (0..n).map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 }).collect()
    };
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Stacks equally shaped `[T × D]` episodes into a time-major `[T·B × D]` batch.
pub fn time_major(episodes: &[&Tensor]) -> Result<Tensor> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let (t, d) = (first.rows(), first.cols());
    let b = episodes.len();
    let mut data = vec![0.0; t * b * d];
    for (j, ep) in episodes.iter().enumerate() {
        if ep.shape() != [t, d] {
            return Err(Error::Tensor(crate::tensor::dim_err(
                "time_major",
                format!("episode {j} has shape {:?}, expected [{t}, {d}]", ep.shape()),
            )));
        }
        for s in 0..t {
            data[(s * b + j) * d..(s * b + j + 1) * d].copy_from_slice(ep.row(s));
        }
    }
    Ok(Tensor::matrix(t * b, d, data)?)
}

/// Features `[B × F]` of a time-major batch `[T·B × D]`: input projection,
/// optional dropout mask `[T·B × encoder]`, (Bi)LSTM, relu combine layer per
/// step, then the unweighted average over the `T` steps.
pub fn feature_extract<'t>(
    params: &Extractor<Var<'t>>,
    batch: Var<'t>,
    batch_size: usize,
    dropout: Option<&Tensor>,
) -> Result<Var<'t>> {
    let shape = batch.shape();
    let d = params.input_linear.weight.shape()[1];
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::Tensor(crate::tensor::dim_err(
            "feature_extract",
            format!("batch shape {shape:?}, expected {d} columns"),
        )));
    }
    if batch_size == 0 || shape[0] == 0 || !shape[0].is_multiple_of(batch_size) {
        return Err(Error::Tensor(crate::tensor::dim_err(
            "feature_extract",
            format!("{} rows is not a positive multiple of batch {batch_size}", shape[0]),
        )));
    }
    let steps = shape[0] / batch_size;
    let tape = batch.tape();
    let mut x = linear(&params.input_linear, batch)?;
    if let Some(mask) = dropout {
        x = x.mul(tape.constant(mask.clone()))?;
    }
    let fwd = lstm_forward(&params.forward_lstm, x, batch_size, false)?;
    let hidden = match &params.backward_lstm {
        Some(b) => tape.concat_cols(&[fwd, lstm_forward(b, x, batch_size, true)?])?,
        None => fwd,
    };
    let per_step = linear(&params.combine_linear, hidden)?.relu()?;
    Ok(per_step.mean_row_blocks(steps)?)
}

/// Baseline logits `[B × 1]` from a `16 → 1` linear head on the features.
pub fn baseline_logit<'t>(
    params: &Extractor<Var<'t>>,
    head: &Linear<Var<'t>>,
    batch: Var<'t>,
    batch_size: usize,
    dropout: Option<&Tensor>,
) -> Result<Var<'t>> {
    linear(head, feature_extract(params, batch, batch_size, dropout)?)
}

/// Evaluation-mode features `[B × F]` for stored parameters, without dropout.
pub fn extract_features(params: &ExtractorParams, episodes: &[&Tensor]) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.map(&mut |t| tape.constant(t.clone()));
    let batch = tape.constant(time_major(episodes)?);
    let f = feature_extract(&p, batch, episodes.len(), None)?;
    Ok((*f.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn small_config(bidirectional: bool) -> ExtractorConfig {
        ExtractorConfig {
            input_dim: 5,
            encoder_size: 4,
            hidden_size: 3,
            bidirectional,
            dropout_rate: 0.3,
            feature_dim: 4,
        }
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let cfg = ExtractorConfig::default();
        let p = ExtractorParams::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = Tensor::new(vec![48, 76], (0..48 * 76).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let f = extract_features(&p, &[&ep]).unwrap();
        assert_eq!(f.shape(), [1, 16]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_lstm_gives_zero_hidden_states() {
        let tape = Tape::new();
        let p = LstmParams::zeros(2, 3).map(&mut |t| tape.constant(t.clone()));
        let seq = tape.constant(Tensor::matrix(4, 2, vec![1., -2., 3., 0.5, -1., 2., 7., 1.]).unwrap());
        let h = lstm_forward(&p, seq, 1, false).unwrap().value();
        assert_eq!(h.shape(), [4, 3]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_scalar_cell() {
        let tape = Tape::new();
        let p = LstmParams {
            w_ih: Tensor::column(vec![0.5, -0.3, 0.8, 1.2]),
            w_hh: Tensor::column(vec![0.1, 0.2, 0.3, 0.4]),
            bias: Tensor::vector(vec![0.1, 1.0, -0.2, 0.0]),
        };
        let pv = p.map(&mut |t| tape.constant(t.clone()));
        let x = 0.7;
        let h = lstm_forward(&pv, tape.constant(Tensor::matrix(1, 1, vec![x]).unwrap()), 1, false)
            .unwrap()
            .value()
            .item();
        let i = sigmoid(0.5 * x + 0.1);
        let g = (0.8 * x - 0.2_f64).tanh();
        let o = sigmoid(1.2 * x);
        let expected = o * (i * g).tanh();
        assert!((h - expected).abs() < 1e-15);
    }

    #[test]
    fn reverse_on_palindrome_mirrors_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmParams::init(2, 3, &mut rng);
        let rows = [[0.3, -1.0], [1.2, 0.4], [-0.5, 0.9], [1.2, 0.4], [0.3, -1.0]];
        let seq = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let tape = Tape::new();
        let pv = p.map(&mut |t| tape.constant(t.clone()));
        let s = tape.constant(seq);
        let fwd = lstm_forward(&pv, s, 1, false).unwrap().value();
        let rev = lstm_forward(&pv, s, 1, true).unwrap().value();
        for t in 0..5 {
            for j in 0..3 {
                assert!((rev.get(t, j) - fwd.get(4 - t, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mirrored_bilstm_on_constant_input_has_equal_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = small_config(true);
        let mut p = ExtractorParams::init(&cfg, &mut rng).unwrap();
        p.backward_lstm = Some(p.forward_lstm.clone());
        let tape = Tape::new();
        let pv = p.map(&mut |t| tape.constant(t.clone()));
        let row: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seq = tape.constant(Tensor::matrix(6, 5, row.repeat(6)).unwrap());
        let x = linear(&pv.input_linear, seq).unwrap();
        let fwd = lstm_forward(&pv.forward_lstm, x, 1, false).unwrap().value();
        let bwd = lstm_forward(pv.backward_lstm.as_ref().unwrap(), x, 1, true).unwrap().value();
        // step k of the forward pass equals step k of the backward consumption
        for k in 0..6 {
            for j in 0..3 {
                assert!((fwd.get(k, j) - bwd.get(5 - k, j)).abs() < 1e-15);
            }
        }
        // the time-averaged halves therefore agree
        for j in 0..3 {
            let a: f64 = (0..6).map(|t| fwd.get(t, j)).sum();
            let b: f64 = (0..6).map(|t| bwd.get(t, j)).sum();
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn dropout_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ones = dropout_mask(0.0, &[3, 4], &mut rng).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let big = dropout_mask(0.3, &[100_000], &mut rng).unwrap();
        let mean = big.sum() / 1e5;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(big.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
        let a = dropout_mask(0.3, &[50], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = dropout_mask(0.3, &[50], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(dropout_mask(1.0, &[2], &mut rng), Err(Error::Config(_))));
        assert!(matches!(dropout_mask(-0.1, &[2], &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_head_examples() {
        let cfg = small_config(true);
        let p = ExtractorParams::zeros(&cfg);
        let mut head = LinearParams::zeros(4, 1);
        let ep = Tensor::full(&[3, 5], 0.4);
        let tape = Tape::new();
        let pv = p.map(&mut |t| tape.constant(t.clone()));
        let hv = head.map(&mut |t| tape.constant(t.clone()));
        let logit = baseline_logit(&pv, &hv, tape.constant(ep.clone()), 1, None).unwrap().value().item();
        assert_eq!(sigmoid(logit), 0.5);
        head.bias = Tensor::vector(vec![-1.3]);
        let hv = head.map(&mut |t| tape.constant(t.clone()));
        let logit = baseline_logit(&pv, &hv, tape.constant(ep), 1, None).unwrap().value().item();
        assert_eq!(logit, -1.3);
    }

    #[test]
    fn features_ignore_other_batch_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = small_config(true);
        let p = ExtractorParams::init(&cfg, &mut rng).unwrap();
        let eps: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new(vec![6, 5], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let refs: Vec<&Tensor> = eps.iter().collect();
        let all = extract_features(&p, &refs).unwrap();
        let shuffled = extract_features(&p, &[refs[2], refs[0], refs[3], refs[1]]).unwrap();
        for (src, dst) in [(2, 0), (0, 1), (3, 2), (1, 3)] {
            for j in 0..4 {
                assert!((all.get(src, j) - shuffled.get(dst, j)).abs() < 1e-14);
            }
        }
        let alone = extract_features(&p, &[refs[1]]).unwrap();
        for j in 0..4 {
            assert!((alone.get(0, j) - all.get(1, j)).abs() < 1e-14);
        }
        assert_eq!(extract_features(&p, &refs).unwrap(), all);
    }

    #[test]
    fn shape_errors() {
        let cfg = small_config(false);
        let p = ExtractorParams::zeros(&cfg);
        let bad = Tensor::zeros(&[4, 6]);
        assert!(matches!(extract_features(&p, &[&bad]), Err(Error::Tensor(_))));
        let a = Tensor::zeros(&[4, 5]);
        let b = Tensor::zeros(&[3, 5]);
        assert!(time_major(&[&a, &b]).is_err());
        assert!(p.validate().is_ok());
        let mut broken = p.clone();
        broken.combine_linear = LinearParams::zeros(6, 4);
        assert!(broken.validate().is_err());
    }

    #[test]
    fn init_respects_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ExtractorConfig::default();
        let p = ExtractorParams::init(&cfg, &mut rng).unwrap();
        p.validate().unwrap();
        assert_eq!(p.combine_linear.weight.shape(), [16, 32]);
        assert!(p.forward_lstm.bias.data()[16..32].iter().all(|&b| b == 1.0));
        let bound = 1.0 / 76f64.sqrt();
        assert!(p.input_linear.weight.data().iter().all(|w| w.abs() <= bound));
        let uni = ExtractorParams::init(&ExtractorConfig { bidirectional: false, ..cfg }, &mut rng).unwrap();
        assert!(uni.backward_lstm.is_none());
        assert_eq!(uni.combine_linear.weight.shape(), [16, 16]);
    }
}
