use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::attention_forward_probed;
use super::mlp::mlp_forward_probed;
use super::{
    AttentionWeights, BlockTaps, Gains, LayerNorm, Layout, Linear, MlpWeights, NoProbe, Part, Probe, Proj, Site,
};
use crate::error::{dims, invalid, Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Dimensions of the toy stack. Missing fields deserialize to defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub llm_layers: usize,
    pub dit_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Tokens per conditioning sequence.
    pub seq_len: usize,
    pub action_dim: usize,
    /// Rows of the action latent.
    pub action_horizon: usize,
    /// Default number of denoising steps.
    pub denoise_steps: usize,
    /// Rows of the timestep embedding table; bounds the usable step count.
    pub max_steps: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            llm_layers: 2,
            dit_layers: 2,
            model_dim: 64,
            heads: 4,
            seq_len: 16,
            action_dim: 7,
            action_horizon: 8,
            denoise_steps: 8,
            max_steps: 16,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ModelConfig";
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(invalid(
                OP,
                format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads),
            ));
        }
        if self.seq_len == 0 || self.action_dim == 0 || self.action_horizon == 0 || self.mlp_ratio == 0 {
            return Err(invalid(OP, "dimensions must be positive"));
        }
        if self.denoise_steps > self.max_steps || self.max_steps == 0 {
            return Err(invalid(OP, "denoise_steps must not exceed max_steps"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }

    pub fn attention_blocks(&self) -> usize {
        self.llm_layers + self.dit_layers
    }

    /// Global attention block index of `(part, block)`.
    pub fn global_block(&self, part: Part, block: usize) -> usize {
        match part {
            Part::Llm => block,
            Part::Dit => self.llm_layers + block,
        }
    }

    pub fn part_of(&self, global: usize) -> Part {
        if global < self.llm_layers {
            Part::Llm
        } else {
            Part::Dit
        }
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: AttentionWeights<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: MlpWeights<T>,
}

impl<T: Scalar> Block<T> {
    pub fn linear(&self, p: Proj) -> &Linear<T> {
        self.attn
            .proj(p)
            .or_else(|| self.mlp.proj(p))
            .expect("every projection lives in attn or mlp")
    }

    pub fn linear_mut(&mut self, p: Proj) -> &mut Linear<T> {
        if p.is_attention() {
            self.attn.proj_mut(p).expect("attention projection")
        } else {
            self.mlp.proj_mut(p).expect("mlp projection")
        }
    }

    /// `h + attn(LN1(h), kv)` then `+ mlp(LN2(.))`. With `kv_prefix` the keys
    /// and values see `[kv_prefix; LN1(h)]`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        h: &Matrix<T>,
        kv_prefix: Option<&Matrix<T>>,
        gains: Option<(&[T], T)>,
        part: Part,
        block: usize,
        global: usize,
        probe: &mut dyn Probe<T>,
    ) -> Result<Matrix<T>> {
        let n = self.ln1.forward(h)?;
        let kv = match kv_prefix {
            Some(prefix) => Matrix::vcat(&[prefix.clone(), n.clone()])?,
            None => n.clone(),
        };
        let (z, mut taps) = attention_forward_probed(&n, &kv, &self.attn, gains, Some((part, block)), probe)?;
        let h1 = h.add(&z)?;
        taps.residual_in = h.clone();
        taps.residual_out = h1.clone();
        probe.block_taps(global, &taps);
        let n2 = self.ln2.forward(&h1)?;
        let m = mlp_forward_probed(&n2, &self.mlp, Some((part, block)), probe)?;
        h1.add(&m)
    }
}

/// One calibration item: conditioning tokens and an initial action latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CalibSample<T> {
    pub tokens: Matrix<T>,
    pub latent: Matrix<T>,
}

impl<T: Scalar> CalibSample<T> {
    /// Gaussian tokens and latent shaped for `cfg`.
    pub fn gaussian(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            tokens: Matrix::gaussian(cfg.seq_len, cfg.model_dim, 1.0, rng),
            latent: Matrix::gaussian(cfg.action_horizon, cfg.action_dim, 1.0, rng),
        }
    }

    /// `n` samples from one seeded stream.
    pub fn buffer(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Self::gaussian(cfg, &mut rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PolicyStack<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub llm_blocks: Vec<Block<T>>,
    pub dit_blocks: Vec<Block<T>>,
    /// `action_dim x model_dim`
    pub action_in: Linear<T>,
    /// `max_steps x model_dim`; row `t - 1` conditions step `t`.
    pub timestep_embedding: Matrix<T>,
    pub final_norm: LayerNorm<T>,
    /// `model_dim x action_dim`
    pub action_out: Linear<T>,
}

impl<T: Scalar> PolicyStack<T> {
    /// Seeded toy stack. All weights and biases are drawn from
    /// `N(0, 1/model_dim)` in a fixed order; layer norms start at identity.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let s = 1.0 / (cfg.model_dim as f64).sqrt();
        Ok(Self::assemble(cfg, |rows, cols| {
            Matrix::gaussian(rows, cols, s, &mut rng)
        }))
    }

    /// Stack whose weights, biases and embeddings are all zero. Debug aid.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::assemble(cfg, Matrix::zeros))
    }

    fn assemble(cfg: &ModelConfig, mut draw: impl FnMut(usize, usize) -> Matrix<T>) -> Self {
        let d = cfg.model_dim;
        let hidden = cfg.hidden_dim();
        let block = |draw: &mut dyn FnMut(usize, usize) -> Matrix<T>| {
            let w_q = Linear::float(draw(d, d), None);
            let w_k = Linear::float(draw(d, d), None);
            let w_v = Linear::float(draw(d, d), None);
            let wo = draw(d, d);
            let w_o = Linear::float(wo, Some(draw(1, d).into_vec()));
            let wi = draw(d, hidden);
            let w_in = Linear::float(wi, Some(draw(1, hidden).into_vec()));
            let wout = draw(hidden, d);
            let w_out = Linear::float(wout, Some(draw(1, d).into_vec()));
            Block {
                ln1: LayerNorm::new(d),
                attn: AttentionWeights {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    heads: cfg.heads,
                    head_dim: cfg.head_dim(),
                },
                ln2: LayerNorm::new(d),
                mlp: MlpWeights { w_in, w_out },
            }
        };
        let llm_blocks = (0..cfg.llm_layers).map(|_| block(&mut draw)).collect();
        let dit_blocks = (0..cfg.dit_layers).map(|_| block(&mut draw)).collect();
        let ai = draw(cfg.action_dim, d);
        let action_in = Linear::float(ai, Some(draw(1, d).into_vec()));
        let timestep_embedding = draw(cfg.max_steps, d);
        let ao = draw(d, cfg.action_dim);
        let action_out = Linear::float(ao, Some(draw(1, cfg.action_dim).into_vec()));
        Self {
            config: *cfg,
            layout: Layout::None,
            llm_blocks,
            dit_blocks,
            action_in,
            timestep_embedding,
            final_norm: LayerNorm::new(d),
            action_out,
        }
    }

    pub fn blocks(&self, part: Part) -> &[Block<T>] {
        match part {
            Part::Llm => &self.llm_blocks,
            Part::Dit => &self.dit_blocks,
        }
    }

    pub fn block_mut(&mut self, part: Part, index: usize) -> Option<&mut Block<T>> {
        match part {
            Part::Llm => self.llm_blocks.get_mut(index),
            Part::Dit => self.dit_blocks.get_mut(index),
        }
    }

    /// Block by global attention index.
    pub fn global_block(&self, global: usize) -> Option<&Block<T>> {
        if global < self.llm_blocks.len() {
            self.llm_blocks.get(global)
        } else {
            self.dit_blocks.get(global - self.llm_blocks.len())
        }
    }

    pub fn global_block_mut(&mut self, global: usize) -> Option<&mut Block<T>> {
        let n = self.llm_blocks.len();
        if global < n {
            self.llm_blocks.get_mut(global)
        } else {
            self.dit_blocks.get_mut(global - n)
        }
    }

    /// Every linear site of the transformer blocks, language blocks first.
    pub fn sites(&self) -> Vec<Site> {
        let mut out = Vec::new();
        for part in [Part::Llm, Part::Dit] {
            for block in 0..self.blocks(part).len() {
                out.extend(Proj::ALL.iter().map(|&proj| Site { part, block, proj }));
            }
        }
        out
    }

    pub fn linear(&self, site: Site) -> Option<&Linear<T>> {
        self.blocks(site.part).get(site.block).map(|b| b.linear(site.proj))
    }

    pub fn linear_mut(&mut self, site: Site) -> Option<&mut Linear<T>> {
        self.block_mut(site.part, site.block).map(|b| b.linear_mut(site.proj))
    }

    pub fn quantized_sites(&self) -> Vec<Site> {
        self.sites()
            .into_iter()
            .filter(|&s| self.linear(s).is_some_and(Linear::is_quantized))
            .collect()
    }

    /// Checks that `other` has the same configuration and block structure.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.config != other.config
            || self.llm_blocks.len() != other.llm_blocks.len()
            || self.dit_blocks.len() != other.dit_blocks.len()
        {
            return Err(Error::Structure("stacks differ in configuration".into()));
        }
        Ok(())
    }

    fn gains_for<'a>(gains: Option<&Gains<'a, T>>, global: usize) -> Result<Option<(&'a [T], T)>> {
        gains.map(|g| g.for_block(global)).transpose()
    }

    /// Runs the language trunk; returns the final hidden states.
    pub fn llm_forward(&self, tokens: &Matrix<T>, gains: Option<&Gains<'_, T>>) -> Result<Matrix<T>> {
        self.llm_forward_probed(tokens, gains, &mut NoProbe)
    }

    pub fn llm_forward_probed(
        &self,
        tokens: &Matrix<T>,
        gains: Option<&Gains<'_, T>>,
        probe: &mut dyn Probe<T>,
    ) -> Result<Matrix<T>> {
        let cfg = &self.config;
        if tokens.shape() != (cfg.seq_len, cfg.model_dim) {
            return Err(dims(
                "llm_forward",
                format!("{}x{}", cfg.seq_len, cfg.model_dim),
                format!("{}x{}", tokens.rows(), tokens.cols()),
            ));
        }
        let mut h = tokens.clone();
        for (i, block) in self.llm_blocks.iter().enumerate() {
            let g = Self::gains_for(gains, i)?;
            h = block.forward(&h, None, g, Part::Llm, i, i, probe)?;
        }
        Ok(h)
    }

    /// One refinement `x_{t-1} = x_t + head(x_t, f_vl, t)`.
    ///
    /// The latent is embedded, offset by the step-`t` embedding, and run
    /// through the diffusion blocks; each block attends with queries from
    /// the action tokens and keys/values from `[f_vl; action tokens]`.
    pub fn denoise_step(
        &self,
        x_t: &Matrix<T>,
        f_vl: &Matrix<T>,
        t: usize,
        gains: Option<&Gains<'_, T>>,
    ) -> Result<Matrix<T>> {
        self.denoise_step_probed(x_t, f_vl, t, gains, &mut NoProbe)
    }

    pub fn denoise_step_probed(
        &self,
        x_t: &Matrix<T>,
        f_vl: &Matrix<T>,
        t: usize,
        gains: Option<&Gains<'_, T>>,
        probe: &mut dyn Probe<T>,
    ) -> Result<Matrix<T>> {
        let cfg = &self.config;
        if t == 0 || t > self.timestep_embedding.rows() {
            return Err(invalid(
                "denoise_step",
                format!("step {t} outside [1, {}]", self.timestep_embedding.rows()),
            ));
        }
        if x_t.shape() != (cfg.action_horizon, cfg.action_dim) {
            return Err(dims(
                "denoise_step",
                format!("{}x{}", cfg.action_horizon, cfg.action_dim),
                format!("{}x{}", x_t.rows(), x_t.cols()),
            ));
        }
        if f_vl.cols() != cfg.model_dim {
            return Err(dims("denoise_step", cfg.model_dim, f_vl.cols()));
        }
        let emb = self.timestep_embedding.row(t - 1);
        let mut h = self.action_in.forward(x_t)?.add_row_vector(emb)?;
        for (i, block) in self.dit_blocks.iter().enumerate() {
            let global = cfg.llm_layers + i;
            let g = Self::gains_for(gains, global)?;
            h = block.forward(&h, Some(f_vl), g, Part::Dit, i, global, probe)?;
        }
        let update = self.action_out.forward(&self.final_norm.forward(&h)?)?;
        x_t.add(&update)
    }

    /// `steps` refinements from `x_T`, for `t = steps, ..., 1`.
    pub fn rollout(
        &self,
        x_init: &Matrix<T>,
        f_vl: &Matrix<T>,
        steps: usize,
        gains: Option<&Gains<'_, T>>,
    ) -> Result<Matrix<T>> {
        let mut x = x_init.clone();
        for t in (1..=steps).rev() {
            x = self.denoise_step(&x, f_vl, t, gains)?;
        }
        Ok(x)
    }

    /// Latents `[x_T, x_{T-1}, ..., x_0]`.
    pub fn trajectory(
        &self,
        x_init: &Matrix<T>,
        f_vl: &Matrix<T>,
        steps: usize,
        gains: Option<&Gains<'_, T>>,
    ) -> Result<Vec<Matrix<T>>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(x_init.clone());
        for t in (1..=steps).rev() {
            let next = self.denoise_step(out.last().expect("nonempty"), f_vl, t, gains)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Attention taps of every block for one sample, with the diffusion head
    /// evaluated at step `t` on latent `x_t`.
    pub fn block_taps(
        &self,
        tokens: &Matrix<T>,
        x_t: &Matrix<T>,
        t: usize,
        gains: Option<&Gains<'_, T>>,
    ) -> Result<Vec<BlockTaps<T>>> {
        struct Collect<T>(Vec<BlockTaps<T>>);
        impl<T: Clone> Probe<T> for Collect<T> {
            fn block_taps(&mut self, _block: usize, taps: &BlockTaps<T>) {
                self.0.push(taps.clone());
            }
        }
        let mut c = Collect(Vec::new());
        let f_vl = self.llm_forward_probed(tokens, gains, &mut c)?;
        self.denoise_step_probed(x_t, &f_vl, t, gains, &mut c)?;
        Ok(c.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            llm_layers: 2,
            dit_layers: 2,
            model_dim: 32,
            heads: 4,
            seq_len: 8,
            action_dim: 4,
            action_horizon: 4,
            denoise_steps: 8,
            max_steps: 16,
            mlp_ratio: 4,
            seed: 11,
        }
    }

    #[test]
    fn build_structure_and_determinism() {
        let a = PolicyStack::<f64>::build(&small()).unwrap();
        let b = PolicyStack::<f64>::build(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.llm_blocks.len(), 2);
        assert_eq!(a.dit_blocks.len(), 2);
        assert_eq!(a.llm_blocks[0].attn.head_dim, 8);
        assert_eq!(a.sites().len(), 24);
        let mut c = small();
        c.seed = 12;
        assert_ne!(a, PolicyStack::build(&c).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small();
        c.heads = 5;
        assert!(PolicyStack::<f64>::build(&c).is_err());
        let mut c = small();
        c.denoise_steps = 17;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_stack_passes_input_through() {
        let cfg = small();
        let stack = PolicyStack::<f64>::zeros(&cfg).unwrap();
        let buf = CalibSample::<f64>::buffer(&cfg, 1, 3);
        let f = stack.llm_forward(&buf[0].tokens, None).unwrap();
        assert_eq!(f, buf[0].tokens);
        let x0 = stack.rollout(&buf[0].latent, &f, 8, None).unwrap();
        assert_eq!(x0, buf[0].latent);
        let x0 = stack.rollout(&buf[0].latent, &f, 16, None).unwrap();
        assert_eq!(x0, buf[0].latent);
        let zeros = Matrix::zeros(cfg.seq_len, cfg.model_dim);
        assert_eq!(stack.llm_forward(&zeros, None).unwrap(), zeros);
    }

    #[test]
    fn zero_weight_block_adds_biases() {
        // hand composition: with zero weights attention yields b_o and the
        // MLP yields gelu(b_in) * 0 + b_out, so F = x + b_o + b_out
        let cfg = ModelConfig {
            llm_layers: 1,
            dit_layers: 0,
            model_dim: 4,
            heads: 2,
            seq_len: 2,
            ..small()
        };
        let mut stack = PolicyStack::<f64>::zeros(&cfg).unwrap();
        let b_o = vec![0.5, -1.0, 0.25, 2.0];
        let b_out = vec![1.0, 1.0, -0.5, 0.0];
        if let Linear::Float { bias, .. } = &mut stack.llm_blocks[0].attn.w_o {
            *bias = Some(b_o.clone());
        }
        if let Linear::Float { bias, .. } = &mut stack.llm_blocks[0].mlp.w_out {
            *bias = Some(b_out.clone());
        }
        let x = Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.0, 1.0, 0.5]]).unwrap();
        let f = stack.llm_forward(&x, None).unwrap();
        let expected = Matrix::from_rows(&[&[2.5, 2.0, 2.75, 6.0], &[0.5, 0.0, 0.75, 2.5]]).unwrap();
        assert_eq!(f, expected);
    }

    #[test]
    fn step_bounds_and_neutral_gains() {
        let cfg = small();
        let stack = PolicyStack::<f64>::build(&cfg).unwrap();
        let s = &CalibSample::<f64>::buffer(&cfg, 1, 5)[0];
        let f = stack.llm_forward(&s.tokens, None).unwrap();
        assert!(stack.denoise_step(&s.latent, &f, 0, None).is_err());
        assert!(stack.denoise_step(&s.latent, &f, 17, None).is_err());

        let alpha = vec![vec![1.0; 4]; 4];
        let beta = vec![1.0; 4];
        let g = Gains {
            alpha: &alpha,
            beta: &beta,
        };
        let a = stack.denoise_step(&s.latent, &f, 8, None).unwrap();
        let b = stack.denoise_step(&s.latent, &f, 8, Some(&g)).unwrap();
        let bits = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(stack.rollout(&s.latent, &f, 0, None).unwrap(), s.latent);

        let traj = stack.trajectory(&s.latent, &f, 8, None).unwrap();
        assert_eq!(traj.len(), 9);
        assert_eq!(traj[8], stack.rollout(&s.latent, &f, 8, None).unwrap());
    }
}
