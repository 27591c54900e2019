//! Run configuration: one JSON document per run, overridden by CLI flags.

use crate::synth::SynthSpec;
use crate::BenchError;
use argus_core::curation::Split;
use argus_core::vit::{Compression, EncoderConfig, PlanKind, PretrainMethod};
use argus_core::volume::ResolutionProfile;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root for every artifact the commands write.
    pub out: PathBuf,
    /// Input corpus (JSON lines of raw records); defaults to the synth output.
    pub corpus: Option<PathBuf>,
    /// Optional CSV of clinical scores merged by `evaluate`.
    pub clinical: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            corpus: None,
            clinical: None,
        }
    }
}

/// Encoder widths and geometry. Compression and connector depth are taken
/// from the top-level run fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub patch_dims: [usize; 3],
    pub grid_dims: [usize; 3],
    pub d_joint: usize,
    pub d_llm: usize,
    pub n_queries: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = EncoderConfig::desk();
        Self {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            mlp_ratio: d.mlp_ratio,
            patch_dims: d.patch_dims,
            grid_dims: d.grid_dims,
            d_joint: d.d_joint,
            d_llm: d.d_llm,
            n_queries: d.n_queries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    /// Caps each pretraining stage.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 4,
            max_steps: None,
            lr: argus_core::vit::train::PRETRAIN_LR,
            batch_size: 4,
            tau: 0.07,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub stage2_epochs: usize,
    pub batch_size: usize,
}

impl Default for AlignSection {
    fn default() -> Self {
        Self {
            stage2_epochs: 2,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    /// Seed of the parameter point and inputs; independent of the run seed so
    /// the check is reproducible across runs.
    pub point_seed: u64,
    pub eps: f64,
    pub threshold: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            point_seed: 11,
            eps: 1e-4,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Splits whose records are scored. Retrieval always draws from train and
    /// never returns the query itself.
    pub splits: Vec<Split>,
    pub model_name: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            splits: vec![Split::Test],
            model_name: "argus-desk".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub mask_ratios: Vec<f64>,
    pub compressions: Vec<Compression>,
    pub connector_depths: Vec<usize>,
    pub data_fractions: Vec<f64>,
    /// Size of the synthetic training pool that fractions are drawn from.
    pub n_samples: usize,
    /// Size of the separate synthetic evaluation set.
    pub eval_samples: usize,
    pub pretrain_steps: usize,
    pub align_steps: usize,
    /// Runs cells on the worker pool. Each cell stays deterministic; only the
    /// order of progress lines changes.
    pub parallel: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            mask_ratios: vec![0.75],
            compressions: vec![Compression::PixelShuffle],
            connector_depths: vec![2],
            data_fractions: vec![1.0],
            n_samples: 48,
            eval_samples: 8,
            pretrain_steps: 20,
            align_steps: 10,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: ResolutionProfile,
    pub compression: Compression,
    pub connector_depth: usize,
    pub mask_ratio: f64,
    pub pretrain_method: PretrainMethod,
    pub plan: PlanKind,
    pub paths: Paths,
    pub model: ModelSection,
    pub synth: SynthSpec,
    pub pretrain: PretrainSection,
    pub align: AlignSection,
    pub gradcheck: GradcheckSection,
    pub evaluate: EvaluateSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            profile: ResolutionProfile::Normal,
            compression: Compression::PixelShuffle,
            connector_depth: 2,
            mask_ratio: 0.75,
            pretrain_method: PretrainMethod::Mae,
            plan: PlanKind::TwoStageUnfrozen,
            paths: Paths::default(),
            model: ModelSection::default(),
            synth: SynthSpec::default(),
            pretrain: PretrainSection::default(),
            align: AlignSection::default(),
            gradcheck: GradcheckSection::default(),
            evaluate: EvaluateSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Flag values; `None` leaves the config field alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub profile: Option<String>,
    pub compression: Option<String>,
    pub connector: Option<usize>,
    pub out: Option<PathBuf>,
}

fn check_depth(d: usize) -> Result<(), BenchError> {
    if d == 1 || d == 2 {
        Ok(())
    } else {
        Err(BenchError::Validation(format!("unknown connector depth {d}; expected one of: 1, 2")))
    }
}

fn check_ratio(r: f64) -> Result<(), BenchError> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(BenchError::Validation(format!("mask ratio {r} must lie strictly between 0 and 1")))
    }
}

impl RunConfig {
    /// Parses a config document. Relative paths inside it resolve against
    /// `base` (normally the directory holding the file).
    pub fn from_json(text: &str, base: &Path) -> Result<Self, BenchError> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| BenchError::Validation(format!("config: {e}")))?;
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.paths.out);
        cfg.paths.corpus.as_mut().map(rebase);
        cfg.paths.clinical.as_mut().map(rebase);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    /// Applies flags on top of the config (flags win) and validates the result.
    pub fn apply(mut self, o: &Overrides) -> Result<Self, BenchError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.profile {
            self.profile = p.parse().map_err(BenchError::Validation)?;
        }
        if let Some(c) = &o.compression {
            self.compression = c.parse().map_err(BenchError::Validation)?;
        }
        if let Some(d) = o.connector {
            self.connector_depth = d;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Validation(m));
        check_depth(self.connector_depth)?;
        check_ratio(self.mask_ratio)?;
        self.encoder().validate().map_err(|e| BenchError::Validation(e.to_string()))?;
        self.synth_spec().validate()?;
        if self.pretrain.batch_size == 0 || self.align.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.pretrain.epochs == 0 || self.align.stage2_epochs == 0 {
            return bad("epoch counts must be positive".into());
        }
        if !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            return bad(format!("pretrain lr must be positive, got {}", self.pretrain.lr));
        }
        if !(self.pretrain.tau > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.pretrain.tau));
        }
        if !(self.gradcheck.eps > 0.0 && self.gradcheck.threshold > 0.0) {
            return bad("gradcheck eps and threshold must be positive".into());
        }
        if self.evaluate.splits.is_empty() {
            return bad("evaluate.splits is empty".into());
        }
        let s = &self.sweep;
        if s.mask_ratios.is_empty()
            || s.compressions.is_empty()
            || s.connector_depths.is_empty()
            || s.data_fractions.is_empty()
        {
            return bad("every sweep axis needs at least one value".into());
        }
        s.mask_ratios.iter().try_for_each(|&r| check_ratio(r))?;
        s.connector_depths.iter().try_for_each(|&d| check_depth(d))?;
        if let Some(f) = s.data_fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return bad(format!("data fraction {f} must lie in (0, 1]"));
        }
        if s.eval_samples < 2 {
            return bad("sweep.eval_samples must be at least 2".into());
        }
        if s.pretrain_steps == 0 || s.align_steps == 0 {
            return bad("sweep step counts must be positive".into());
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        self.encoder_with(self.compression, self.connector_depth)
    }

    pub fn encoder_with(&self, compression: Compression, connector_depth: usize) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_ratio: m.mlp_ratio,
            patch_dims: m.patch_dims,
            grid_dims: m.grid_dims,
            d_joint: m.d_joint,
            d_llm: m.d_llm,
            n_queries: m.n_queries,
            compression,
            connector_depth,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn out_dir(&self, stage: &str) -> PathBuf {
        self.paths.out.join(stage)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.paths
            .corpus
            .clone()
            .unwrap_or_else(|| self.out_dir("synth").join("corpus.jsonl"))
    }
}
