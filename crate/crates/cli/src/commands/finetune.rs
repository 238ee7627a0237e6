use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hybridna::finetune_eval::{
    evaluate_logits, extend_for_vocab, finetune_discriminative, finetune_generative,
    parse_classification_tsv, parse_generative_tsv, predict, write_predictions, ActivityTask,
    ClsHead, Evaluation, FinetuneMode, FinetunePlan, FinetuneReport, LabeledExample, MotifTask,
};
use hybridna::model::{Checkpoint, Model, ModelConfig};
use hybridna::numerics::Rng;
use hybridna::tokenizer::Vocab;
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, run_cre, CreConfig, PromptMeta};
use crate::config::{absolute, read_text};
use crate::error::{CliError, Result};
use crate::run::RunDir;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classify,
    Generative,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub seed: u64,
    /// Pretrained weights; takes precedence over `model`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub plan: FinetunePlan,
    pub task: TaskKind,
    #[serde(default)]
    pub classify: Option<ClassifyConfig>,
    #[serde(default)]
    pub generative: Option<GenerativeConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub mode: FinetuneMode,
    #[serde(default = "two")]
    pub classes: usize,
    /// `sequence<TAB>class` files.
    #[serde(default)]
    pub tsv: Option<SplitPaths>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSplits>,
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSplits {
    pub task: MotifTask,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeConfig {
    /// Prompt-token families; label `d` under prefix `p` is token `p{d}`.
    pub prefixes: Vec<String>,
    pub levels: usize,
    /// `label<TAB>sequence` file.
    #[serde(default)]
    pub tsv: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticActivity>,
    #[serde(default)]
    pub cre: Option<CreConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticActivity {
    pub task: ActivityTask,
    pub n: usize,
}

#[derive(Serialize)]
struct ClassifyOutput<'a> {
    finetune: &'a FinetuneReport,
    test: &'a Evaluation,
}

fn exactly_one<A, B>(a: &Option<A>, b: &Option<B>, what: &str) -> Result<()> {
    if a.is_some() == b.is_some() {
        return Err(CliError::Config(format!(
            "{what}: give exactly one of `tsv` and `synthetic`"
        )));
    }
    Ok(())
}

impl FinetuneConfig {
    fn resolve(&mut self) -> Result<()> {
        if let Some(p) = &mut self.checkpoint {
            absolute(p)?;
            self.model = None;
        } else if self.model.is_none() {
            return Err(CliError::Config("give a `checkpoint` or a `model`".into()));
        }
        match self.task {
            TaskKind::Classify => {
                let c = self.classify.as_mut().ok_or_else(|| {
                    CliError::Config("task `classify` needs a `classify` section".into())
                })?;
                exactly_one(&c.tsv, &c.synthetic, "classify")?;
                if let Some(t) = &mut c.tsv {
                    absolute(&mut t.train)?;
                    absolute(&mut t.val)?;
                    absolute(&mut t.test)?;
                }
            }
            TaskKind::Generative => {
                let g = self.generative.as_mut().ok_or_else(|| {
                    CliError::Config("task `generative` needs a `generative` section".into())
                })?;
                exactly_one(&g.tsv, &g.synthetic, "generative")?;
                if let Some(t) = &mut g.tsv {
                    absolute(t)?;
                }
                if g.synthetic.is_some() && g.prefixes.len() != 1 {
                    return Err(CliError::Config(
                        "generative.synthetic needs exactly one prefix".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn base_model(&self, rng: &mut Rng) -> Result<Model> {
        match (&self.checkpoint, &self.model) {
            (Some(p), _) => Ok(load_checkpoint(p)?.1),
            (None, Some(cfg)) => Ok(Model::build(cfg, rng)?),
            (None, None) => unreachable!("checked in resolve"),
        }
    }
}

fn classification_tsv(data: &[LabeledExample]) -> Result<String> {
    let vocab = Vocab::new();
    let mut out = String::new();
    for e in data {
        let _ = writeln!(out, "{}\t{}", vocab.decode(&e.sequence.ids)?, e.class()?);
    }
    Ok(out)
}

fn read_classification(path: &Path) -> Result<Vec<LabeledExample>> {
    parse_classification_tsv(&read_text(path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn run(mut cfg: FinetuneConfig, root: &Path) -> Result<()> {
    cfg.resolve()?;
    let mut rng = Rng::new(cfg.seed);
    let mut model = cfg.base_model(&mut rng)?;
    match cfg.task {
        TaskKind::Classify => classify(&cfg, model, &mut rng, root),
        TaskKind::Generative => generative(&cfg, &mut model, &mut rng, root),
    }
}

fn classify(cfg: &FinetuneConfig, mut model: Model, rng: &mut Rng, root: &Path) -> Result<()> {
    let c = cfg.classify.as_ref().expect("checked in resolve");
    let (train, val, test) = match (&c.tsv, &c.synthetic) {
        (Some(t), _) => (
            read_classification(&t.train)?,
            read_classification(&t.val)?,
            read_classification(&t.test)?,
        ),
        (None, Some(s)) => {
            let mut data_rng = rng.fork();
            (
                s.task.sample(&mut data_rng, s.n_train)?,
                s.task.sample(&mut data_rng, s.n_val)?,
                s.task.sample(&mut data_rng, s.n_test)?,
            )
        }
        (None, None) => unreachable!("checked in resolve"),
    };
    let dir = RunDir::create(root, "finetune", cfg.seed)?;
    dir.record_config(cfg)?;
    if c.synthetic.is_some() {
        dir.write("train.tsv", classification_tsv(&train)?)?;
        dir.write("val.tsv", classification_tsv(&val)?)?;
        dir.write("test.tsv", classification_tsv(&test)?)?;
    }
    let mut head = ClsHead::new(model.config.d_model, c.classes, rng)?;
    let report =
        finetune_discriminative(&mut model, &mut head, &train, &val, c.mode, &cfg.plan, rng)?;
    let labels = test
        .iter()
        .map(|e| e.class())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let logits = predict(&model, &head, &test)?;
    let evaluation = evaluate_logits(&logits, &labels)?;
    dir.write("predictions.tsv", write_predictions(&logits, &labels)?)?;
    let mut csv = String::from("epoch,train_loss,val_loss,val_mcc\n");
    for e in &report.epochs {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            e.epoch, e.train_loss, e.val_loss, e.val_mcc
        );
    }
    dir.write("metrics.csv", csv)?;
    dir.write_json(
        "report.json",
        &ClassifyOutput {
            finetune: &report,
            test: &evaluation,
        },
    )?;
    let mut ck = Checkpoint::from_model(&model, 0, None);
    ck.tensors
        .push(("head.weight".into(), head.weight.detach()));
    ck.tensors.push(("head.bias".into(), head.bias.detach()));
    if let Some(norm) = &head.norm {
        ck.tensors
            .push(("head.norm.mean".into(), norm.mean.clone()));
        ck.tensors
            .push(("head.norm.inv_std".into(), norm.inv_std.clone()));
    }
    ck.save(&dir.file("model.hydn"))?;
    println!(
        "best epoch {}; test mcc {:.4} f1 {:.4} accuracy {:.4}",
        report.best_epoch, evaluation.mcc, evaluation.f1, evaluation.accuracy
    );
    Ok(())
}

fn generative(cfg: &FinetuneConfig, model: &mut Model, rng: &mut Rng, root: &Path) -> Result<()> {
    let g = cfg.generative.as_ref().expect("checked in resolve");
    let prefixes: Vec<&str> = g.prefixes.iter().map(String::as_str).collect();
    let mut vocab = Vocab::new();
    vocab.register_label_tokens(&prefixes, g.levels)?;
    let mut pairs = None;
    let data = match (&g.tsv, &g.synthetic) {
        (Some(p), _) => parse_generative_tsv(&read_text(p)?, &vocab, &prefixes)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        (None, Some(s)) => {
            let sampled = s.task.sample(&mut rng.fork(), s.n)?;
            let data = s.task.to_examples(&sampled, &vocab, prefixes[0])?;
            pairs = Some(sampled);
            data
        }
        (None, None) => unreachable!("checked in resolve"),
    };
    let dir = RunDir::create(root, "finetune", cfg.seed)?;
    dir.record_config(cfg)?;
    if let Some(pairs) = &pairs {
        let tsv: String = pairs.iter().map(|(l, s)| format!("{l}\t{s}\n")).collect();
        dir.write("train.tsv", tsv)?;
    }
    extend_for_vocab(model, &vocab, rng)?;
    let losses = finetune_generative(model, &vocab, &data, &cfg.plan, rng)?;
    let mut csv = String::from("epoch,train_loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    dir.write("metrics.csv", csv)?;
    dir.write("vocab.txt", vocab.to_text())?;
    let mut ck = Checkpoint::from_model(model, 0, None);
    ck.extra = serde_json::json!({
        "prompts": PromptMeta {
            vocab: vocab.to_text(),
            prefixes: g.prefixes.clone(),
        }
    });
    ck.save(&dir.file("model.hydn"))?;
    println!(
        "generative fine-tuning: loss {:.4} -> {:.4}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(cre) = &g.cre {
        let report = run_cre(&dir, model, &vocab, &g.prefixes, cre, &data)?;
        for (name, r) in &report.labels {
            println!(
                "{name}: top1 {:.3} mean_top100 {:.3} (n={})",
                r.top1, r.mean_top100, r.n
            );
        }
        println!("diversity {:.3}", report.diversity);
    }
    Ok(())
}
