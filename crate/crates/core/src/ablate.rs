//! Desk-scale ablation suites: encoder design, decoder design, masking
//! method, masking ratio and upstream loss curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use log::info;

use crate::config::{model_pairs, SegOptions};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::masking::MaskMode;
use crate::model::vit_mae::{VitMae, VitMaeSpec};
use crate::model::{DecoderVariant, EncoderVariant, ModelSpec, SwinMae};
use crate::seg::finetune::{finetune, FinetuneConfig};
use crate::seg::unet::{build_swin_unet_from_checkpoint, SwinUnetSpec};
use crate::seg::SegReport;
use crate::tensor::Tensor;
use crate::train::pretrain::{mae_checkpoint, pretrain};
use crate::train::{Checkpoint, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Suite {
    Encoder,
    Decoder,
    Masking,
    Ratio,
    Loss,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Encoder, Suite::Decoder, Suite::Masking, Suite::Ratio, Suite::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Encoder => "encoder",
            Suite::Decoder => "decoder",
            Suite::Masking => "masking",
            Suite::Ratio => "ratio",
            Suite::Loss => "loss",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown suite {s:?}")))
    }
}

pub const RATIOS: [f64; 4] = [0.45, 0.6, 0.75, 0.9];

#[derive(Debug, Clone)]
pub struct AblateConfig {
    /// Swin MAE every suite starts from.
    pub base: ModelSpec,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub seg: SegOptions,
    /// Reference autoencoder for the loss suite.
    pub vit: VitMaeSpec,
    pub suites: Vec<Suite>,
}

pub struct AblateData {
    pub unlabeled: Vec<Tensor>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

#[derive(Debug, Clone)]
pub struct AblateRow {
    pub suite: Suite,
    pub setting: String,
    pub report: Option<SegReport>,
    pub upstream_losses: Option<Vec<f64>>,
}

/// `spec` with the smallest mask window, starting at the configured one,
/// that its geometry accepts.
pub fn fit_mask_window(spec: &ModelSpec) -> Result<ModelSpec> {
    let first = match spec.geometry() {
        Ok(_) => return Ok(spec.clone()),
        Err(e) => e,
    };
    let side = spec.input_image().grid().0;
    let mut s = spec.clone();
    while s.mask_window_r < side {
        s.mask_window_r *= 2;
        if s.geometry().is_ok() {
            return Ok(s);
        }
    }
    Err(first)
}

struct Upstream {
    checkpoint: Checkpoint,
    losses: Vec<f64>,
}

struct Runner<'a> {
    cfg: &'a AblateConfig,
    data: &'a AblateData,
    upstream: BTreeMap<String, Upstream>,
    downstream: BTreeMap<String, SegReport>,
}

fn spec_key(spec: &ModelSpec) -> String {
    model_pairs(spec)
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

impl Runner<'_> {
    fn pretrain(&mut self, spec: &ModelSpec) -> Result<String> {
        let key = spec_key(spec);
        if !self.upstream.contains_key(&key) {
            info!("pretraining {key}");
            let model = SwinMae::new(spec.clone(), self.cfg.pretrain.seed)?;
            let out = pretrain(model, &self.data.unlabeled, &self.cfg.pretrain, |_, _, _, _| Ok(()))?;
            let checkpoint = mae_checkpoint(&out.model, None, self.cfg.pretrain.epochs, self.cfg.pretrain.seed);
            self.upstream.insert(
                key.clone(),
                Upstream {
                    checkpoint,
                    losses: out.losses,
                },
            );
        }
        Ok(key)
    }

    fn finetune(&mut self, upstream: Option<&str>, seg: &SegOptions) -> Result<SegReport> {
        let key = format!("{upstream:?}|{seg:?}");
        if let Some(r) = self.downstream.get(&key) {
            return Ok(r.clone());
        }
        let ckpt = upstream.map(|k| &self.upstream[k].checkpoint);
        let spec = SwinUnetSpec::new(&self.cfg.base, seg);
        let (net, report) = build_swin_unet_from_checkpoint(ckpt, spec, self.cfg.finetune.train.seed)?;
        info!("fine-tuning: {}", report.render().lines().next().unwrap_or(""));
        let out = finetune(net, &self.data.train, &self.data.test, &self.cfg.finetune, |_, _, _, _| Ok(()))?;
        let last = out.history.last().cloned().expect("at least one epoch");
        self.downstream.insert(key, last.clone());
        Ok(last)
    }

    fn row(&mut self, suite: Suite, setting: &str, spec: Option<ModelSpec>, seg: SegOptions) -> Result<AblateRow> {
        let key = match spec {
            Some(s) => Some(self.pretrain(&fit_mask_window(&s)?)?),
            None => None,
        };
        let report = self.finetune(key.as_deref(), &seg)?;
        Ok(AblateRow {
            suite,
            setting: setting.to_string(),
            report: Some(report),
            upstream_losses: key.map(|k| self.upstream[&k].losses.clone()),
        })
    }
}

/// Runs the configured suites in order; upstream and downstream runs with
/// identical settings are shared between suites.
pub fn run_ablation(cfg: &AblateConfig, data: &AblateData) -> Result<Vec<AblateRow>> {
    let mut r = Runner {
        cfg,
        data,
        upstream: BTreeMap::new(),
        downstream: BTreeMap::new(),
    };
    let base = &cfg.base;
    let seg = &cfg.seg;
    let mut rows = Vec::new();
    for &suite in &cfg.suites {
        match suite {
            Suite::Encoder => {
                for pe in [false, true] {
                    let s = SegOptions {
                        use_abs_pos_embed: pe,
                        ..seg.clone()
                    };
                    let tag = if pe { "+PE" } else { "" };
                    rows.push(r.row(suite, &format!("None{tag}"), None, s.clone())?);
                    for v in [EncoderVariant::I, EncoderVariant::II] {
                        let spec = ModelSpec {
                            encoder_variant: v,
                            decoder_variant: DecoderVariant::Vit,
                            use_abs_pos_embed: pe,
                            ..base.clone()
                        };
                        rows.push(r.row(suite, &format!("{v}{tag}"), Some(spec), s.clone())?);
                    }
                }
                let spec = ModelSpec {
                    encoder_variant: EncoderVariant::III,
                    decoder_variant: DecoderVariant::Vit,
                    use_abs_pos_embed: false,
                    ..base.clone()
                };
                rows.push(r.row(suite, "III", Some(spec), seg.clone())?);
            }
            Suite::Decoder => {
                let iii = ModelSpec {
                    encoder_variant: EncoderVariant::III,
                    use_abs_pos_embed: false,
                    ..base.clone()
                };
                let vit = ModelSpec {
                    decoder_variant: DecoderVariant::Vit,
                    ..iii.clone()
                };
                let swin = ModelSpec {
                    decoder_variant: DecoderVariant::Swin,
                    decoder_embedding: false,
                    ..iii.clone()
                };
                let swin_de = ModelSpec {
                    decoder_embedding: true,
                    ..swin.clone()
                };
                let dw = SegOptions {
                    transfer_decoder_weights: true,
                    ..seg.clone()
                };
                rows.push(r.row(suite, "vit", Some(vit), seg.clone())?);
                rows.push(r.row(suite, "swin", Some(swin.clone()), seg.clone())?);
                rows.push(r.row(suite, "swin+DE", Some(swin_de), seg.clone())?);
                rows.push(r.row(suite, "swin+DW", Some(swin), dw)?);
            }
            Suite::Masking => {
                for mode in [MaskMode::Window, MaskMode::Random] {
                    let spec = ModelSpec {
                        mask_mode: mode,
                        ..base.clone()
                    };
                    let name = match mode {
                        MaskMode::Window => "window",
                        MaskMode::Random => "random",
                    };
                    rows.push(r.row(suite, name, Some(spec), seg.clone())?);
                }
            }
            Suite::Ratio => {
                for ratio in RATIOS {
                    let spec = ModelSpec {
                        mask_ratio: ratio,
                        ..base.clone()
                    };
                    rows.push(r.row(suite, &ratio.to_string(), Some(spec), seg.clone())?);
                }
            }
            Suite::Loss => {
                info!("pretraining reference autoencoder");
                let vit = VitMae::new(cfg.vit.clone(), cfg.pretrain.seed)?;
                let out = pretrain(vit, &data.unlabeled, &cfg.pretrain, |_, _, _, _| Ok(()))?;
                rows.push(AblateRow {
                    suite,
                    setting: "mae".into(),
                    report: None,
                    upstream_losses: Some(out.losses),
                });
                let key = r.pretrain(&fit_mask_window(base)?)?;
                rows.push(AblateRow {
                    suite,
                    setting: "swin-mae".into(),
                    report: None,
                    upstream_losses: Some(r.upstream[&key].losses.clone()),
                });
            }
        }
    }
    Ok(rows)
}

/// `suite,setting,dsc_pct,mpa_pct,miou_pct,hd,upstream_final_loss`, with
/// empty cells where a run has no such stage.
pub fn ablation_csv(rows: &[AblateRow]) -> String {
    let mut s = String::from("suite,setting,dsc_pct,mpa_pct,miou_pct,hd,upstream_final_loss\n");
    for row in rows {
        let metrics = row.report.as_ref().map_or(",,,".to_string(), |r| r.csv_fields());
        let loss = row
            .upstream_losses
            .as_ref()
            .and_then(|l| l.last())
            .map_or(String::new(), |l| l.to_string());
        writeln!(s, "{},{},{metrics},{loss}", row.suite.name(), row.setting).expect("string write");
    }
    s
}

/// Per-epoch upstream losses, `suite,setting,epoch,loss`.
pub fn curves_csv(rows: &[AblateRow]) -> String {
    let mut s = String::from("suite,setting,epoch,loss\n");
    for row in rows {
        for (i, l) in row.upstream_losses.iter().flatten().enumerate() {
            writeln!(s, "{},{},{},{l}", row.suite.name(), row.setting, i + 1).expect("string write");
        }
    }
    s
}
