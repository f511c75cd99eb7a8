//! Downstream segmentation: Swin-Unet, weight transfer, fine-tuning and
//! evaluation.

pub mod augment;
pub mod eval;
pub mod finetune;
pub mod metrics;
pub mod unet;

pub use eval::{evaluate_predictions, evaluate_segmentation, render_table, SegReport};
pub use finetune::{finetune, load_unet, run_finetune, unet_checkpoint, FinetuneConfig};
pub use unet::{build_swin_unet_from_checkpoint, SwinUnet, SwinUnetSpec, TransferReport};
