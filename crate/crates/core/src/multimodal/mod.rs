//! Radiomics and image fusion at toy scale: a patch encoder, a projection
//! of per-cell embeddings into image space, a grid decoder, segmentation
//! metrics and the coverage rule for cell labels.

mod fusion;
mod metrics;
mod model;
mod sample;

pub use fusion::{
    decode_mask, fuse_embeddings, patchify, project_radiomics, DecoderParams, FrozenStub, ImageEncoder,
    ImageEncoderInterface, ProjectionParams, ToyConvEncoder, ENCODER_STRIDE,
};
pub use metrics::{
    binarize, cell_label_from_segmentation, segmentation_metrics, segmentation_metrics_binary, CellLabel,
    CellLabelOutcome, SegMetrics, SEG_THRESHOLD,
};
pub use model::{
    train_multimodal, BatchOutput, EncoderKind, FusionHeads, MultimodalConfig, MultimodalModel, MultimodalReport,
    MultimodalTrainConfig, SampleOutput,
};
pub use sample::{
    load_sample, load_samples, prompt_stub, read_pgm, save_sample, save_samples, synthesize_seg_samples, write_pgm,
    SegSample, SegSynthSpec, CELL_LABELS, NON_TUMOR, PROMPT_DIM, REGION_ALIGN, TUMOR,
};
