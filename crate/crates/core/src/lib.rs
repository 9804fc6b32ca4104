//! Exact convolutional Gaussian-process (CNN-GP) and convolutional neural
//! tangent (CNTK) kernels, computed by a layerwise dynamic program over
//! order-4 covariance tensors.

pub mod arccos;
pub mod assembly;
pub mod data;
pub mod augment;
pub mod dp;
pub mod error;
pub mod finite_width;
pub mod readout;
pub mod regression;
pub mod tensor;
pub mod verify;

pub use arccos::{expect_relu_deriv_prod, expect_relu_prod, Cov2, C_SIGMA};
pub use dp::{
    compute_pair, compute_pair_cached, compute_pair_depths, compute_pair_in, dp_layer, sigma0,
    Family, KernelConfig, PairState, SelfState,
};
pub use error::{Error, Result};
pub use readout::{lap_weights, readout_fc, readout_gap, readout_lap, LapWeights, Readout};
pub use tensor::{patch_trace, resolve_index, trace4, Image, KernelTensor4, PaddingScheme, Real};
pub use augment::{
    augmented_conv_kernel, augmented_kernel, build_augmented_dataset, check_equivariance, hflip,
    translate, Augmented, AugmentedDataset, ConvKernel, EquivarianceReport, Group, GroupElement,
    PairKernel,
};
pub use assembly::{
    assemble, kernel_blocks, AssembledKernels, AssemblyOptions, KernelBlocks, KernelSpec, LabeledSet,
    Precision,
};
pub use regression::{
    assemble_kernel_matrix, krr_fit, krr_predict, krr_scores, read_cross_kernel, read_kernel_matrix,
    verify_augmentation_equivalence, write_cross_kernel, write_kernel_matrix, CrossKernel, KernelMatrix,
    Prediction, RegressionModel, EquivalenceReport, DEFAULT_LAMBDA,
};
pub use finite_width::{
    analytic_kernel, cnn_forward, cnn_gradient, gradient_check, mc_cnngp, mc_cntk,
    verify_bblur_lap, BBlurReport, CnnArch, CnnParams, McConfig, McEstimate, McEstimator,
    NetReadout,
};
pub use data::{
    build_patch_bank, load_cifar10, load_fashion_mnist, patch_featurize, read_dataset,
    standardize, write_dataset, DataSplit, LabeledDataset, PatchBank, PatchBankOptions,
};
pub use verify::{run_criterion, run_suite, CriterionResult, Outcome, Scale, SuiteReport, VerifyOptions};
