"""Multi-view volumetric VAE with a patient x modality Kronecker GP prior.

Submodules:
    autodiff    reverse-mode AD engine (conv3d, upsampling, ELU, dense, ...)
    gp          Kronecker GP prior: kernels, log-density, prediction, sampling
    nets        volumetric encoder/decoder and reparameterized sampling
    training    loss, Adam, staged schedule, checkpointable trainer
    synthdata   deterministic multi-view phantom generator and mask policies
    imputation  missing-view prediction and the two baselines
    metrics     MSE/PSNR and report aggregation
    config      plain-text configuration
    io          volume/manifest/checkpoint/metric-row formats
    cli         command-line entry points
"""

__version__ = "0.1.0"
