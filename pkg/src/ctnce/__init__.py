"""Multivariate temporal point processes trained by continuous-time
noise-contrastive estimation, with an exact-likelihood MLE baseline.

Submodules:
    event_streams     data model, JSONL serialization, dataset splitting
    intensity_models  exponential-kernel Hawkes models, coarse noise models,
                      analytic gradients, closed-form compensators
    thinning_sampler  event-stream simulation and noise-sample drawing
    objectives        NCE / Monte-Carlo MLE / exact log-likelihood objectives
    trainer           Adam-based stochastic training loop with curve logging
    evaluation        held-out evaluation, prediction, replication experiments
    cli               command-line entry points
"""

__version__ = "0.1.0"
