"""glab: a desk-scale lab for guided diffusion sampling.

Small trained-from-scratch token denoisers, four norm-preserving token
perturbations used as guidance signals, the standard guidance baselines,
and spectral diagnostics of what each method's correction actually targets.
"""

__version__ = "0.1.0"
