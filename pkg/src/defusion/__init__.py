"""defusion: deconfounded infrared/visible image fusion at desk scale.

A compact, fully deterministic pipeline: synthetic biased-scene
corpora, per-modality scene confounder dictionaries, a fusion network
whose feature fusion stage performs back-door adjustment over those
dictionaries, Adam training on a composite fusion loss, and the four
standard quality metrics (MI, VIF, Qabf, SSIM).
"""

__version__ = "0.1.0"
