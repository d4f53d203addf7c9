"""Pseudo-anomaly curation and a domain-aligned, memory-regularized detector.

Core subsystems: binary tensor + manifest formats (``formats``), embedding
curation (``curation``), a reverse-mode autodiff tape (``autodiff``), the
detector network (``model``), its objectives (``losses``), training and
frame-level evaluation (``training``), a synthetic magnitude-bias benchmark
(``simulate``), and gradient verification (``gradcheck``). The HTTP service
in ``service`` wraps all of it; ``cli`` is a thin client.
"""

__version__ = "0.1.0"
