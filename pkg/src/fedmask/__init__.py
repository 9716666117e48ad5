"""Deterministic federated-learning security workbench: a secure-aggregation
protocol simulator, malicious-server attacks against it, reconstruction
attacks on tiny models, and the uniform-noise masking defense."""

__version__ = "0.1.0"

from . import adversary, aggregators, attacks, crypto, data, fedcore, harness, models, numeric, secagg  # noqa: F401
