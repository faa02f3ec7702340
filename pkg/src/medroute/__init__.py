"""Dynamic specialist routing: a trainable router that sequentially selects
specialist agents, trained with length-decayed rewards and grouped advantage
normalization, plus orchestration, synthetic-environment, and evaluation
tooling."""

__version__ = "0.1.0"
