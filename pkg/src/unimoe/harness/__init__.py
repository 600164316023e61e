"""Training harness: synthetic corpora, schedules, run configs, the
training loop, report writers, and the command-line interface."""

from . import ablation, artifacts, config, corpus, reports, schedules, training

__all__ = ["ablation", "artifacts", "config", "corpus", "reports",
           "schedules", "training"]
