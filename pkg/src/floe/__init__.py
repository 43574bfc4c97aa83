"""Federated LLM-SLM simulator.

Heterogeneity-aware LoRA fine-tuning across simulated edge devices,
task-clustered server aggregation, and privacy-routed, timeout-bounded
logit fusion between a local small model and a cloud model.
"""

__version__ = "0.1.0"
