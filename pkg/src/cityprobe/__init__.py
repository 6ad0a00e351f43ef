"""Probe large language models for city and region knowledge.

The pipeline asks a chat model for target values directly, for explicit
feature scores, or ingests hidden states from a local model; it then trains
regressors on the features and checks for signs that the model is guessing.
"""

__version__ = "0.1.0"
