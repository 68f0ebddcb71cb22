"""Attention calibration toolkit on a toy decoder-only transformer.

Initial-token weight scaling (SIW), attention-wave and information-flow
analysis, and position-scaling baselines, all on synthetic retrieval tasks.
"""

__version__ = "0.1.0"
