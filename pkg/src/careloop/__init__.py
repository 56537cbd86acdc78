"""careloop: offline-to-online clinical decision support workbench.

Pipeline: synthetic cohort generation -> de-identification -> digital-twin
dynamics ensemble -> adversarial outcome model -> batch-constrained policies
-> safety-gated online streaming loop with ensemble-uncertainty expert
querying, k-center batching, and live hot-parameter control.
"""

__version__ = "0.1.0"
