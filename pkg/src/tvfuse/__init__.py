"""tvfuse: merge independently post-trained checkpoints at test time.

The package extracts parameter-delta task vectors from checkpoint pairs,
prunes them to their highest-magnitude entries with norm-preserving
rescaling, and searches two scalar combination coefficients against a
pluggable evaluation backend, keeping the Pareto-best trade-off between
answer consistency and perplexity.
"""

__version__ = "0.1.0"
