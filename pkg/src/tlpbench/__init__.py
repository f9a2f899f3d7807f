"""Few-shot node classification benchmark: transductive linear probing vs. episodic meta-learning."""

__version__ = "0.1.0"
