"""Graph contrastive learning with a meta-learned graph augmenter.

A self-contained engine: tape autodiff with second-order support, GIN
encoder over edge-weighted message passing, the trainable edge-weight
augmenter, the contrastive and correlation losses, the alternating bilevel
training loop, and the linear-probe evaluation protocol.
"""

__version__ = "0.1.0"
