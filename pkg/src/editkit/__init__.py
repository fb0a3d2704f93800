"""editkit: edit-pair representation learning, exemplar-conditioned
diffusion editing, and edit-quality metrics at desk scale."""

__version__ = "0.1.0"
