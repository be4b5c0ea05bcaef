"""
Physics-informed Gaussians: PDE solutions as learnable Gaussian feature
embeddings followed by a small network.
"""
__version__ = "1.0.0"
