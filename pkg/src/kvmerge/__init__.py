"""Training-free vision-token compression for the prefill KV cache.

Vision tokens are merged inside spatial windows by bipartite matching on
feature divergence, with merges weighted by how strongly each token attends
to the text prompt. Windows widen across scheduled layers.
"""

__version__ = "0.1.0"
