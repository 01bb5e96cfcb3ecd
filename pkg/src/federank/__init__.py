"""FedeRank: federated pair-wise learning to rank.

A split factorization model trained by a simulated federation of
clients: the server owns item embeddings and biases, every client keeps
its own user embedding and consumption history, and positive-item
updates are masked before they leave the device.

Centralized baselines, top-N evaluation and a sign-leakage audit
live alongside the simulator.
"""

__version__ = "1.0.0"
__author__ = "Rudy"
