"""Multi-agent deep Q-learning for landmark search in 3-D volumes.

Fifteen agents, one per landmark, share a 3-D convolutional encoder and talk
through graph communication layers over the fetal pose graph. Training uses a
distance reward optionally shaped by distances to limb segments.
"""

__version__ = "0.1.0"
