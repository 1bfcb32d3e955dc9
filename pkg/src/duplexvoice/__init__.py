"""duplexvoice: a desk-scale streaming full-duplex speech-to-speech pipeline.

Chunk-wise speech encoding into a frozen toy language backbone, chunk-level
dialogue-state prediction, two-stage speech-token generation with a FIFO-fed
streaming codec decoder, a worker-pool server with externalized per-session
caches, and a simulation-clock latency probe.
"""

__version__ = "0.1.0"
