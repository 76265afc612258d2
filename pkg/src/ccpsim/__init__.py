"""Channel-coded precoding for multi-user MISO downlinks.

Subpackages cover channel coding, QAM modulation, fading channel models,
coded-bit error probabilities with analytic gradients, transmit-signal
designers (linear, symbol-level, and channel-coded precoding), and a
Monte-Carlo BER simulation harness with a CLI.
"""

__version__ = "0.1.0"
