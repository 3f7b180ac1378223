"""Coalition formation for renewable prosumers.

Simulates net-production series from weather, groups agents through
correlation graphs and evaluates the resulting coalitions on a market
with a minimum contract and a maximum under-production probability.
"""

__version__ = "0.1.0"
