"""Relay-race inference for long-sequence generative recommendation.

Library pieces: a toy causal-attention backbone with prefix KV reuse
(:mod:`relayrank.model`), the admission trigger (:mod:`relayrank.trigger`),
affinity routing (:mod:`relayrank.router`), the HBM/DRAM lifecycle cache
(:mod:`relayrank.tiers`) and ranking instances (:mod:`relayrank.instance`).
:mod:`relayrank.sim` composes them into a discrete-event simulator.
"""

__version__ = "0.1.0"
