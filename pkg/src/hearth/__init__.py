"""Desk-scale smart-home stack.

A deterministic discrete-event simulation of a 433MHz home control network
(star topology, collision-avoidance MAC, guaranteed slots), the smart-router
gateway that bridges it to WAN clients, a rendezvous server with relay/P2P
path selection, and a scenario harness that measures the product's
quantitative targets (capacity, latency, energy, scale).
"""

__version__ = "0.1.0"
